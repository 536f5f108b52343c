"""Batch export of frozen vision-encoder features to TeacherFile format."""

from .encoder import FrozenLocalEncoder, ModelUnavailableError, load_model
from .exporter import ExportManifest, export_features
from .teacherfile import content_id, read_teacher_file, write_teacher_file

__all__ = ["FrozenLocalEncoder", "ModelUnavailableError", "load_model",
           "ExportManifest", "export_features", "content_id",
           "read_teacher_file", "write_teacher_file"]
