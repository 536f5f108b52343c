"""Directory export: decode images, run the frozen encoder, write the
TeacherFile plus a plain-text manifest."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .encoder import NORM_MEAN, NORM_STD
from .teacherfile import TeacherFileError, content_id, write_teacher_file

IMAGE_SUFFIXES = (".png", ".ppm")


class ExportDataError(RuntimeError):
    pass


@dataclass
class ExportManifest:
    model_id: str
    resolution: int
    patch_grid: int
    teacher_dim: int
    images: dict = field(default_factory=dict)  # image id -> relative path

    def to_text(self) -> str:
        lines = [f"model={self.model_id}",
                 f"resolution={self.resolution}",
                 f"patch_grid={self.patch_grid}",
                 f"teacher_dim={self.teacher_dim}",
                 f"normalize_mean={','.join(str(v) for v in NORM_MEAN)}",
                 f"normalize_std={','.join(str(v) for v in NORM_STD)}",
                 f"count={len(self.images)}"]
        for img_id in sorted(self.images):
            lines.append(f"image.{img_id}={self.images[img_id]}")
        return "\n".join(lines) + "\n"


def _decode(path: Path, resolution: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (resolution, resolution):
                im = im.resize((resolution, resolution), Image.BILINEAR)
            return np.asarray(im, dtype=np.uint8)
    except (OSError, ValueError) as e:
        raise ExportDataError(f"cannot decode {path}: {e}") from e


def export_features(image_dir, model, model_id: str, out_path,
                    resolution: int) -> ExportManifest:
    """Run the frozen encoder over every image in ``image_dir`` (recursive,
    sorted) and write ``out_path`` plus ``out_path + '.manifest'``."""
    root = Path(image_dir)
    if not root.is_dir():
        raise ExportDataError(f"image directory not found: {root}")
    paths = sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise ExportDataError(f"no images under {root}")
    if resolution % model.patch_size:
        raise TeacherFileError(
            f"resolution {resolution} not divisible by patch size "
            f"{model.patch_size}")
    grid = resolution // model.patch_size
    P = grid * grid

    records = {}
    manifest = ExportManifest(model_id, resolution, grid, model.dim)
    for path in paths:
        rgb = _decode(path, resolution)
        img_id = content_id(rgb)
        pixels = rgb.astype(np.float32).transpose(2, 0, 1) / 255.0
        g, p = model.forward(pixels)
        if g.shape != (model.dim,) or p.shape != (P, model.dim):
            raise TeacherFileError(
                f"encoder output dims {g.shape}/{p.shape} do not match the "
                f"requested grid {P} x dim {model.dim}")
        records[img_id] = (g, p)
        manifest.images[img_id] = os.fspath(path.relative_to(root))

    write_teacher_file(out_path, records, P, model.dim)
    tmp = str(out_path) + ".manifest.tmp"
    with open(tmp, "w") as f:
        f.write(manifest.to_text())
    os.replace(tmp, str(out_path) + ".manifest")
    return manifest
