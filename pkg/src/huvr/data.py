"""Image I/O, augmentation, patchification, synthetic datasets, and teacher
feature files.

All randomness flows through explicit numpy Generators so a run's data
stream is reproducible from (seed, spec). Image ids are content hashes of
the decoded 8-bit pixels, so teacher files survive renames.
"""

from __future__ import annotations

import hashlib
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from PIL import Image

from .autodiff import Tensor

TEACHER_MAGIC = b"HUVRTEAC"


class DataError(Exception):
    pass


class TeacherFormatError(DataError):
    pass


@dataclass
class ImageTensor:
    pixels: np.ndarray  # [3, H, W] float32 in [0,1]
    id: str  # hex content hash

    @property
    def resolution(self) -> tuple[int, int]:
        return self.pixels.shape[1], self.pixels.shape[2]


def content_id(rgb8: np.ndarray) -> str:
    """sha256 over uint8 RGB bytes, C-order, shape (H, W, 3)."""
    if rgb8.dtype != np.uint8 or rgb8.ndim != 3 or rgb8.shape[2] != 3:
        raise DataError(f"content_id expects (H, W, 3) uint8, got {rgb8.shape} {rgb8.dtype}")
    return hashlib.sha256(np.ascontiguousarray(rgb8).tobytes()).hexdigest()


def from_uint8(rgb8: np.ndarray) -> ImageTensor:
    pixels = rgb8.astype(np.float32).transpose(2, 0, 1) / 255.0
    return ImageTensor(pixels, content_id(rgb8))


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    arr = np.clip(pixels, 0.0, 1.0)
    return np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)


def load_image(path) -> ImageTensor:
    """Read an 8-bit PNG or binary PPM into [0,1] float channels."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"image not found: {path}")
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "PPM"):
                raise DataError(f"unsupported format {im.format} for {path}")
            rgb = np.asarray(im.convert("RGB"))
    except DataError:
        raise
    except Exception as e:
        raise DataError(f"corrupt image {path}: {e}") from e
    return from_uint8(rgb)


def save_image(path, img: ImageTensor | np.ndarray) -> None:
    pixels = img.pixels if isinstance(img, ImageTensor) else img
    arr = to_uint8(pixels)
    path = Path(path)
    fmt = "PPM" if path.suffix.lower() in (".ppm", ".pnm") else "PNG"
    Image.fromarray(arr).save(path, format=fmt)


def normalize(pixels: np.ndarray) -> np.ndarray:
    """[0,1] -> [-1,1] with mean/std 0.5 per channel."""
    return (pixels - 0.5) / 0.5


def denormalize(pixels: np.ndarray) -> np.ndarray:
    return pixels * 0.5 + 0.5


def patchify(pixels: np.ndarray, patch: int) -> np.ndarray:
    """[3, H, W] -> [P, 3, patch, patch], row-major non-overlapping tiles."""
    c, h, w = pixels.shape
    if h % patch or w % patch:
        raise DataError(f"image {h}x{w} not divisible by patch {patch}")
    rows, cols = h // patch, w // patch
    x = pixels.reshape(c, rows, patch, cols, patch)
    return x.transpose(1, 3, 0, 2, 4).reshape(rows * cols, c, patch, patch)


def unpatchify(patches: np.ndarray, grid_shape: tuple[int, int]) -> np.ndarray:
    rows, cols = grid_shape
    P, c, p, _ = patches.shape
    if P != rows * cols:
        raise DataError(f"{P} patches cannot tile {rows}x{cols}")
    x = patches.reshape(rows, cols, c, p, p)
    return x.transpose(2, 0, 3, 1, 4).reshape(c, rows * p, cols * p)


def random_resized_crop(img: ImageTensor, out_res: int,
                        rng: np.random.Generator) -> ImageTensor:
    """Area ratio in [0.2, 1.0], aspect in [3/4, 4/3], bilinear resize."""
    _, h, w = img.pixels.shape
    area = h * w
    for _ in range(10):
        ratio = rng.uniform(0.2, 1.0)
        aspect = math.exp(rng.uniform(math.log(3 / 4), math.log(4 / 3)))
        ch = int(round(math.sqrt(area * ratio / aspect)))
        cw = int(round(math.sqrt(area * ratio * aspect)))
        if 0 < ch <= h and 0 < cw <= w:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            crop = img.pixels[:, top:top + ch, left:left + cw]
            return ImageTensor(_bilinear_resize(crop, out_res, out_res), img.id)
    side = min(h, w)  # fallback: center crop
    top, left = (h - side) // 2, (w - side) // 2
    crop = img.pixels[:, top:top + side, left:left + side]
    return ImageTensor(_bilinear_resize(crop, out_res, out_res), img.id)


def _bilinear_resize(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    c, h, w = pixels.shape
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0).astype(np.float32)
    wx = np.clip(xs - x0, 0.0, 1.0).astype(np.float32)
    top = pixels[:, y0][:, :, x0] * (1 - wx) + pixels[:, y0][:, :, x1] * wx
    bot = pixels[:, y1][:, :, x0] * (1 - wx) + pixels[:, y1][:, :, x1] * wx
    return (top * (1 - wy[None, :, None]) + bot * wy[None, :, None]).astype(np.float32)


# ---------------------------------------------------------------------------
# datasets

@dataclass
class DatasetSpec:
    kind: str = "synthetic-shapes"  # or "image-directory"
    resolution: int = 32
    n_classes: int = 8
    n_images: int = 200
    seed: int = 0
    root: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("synthetic-shapes", "image-directory"):
            raise DataError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "synthetic-shapes" and self.n_classes > 16:
            raise DataError("synthetic shapes supports at most 16 classes")


_SHAPES = ["circle", "square", "triangle", "diamond"]
_COLORS = [(0.9, 0.15, 0.15), (0.15, 0.8, 0.2), (0.2, 0.3, 0.95), (0.95, 0.85, 0.1),
           (0.85, 0.2, 0.85), (0.1, 0.85, 0.85), (0.95, 0.55, 0.1), (0.55, 0.3, 0.8),
           (0.35, 0.6, 0.2), (0.8, 0.5, 0.5), (0.3, 0.3, 0.3), (0.9, 0.9, 0.9),
           (0.6, 0.1, 0.3), (0.1, 0.4, 0.5), (0.7, 0.7, 0.2), (0.4, 0.2, 0.1)]


def _textured_background(res: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth low-frequency color field plus mild pixel noise."""
    coarse = rng.uniform(0.1, 0.8, size=(3, 4, 4)).astype(np.float32)
    bg = _bilinear_resize(coarse, res, res)
    bg += rng.normal(0, 0.03, size=bg.shape).astype(np.float32)
    return np.clip(bg, 0.0, 1.0)


def _shape_mask(kind: str, res: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:res, 0:res]
    y = (yy + 0.5) / res - cy
    x = (xx + 0.5) / res - cx
    if kind == "circle":
        return (x * x + y * y) <= r * r
    if kind == "square":
        return (np.abs(x) <= r) & (np.abs(y) <= r)
    if kind == "diamond":
        return (np.abs(x) + np.abs(y)) <= 1.3 * r
    if kind == "triangle":
        return (y <= r) & (np.abs(x) * 2.0 <= (r - y))
    raise DataError(f"unknown shape {kind!r}")


def render_shape_image(res: int, label: int, rng: np.random.Generator) -> np.ndarray:
    """One colored shape on a textured background. Class = color index."""
    img = _textured_background(res, rng)
    shape = _SHAPES[int(rng.integers(0, len(_SHAPES)))]
    color = np.array(_COLORS[label], dtype=np.float32)
    cx = rng.uniform(0.35, 0.65)
    cy = rng.uniform(0.35, 0.65)
    r = rng.uniform(0.18, 0.3)
    mask = _shape_mask(shape, res, cx, cy, r)
    jitter = rng.normal(0, 0.02, size=3).astype(np.float32)
    img[:, mask] = np.clip(color + jitter, 0.0, 1.0)[:, None]
    return img


@dataclass
class LabeledDataset:
    images: list  # of ImageTensor
    labels: np.ndarray
    n_classes: int


def synth_shapes(spec: DatasetSpec) -> LabeledDataset:
    """Procedural labeled dataset; balanced within +-1 image per class."""
    rng = np.random.default_rng(spec.seed)
    images, labels = [], []
    for i in range(spec.n_images):
        label = i % spec.n_classes
        pixels = render_shape_image(spec.resolution, label, rng)
        images.append(from_uint8(to_uint8(pixels)))  # quantize for stable content ids
        labels.append(label)
    return LabeledDataset(images, np.array(labels, dtype=np.int64), spec.n_classes)


def load_image_directory(root, resolution: Optional[int] = None) -> LabeledDataset:
    """Directory convention: root/<class>/<image>.{png,ppm}."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    classes = sorted(d.name for d in root.iterdir() if d.is_dir())
    images, labels = [], []
    if classes:
        for ci, cname in enumerate(classes):
            for p in sorted((root / cname).iterdir()):
                if p.suffix.lower() in (".png", ".ppm", ".pnm"):
                    images.append(_maybe_resize(load_image(p), resolution))
                    labels.append(ci)
    else:
        for p in sorted(root.iterdir()):
            if p.suffix.lower() in (".png", ".ppm", ".pnm"):
                images.append(_maybe_resize(load_image(p), resolution))
                labels.append(0)
    if not images:
        raise DataError(f"no images under {root}")
    return LabeledDataset(images, np.array(labels, dtype=np.int64), max(len(classes), 1))


def _maybe_resize(img: ImageTensor, resolution: Optional[int]) -> ImageTensor:
    if resolution is None or img.pixels.shape[1:] == (resolution, resolution):
        return img
    return ImageTensor(_bilinear_resize(img.pixels, resolution, resolution), img.id)


def load_dataset(spec: DatasetSpec) -> LabeledDataset:
    if spec.kind == "synthetic-shapes":
        return synth_shapes(spec)
    return load_image_directory(spec.root, spec.resolution)


# ---------------------------------------------------------------------------
# teacher feature files

@dataclass
class TeacherFeatures:
    global_feat: np.ndarray  # [teacher_dim]
    patch_feats: np.ndarray  # [P, teacher_dim]
    source_id: str


def write_teacher_file(path, records: dict, P: int, teacher_dim: int) -> None:
    """records: image id (hex sha256) -> TeacherFeatures. Atomic write."""
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(TEACHER_MAGIC)
        f.write(struct.pack("<I", 1))
        f.write(struct.pack("<III", len(records), P, teacher_dim))
        for img_id in sorted(records):
            feat = records[img_id]
            if feat.global_feat.shape != (teacher_dim,):
                raise TeacherFormatError(f"global dim {feat.global_feat.shape} != {teacher_dim}")
            if feat.patch_feats.shape != (P, teacher_dim):
                raise TeacherFormatError(f"patch dims {feat.patch_feats.shape} != ({P},{teacher_dim})")
            f.write(bytes.fromhex(img_id))
            f.write(feat.global_feat.astype("<f4").tobytes())
            f.write(np.ascontiguousarray(feat.patch_feats, dtype="<f4").tobytes())
    os.replace(tmp, path)


def read_teacher_file(path) -> tuple[dict, int, int]:
    """Returns (records by hex id, P, teacher_dim)."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != TEACHER_MAGIC:
        raise TeacherFormatError("bad magic")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != 1:
        raise TeacherFormatError(f"unsupported version {version}")
    count, P, teacher_dim = struct.unpack_from("<III", data, 12)
    off = 24
    rec_size = 32 + 4 * teacher_dim + 4 * P * teacher_dim
    if len(data) - off != count * rec_size:
        raise TeacherFormatError("record count mismatch")
    records = {}
    for _ in range(count):
        img_id = data[off:off + 32].hex()
        off += 32
        g = np.frombuffer(data, dtype="<f4", count=teacher_dim, offset=off).copy()
        off += 4 * teacher_dim
        p = np.frombuffer(data, dtype="<f4", count=P * teacher_dim, offset=off)
        p = p.reshape(P, teacher_dim).copy()
        off += 4 * P * teacher_dim
        records[img_id] = TeacherFeatures(g, p, img_id)
    return records, P, teacher_dim


class FrozenRandomTeacher:
    """Deterministic stand-in teacher: a fixed random projection of
    average-pooled patch pixels, so features carry label-correlated color
    structure without any pretrained network."""

    def __init__(self, seed: int, patch_size: int, teacher_dim: int, pool: int = 2):
        self.seed = seed
        self.patch_size = patch_size
        self.teacher_dim = teacher_dim
        self.pool = pool
        rng = np.random.default_rng(seed)
        d_pix = 3 * pool * pool
        self.proj = rng.normal(0, 1.0 / np.sqrt(d_pix),
                               size=(d_pix, teacher_dim)).astype(np.float32)
        self.global_proj = rng.normal(0, 1.0 / np.sqrt(d_pix),
                                      size=(d_pix, teacher_dim)).astype(np.float32)

    def features(self, img: ImageTensor) -> TeacherFeatures:
        patches = patchify(img.pixels, self.patch_size)  # [P, 3, p, p]
        P, c, p, _ = patches.shape
        k = p // self.pool
        pooled = patches.reshape(P, c, self.pool, k, self.pool, k).mean(axis=(3, 5))
        pooled = pooled.reshape(P, -1)  # [P, 3*pool^2]
        patch_feats = pooled @ self.proj
        global_feat = pooled.mean(axis=0) @ self.global_proj
        return TeacherFeatures(global_feat.astype(np.float32),
                               patch_feats.astype(np.float32), img.id)

    def export(self, images) -> dict:
        return {img.id: self.features(img) for img in images}


class TeacherProvider:
    """Constant per-image features looked up by content id."""

    def __init__(self, records: dict, teacher_dim: int):
        self.records = records
        self.teacher_dim = teacher_dim

    @staticmethod
    def from_file(path) -> "TeacherProvider":
        records, _, dim = read_teacher_file(path)
        return TeacherProvider(records, dim)

    def batch(self, images) -> tuple[np.ndarray, np.ndarray]:
        gs, ps = [], []
        for img in images:
            rec = self.records.get(img.id)
            if rec is None:
                raise DataError(f"teacher features missing for image {img.id[:12]}")
            gs.append(rec.global_feat)
            ps.append(rec.patch_feats)
        return np.stack(gs), np.stack(ps)
