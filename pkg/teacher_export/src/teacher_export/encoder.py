"""Frozen feature encoders.

Remote pretrained models need downloadable weights; in an offline setting
``load_model`` raises ``ModelUnavailableError`` for them. The always
available fallback is ``local-frozen-<seed>``: a deterministic, randomly
initialized ViT-style encoder whose weights are a pure function of the seed.
It is frozen by construction (plain numpy, no gradients anywhere), so its
outputs are a pure function of (model, image).
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

# preprocessing constants recorded in the manifest
NORM_MEAN = (0.485, 0.456, 0.406)
NORM_STD = (0.229, 0.224, 0.225)


class ModelUnavailableError(RuntimeError):
    pass


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _layer_norm(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5)


@dataclass
class FrozenLocalEncoder:
    """Two-block ViT-style encoder with seeded fixed weights."""

    seed: int
    patch_size: int
    dim: int
    n_blocks: int = 2

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        d_pix = 3 * self.patch_size * self.patch_size
        s = 1.0 / np.sqrt(d_pix)
        self.embed = rng.normal(0, s, size=(d_pix, self.dim)).astype(np.float32)
        self.cls = rng.normal(0, 0.02, size=self.dim).astype(np.float32)
        sd = 1.0 / np.sqrt(self.dim)
        self.blocks = []
        for _ in range(self.n_blocks):
            self.blocks.append({
                "q": rng.normal(0, sd, size=(self.dim, self.dim)).astype(np.float32),
                "k": rng.normal(0, sd, size=(self.dim, self.dim)).astype(np.float32),
                "v": rng.normal(0, sd, size=(self.dim, self.dim)).astype(np.float32),
                "w1": rng.normal(0, sd, size=(self.dim, 2 * self.dim)).astype(np.float32),
                "w2": rng.normal(0, sd / np.sqrt(2), size=(2 * self.dim, self.dim)).astype(np.float32),
            })

    def _positions(self, n: int) -> np.ndarray:
        pos = np.arange(n)[:, None]
        i = np.arange(self.dim // 2)[None, :]
        angle = pos / (10000.0 ** (2 * i / self.dim))
        out = np.concatenate([np.sin(angle), np.cos(angle)], axis=1)
        return out.astype(np.float32)

    def forward(self, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """pixels [3, H, W] in [0, 1] -> (global [dim], patches [P, dim])."""
        x = (pixels - np.array(NORM_MEAN, dtype=np.float32)[:, None, None]) \
            / np.array(NORM_STD, dtype=np.float32)[:, None, None]
        c, h, w = x.shape
        p = self.patch_size
        if h % p or w % p:
            raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
        gh, gw = h // p, w // p
        patches = x.reshape(c, gh, p, gw, p).transpose(1, 3, 0, 2, 4)
        patches = patches.reshape(gh * gw, -1)
        tokens = patches @ self.embed
        tokens = np.concatenate([self.cls[None], tokens], axis=0)
        tokens = tokens + self._positions(len(tokens))
        scale = 1.0 / np.sqrt(self.dim)
        for b in self.blocks:
            n = _layer_norm(tokens)
            att = _softmax((n @ b["q"]) @ (n @ b["k"]).T * scale)
            tokens = tokens + att @ (n @ b["v"])
            n = _layer_norm(tokens)
            tokens = tokens + np.tanh(n @ b["w1"]) @ b["w2"]
        tokens = _layer_norm(tokens).astype(np.float32)
        return tokens[0], tokens[1:]


_LOCAL = re.compile(r"^local-frozen-(\d+)$")


def load_model(model_id: str, patch_size: int, dim: int):
    """Resolve a model id to a frozen encoder.

    Only ``local-frozen-<seed>`` can be constructed offline; recognizable
    remote ids fail with ModelUnavailableError so callers can distinguish
    a missing download from a typo.
    """
    m = _LOCAL.match(model_id)
    if m:
        return FrozenLocalEncoder(int(m.group(1)), patch_size, dim)
    if re.match(r"^(dino|dinov2|dinov3|vit|clip|mae)[-_/]", model_id):
        raise ModelUnavailableError(
            f"pretrained weights for {model_id!r} are not downloadable here; "
            f"use local-frozen-<seed> or provide a reachable weight source")
    raise ModelUnavailableError(f"unknown model id {model_id!r}")
