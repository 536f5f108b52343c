"""Reconstruction and distillation objectives.

Pixel MSE, a differentiable uniform-window SSIM, and the four-term feature
distillation loss (global/patch tokens x encoder/decoder outputs, each with
its own LayerNorm+linear head and weight).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import nnops
from .autodiff import Tensor
from .hypernet import TokenSet

DEFAULT_ALPHAS = {"g_enc": 2.0, "p_enc": 2.0, "g_dec": 0.5, "p_dec": 0.5}


@dataclass
class DistillationConfig:
    alphas: dict = field(default_factory=lambda: dict(DEFAULT_ALPHAS))
    teacher_dim: int = 32

    def __post_init__(self):
        for k, v in self.alphas.items():
            if k not in DEFAULT_ALPHAS:
                raise ValueError(f"unknown distillation term {k!r}")
            if v < 0:
                raise ValueError("distillation weights must be >= 0")


@dataclass
class LossConfig:
    use_reconstruction: bool = True
    use_ssim: bool = False
    lambda_ssim: float = 0.1
    distill: Optional[DistillationConfig] = None


def pixel_mse(recon: Tensor, target: Tensor) -> Tensor:
    if recon.shape != target.shape:
        raise ad.ShapeMismatch(f"mse shapes {recon.shape} vs {target.shape}")
    d = recon - target
    return ad.tmean(d * d)


def ssim(a: Tensor, b: Tensor, window: int = 11,
         c1: float = 0.01 ** 2, c2: float = 0.03 ** 2) -> Tensor:
    """Mean local SSIM with a uniform window, on [0,1]-range images.

    Works on [..., C, H, W]; averaged over channels and locations.
    """
    if a.shape != b.shape:
        raise ad.ShapeMismatch(f"ssim shapes {a.shape} vs {b.shape}")
    if a.shape[-1] < window or a.shape[-2] < window:
        raise ad.ShapeMismatch(f"image {a.shape[-2:]} smaller than window {window}")
    mu_a = ad.box_filter(a, window)
    mu_b = ad.box_filter(b, window)
    var_a = ad.box_filter(a * a, window) - mu_a * mu_a
    var_b = ad.box_filter(b * b, window) - mu_b * mu_b
    cov = ad.box_filter(a * b, window) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return ad.tmean(num / den)


def distillation_loss(tokens: TokenSet, heads: dict, teacher_global: Tensor,
                      teacher_patches: Tensor, cfg: DistillationConfig):
    """Weighted sum over enabled (token type, output block) pairs.

    L2 is the mean over feature dims (and patches, for patch terms); never
    reads the compressed TinToks.
    """
    sources = {
        "g_enc": tokens.global_token_enc,
        "p_enc": tokens.patch_tokens_enc,
        "g_dec": tokens.global_token_dec,
        "p_dec": tokens.patch_tokens_dec,
    }
    targets = {
        "g_enc": teacher_global, "g_dec": teacher_global,
        "p_enc": teacher_patches, "p_dec": teacher_patches,
    }
    if teacher_patches.shape[-2] != tokens.patch_tokens_enc.shape[-2]:
        raise ad.ShapeMismatch(
            f"teacher patch count {teacher_patches.shape[-2]} != "
            f"model {tokens.patch_tokens_enc.shape[-2]}")
    total = None
    components = {}
    for name, alpha in cfg.alphas.items():
        if alpha == 0.0:
            components[name] = 0.0
            continue
        feats = sources[name]
        if feats is None:
            raise ValueError(f"token stage for {name!r} not present")
        ln, fc = heads[name]
        proj = nnops.norm_linear(feats, ln, fc)
        d = proj - targets[name]
        term = ad.tmean(d * d)
        components[name] = term.item()
        weighted = term * float(alpha)
        total = weighted if total is None else total + weighted
    if total is None:
        total = Tensor(np.float32(0.0))
    return total, components


def total_loss(recon: Tensor, target: Tensor, tokens: TokenSet, heads: Optional[dict],
               teacher_global: Optional[Tensor], teacher_patches: Optional[Tensor],
               cfg: LossConfig):
    """Combined objective; returns (scalar, per-component report)."""
    report = {"mse": 0.0, "ssim": 0.0,
              "distill_g_enc": 0.0, "distill_p_enc": 0.0,
              "distill_g_dec": 0.0, "distill_p_dec": 0.0}
    total = None
    if cfg.use_reconstruction:
        mse = pixel_mse(recon, target)
        report["mse"] = mse.item()
        total = mse
        if cfg.use_ssim:
            s = ssim(recon, target)
            report["ssim"] = s.item()
            total = total + cfg.lambda_ssim * (1.0 - s)
    if cfg.distill is not None and teacher_global is not None:
        dl, comps = distillation_loss(tokens, heads, teacher_global, teacher_patches,
                                      cfg.distill)
        for k, v in comps.items():
            report["distill_" + k] = v
        total = dl if total is None else total + dl
    if total is None:
        total = Tensor(np.float32(0.0))
    report["total"] = total.item()
    return total, report
