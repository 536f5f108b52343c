"""Reconstruction metrics, PCA baseline, linear probing, and the design
ablation ladder runner."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import losses, trainer
from .autodiff import Tensor
from .data import LabeledDataset, normalize
from .hypernet import HuvrConfig, HuvrModel, VARIANTS
from .trainer import TrainConfig

PSNR_CAP = 100.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1/MSE) in dB for [0,1]-range images; MSE=0 capped at 100."""
    if a.shape != b.shape:
        raise ValueError(f"psnr shapes {a.shape} vs {b.shape}")
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP)


# ---------------------------------------------------------------------------
# PCA baseline

@dataclass
class PcaTransform:
    mean: np.ndarray  # [d]
    components: np.ndarray  # [d_t, d], orthonormal rows
    explained_variance_ratio: np.ndarray  # [d_t], non-increasing
    rank_deficient: bool = False

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) @ self.components.T

    def invert(self, z: np.ndarray) -> np.ndarray:
        return z @ self.components + self.mean


def fit_pca(features: np.ndarray, d_t: int) -> PcaTransform:
    """Top-d_t principal directions via covariance eigendecomposition.

    Deterministic sign: each component's largest-magnitude entry is positive.
    Rank-deficient inputs are padded with zero components.
    """
    n, d = features.shape
    if n <= d_t:
        raise ValueError(f"need more than d_t={d_t} samples, got {n}")
    mean = features.mean(axis=0)
    x = features - mean
    cov = (x.T @ x) / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    rank = int(np.sum(evals > max(evals[0], 1e-30) * 1e-10))
    comps = np.zeros((d_t, d), dtype=features.dtype)
    k = min(d_t, rank)
    comps[:k] = evecs[:, :k].T
    for i in range(k):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    total = evals.sum()
    ratios = evals[:d_t] / total if total > 0 else np.zeros(d_t)
    return PcaTransform(mean, comps, ratios, rank_deficient=rank < d_t)


# ---------------------------------------------------------------------------
# linear probing

@dataclass
class ProbeConfig:
    epochs: int = 100
    lr: float = 0.01
    batch_size: int = 64
    weight_decay: float = 1e-4
    seed: int = 0


@dataclass
class ProbeResult:
    source: str
    accuracy: float
    n_classes: int
    n_train: int
    n_val: int


def linear_probe(features: np.ndarray, labels: np.ndarray, split: np.ndarray,
                 cfg: ProbeConfig = None, source: str = "features") -> ProbeResult:
    """Multinomial logistic regression on frozen features, AdamW-trained.

    ``split`` is a boolean mask marking training rows; the rest are validation.
    """
    cfg = cfg or ProbeConfig()
    n_classes = int(labels.max()) + 1
    tr_x, tr_y = features[split], labels[split]
    va_x, va_y = features[~split], labels[~split]
    if len(np.unique(tr_y)) < 2:
        raise ValueError("degenerate training split: fewer than 2 classes")
    # standardize from train statistics for optimizer conditioning
    mu = tr_x.mean(axis=0)
    sd = tr_x.std(axis=0) + 1e-8
    tr_x = (tr_x - mu) / sd
    va_x = (va_x - mu) / sd

    rng = np.random.default_rng(cfg.seed)
    d = features.shape[1]
    W = np.zeros((d, n_classes), dtype=np.float64)
    b = np.zeros(n_classes, dtype=np.float64)
    mW = np.zeros_like(W); vW = np.zeros_like(W)
    mb = np.zeros_like(b); vb = np.zeros_like(b)
    t = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(tr_x))
        for s in range(0, len(tr_x), cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            x, y = tr_x[idx], tr_y[idx]
            logits = x @ W + b
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(len(y)), y] -= 1.0
            p /= len(y)
            gW = x.T @ p
            gb = p.sum(axis=0)
            t += 1
            for g, m, v, w in ((gW, mW, vW, W), (gb, mb, vb, b)):
                m *= 0.9; m += 0.1 * g
                v *= 0.999; v += 0.001 * g * g
                mh = m / (1 - 0.9 ** t)
                vh = v / (1 - 0.999 ** t)
                w -= cfg.lr * (mh / (np.sqrt(vh) + 1e-8) + cfg.weight_decay * w)
    pred = (va_x @ W + b).argmax(axis=1)
    acc = float(np.mean(pred == va_y)) if len(va_y) else float("nan")
    return ProbeResult(source, acc, n_classes, len(tr_y), len(va_y))


def extract_features(model: HuvrModel, dataset: LabeledDataset, source: str,
                     batch_size: int = 32) -> np.ndarray:
    """Frozen per-image feature vectors: 'encoder' global token (d_vit),
    'tintok' global TinTok (d_t), or 'decoder' global decoder token."""
    feats = []
    n = len(dataset.images)
    for s in range(0, n, batch_size):
        pixels = np.stack([im.pixels for im in dataset.images[s:s + batch_size]])
        if source == "decoder":
            ts = model.embed(Tensor(normalize(pixels)))
            ts = model.decode_tokens(ts)
            feats.append(ts.global_token_dec.data.copy())
            continue
        ts = model.embed(Tensor(normalize(pixels)))
        if source == "encoder":
            feats.append(ts.global_token_enc.data.copy())
        elif source == "tintok":
            if ts.global_tintok is None:
                raise ValueError("model variant has no TinTok stage")
            feats.append(ts.global_tintok.data.copy())
        else:
            raise ValueError(f"unknown feature source {source!r}")
    return np.concatenate(feats, axis=0)


# ---------------------------------------------------------------------------
# ablation ladder

@dataclass
class LadderRow:
    variant: str
    n_params: int
    psnr: float
    ssim: float


DIRECTIONAL_CHECKS = [
    ("patchwise_copy", ">=", "second_layer_only", 3.0),
    ("patchwise_global", ">=", "patchwise_copy", 0.0),
    ("patchwise_global", ">=", "plus_compression", 0.0),
]


def run_ablation_ladder(dataset: LabeledDataset, base_config: HuvrConfig,
                        train_config: TrainConfig, variants=None,
                        out_dir=None, log=None):
    """Train every ladder variant under an identical budget and report
    {params, PSNR, SSIM} per variant plus directional pass/fail."""
    variants = variants or VARIANTS
    rows = []
    for variant in variants:
        cfg = replace(base_config, variant=variant,
                      d_t=base_config.d_t, seed=base_config.seed)
        model = HuvrModel(cfg)
        run_dir = Path(out_dir) / variant if out_dir is not None else None
        trainer.train(model, dataset, None, train_config, out_dir=run_dir, log=log)
        idx = np.arange(min(len(dataset.images), 64))
        p, s = trainer.evaluate_reconstruction(model, dataset, idx,
                                               train_config.batch_size)
        rows.append(LadderRow(variant, model.n_params(), p, s))
        if log:
            log(f"[ladder] {variant}: params={rows[-1].n_params} "
                f"psnr={p:.2f} ssim={s:.4f}")
    checks = evaluate_ladder_checks(rows)
    return rows, checks


def evaluate_ladder_checks(rows) -> list:
    by_name = {r.variant: r for r in rows}
    results = []
    for a, op, b, margin in DIRECTIONAL_CHECKS:
        if a not in by_name or b not in by_name:
            continue
        ok = by_name[a].psnr >= by_name[b].psnr + margin
        results.append({"check": f"PSNR({a}) >= PSNR({b}) + {margin}",
                        "lhs": by_name[a].psnr, "rhs": by_name[b].psnr + margin,
                        "passed": bool(ok)})
    return results
