"""AdamW training loop with warmup+cosine schedule, global-norm gradient
clipping, metrics CSV, and checkpointing."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import hypernet, losses
from .autodiff import Tape, Tensor
from .data import LabeledDataset, normalize
from .hypernet import HuvrModel
from .losses import LossConfig

CSV_COLUMNS = ["step", "epoch", "lr", "loss_total", "loss_mse", "loss_ssim",
               "loss_distill_g_enc", "loss_distill_p_enc",
               "loss_distill_g_dec", "loss_distill_p_dec",
               "psnr_val", "ssim_val"]


class NumericError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr_base: float = 0.0005
    batch_size: int = 16
    epochs: int = 10
    warmup_epochs: int = 5
    clip_norm: float = 0.01
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    val_fraction: float = 0.0
    checkpoint_every_epochs: int = 0  # 0: only final
    augment: bool = False

    def __post_init__(self):
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")

    @property
    def effective_lr(self) -> float:
        return self.lr_base * self.batch_size / 256.0


@dataclass
class TrainState:
    step: int
    model: HuvrModel
    moments: dict  # name -> (m, v)
    history: list = field(default_factory=list)


def lr_schedule(step: int, total_steps: int, cfg: TrainConfig,
                steps_per_epoch: Optional[int] = None) -> float:
    """Linear warmup to lr_base*B/256, then cosine to zero."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    lr_eff = cfg.effective_lr
    if cfg.epochs < 50 or steps_per_epoch is None:
        warmup = int(round(0.1 * total_steps))  # preserve the 5/50 warmup fraction
    else:
        warmup = cfg.warmup_epochs * steps_per_epoch
    warmup = min(warmup, total_steps)
    if warmup > 0 and step < warmup:
        return lr_eff * step / warmup
    if total_steps == warmup:
        return lr_eff
    t = (step - warmup) / (total_steps - warmup)
    return lr_eff * 0.5 * (1.0 + math.cos(math.pi * t))


def clip_global_norm(grads: dict, max_norm: float) -> dict:
    """Scale all gradients so the global L2 norm is at most max_norm."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    sq = 0.0
    for g in grads.values():
        sq += float(np.sum(g.astype(np.float64) ** 2))
    norm = math.sqrt(sq)
    if norm <= max_norm:
        return grads
    # deflate slightly so f32 rounding cannot push the result back above
    scale = max_norm / norm * (1.0 - 1e-6)
    return {k: (g * np.asarray(scale, dtype=g.dtype)).astype(g.dtype)
            for k, g in grads.items()}


def adamw_step(params: dict, grads: dict, moments: dict, lr_t: float,
               betas: tuple = (0.9, 0.999), eps: float = 1e-8,
               wd: float = 0.0, t: int = 1) -> None:
    """Decoupled-weight-decay Adam update, in place."""
    b1, b2 = betas
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        m, v = moments.setdefault(name, (np.zeros_like(p.data), np.zeros_like(p.data)))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        moments[name] = (m, v)
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        p.data -= lr_t * (mh / (np.sqrt(vh) + eps) + wd * p.data)


def psnr_from_mse(mse: float, cap: float = 100.0) -> float:
    if mse <= 0:
        return cap
    return min(10.0 * math.log10(1.0 / mse), cap)


def _batch_pixels(dataset: LabeledDataset, idx) -> np.ndarray:
    return np.stack([dataset.images[i].pixels for i in idx])


def evaluate_reconstruction(model: HuvrModel, dataset: LabeledDataset, idx,
                            batch_size: int = 16) -> tuple[float, float]:
    """Mean PSNR and SSIM over the given indices (no tape)."""
    psnrs, ssims = [], []
    for s in range(0, len(idx), batch_size):
        chunk = idx[s:s + batch_size]
        pixels = _batch_pixels(dataset, chunk)
        recon, _ = model.forward(Tensor(normalize(pixels)))
        for b in range(len(chunk)):
            mse = float(np.mean((recon.data[b] - pixels[b]) ** 2))
            psnrs.append(psnr_from_mse(mse))
            ssims.append(losses.ssim(Tensor(recon.data[b]), Tensor(pixels[b])).item())
    return float(np.mean(psnrs)), float(np.mean(ssims))


def train(model: HuvrModel, dataset: LabeledDataset, teacher=None,
          cfg: TrainConfig = None, out_dir=None, log=None) -> TrainState:
    """Run the optimization loop; writes metrics.csv and checkpoints when
    ``out_dir`` is given. Deterministic for a fixed (cfg.seed, dataset)."""
    cfg = cfg or TrainConfig()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    n = len(dataset.images)
    n_val = int(round(cfg.val_fraction * n))
    split_rng = np.random.default_rng(cfg.seed)
    order = split_rng.permutation(n)
    val_idx = order[:n_val]
    train_idx = order[n_val:]
    if len(train_idx) == 0:
        raise ValueError("empty training split")

    params = model.named_params()
    state = TrainState(step=0, model=model, moments={})
    spe = max(1, math.ceil(len(train_idx) / cfg.batch_size))
    total_steps = cfg.epochs * spe

    heads = model.distill_heads
    if cfg.loss.distill is not None and heads is None:
        raise ValueError("distillation enabled but model has no distillation heads")

    writer = None
    csv_file = None
    if out_dir is not None:
        csv_file = open(out_dir / "metrics.csv", "w", newline="")
        writer = csv.writer(csv_file)
        writer.writerow(CSV_COLUMNS)
        (out_dir / "run_config.txt").write_text(config_text(cfg, model))

    aug_rng = np.random.default_rng(cfg.seed + 1)
    try:
        for epoch in range(cfg.epochs):
            epoch_rng = np.random.default_rng((cfg.seed, epoch))
            perm = epoch_rng.permutation(len(train_idx))
            for bi in range(spe):
                batch = train_idx[perm[bi * cfg.batch_size:(bi + 1) * cfg.batch_size]]
                if len(batch) == 0:
                    continue
                imgs = [dataset.images[i] for i in batch]
                if cfg.augment:
                    from .data import random_resized_crop
                    res = model.config.image_size
                    imgs = [random_resized_crop(im, res, aug_rng) for im in imgs]
                pixels = np.stack([im.pixels for im in imgs])
                tg = tp = None
                if teacher is not None and cfg.loss.distill is not None:
                    tg_np, tp_np = teacher.batch(imgs)
                    tg, tp = Tensor(tg_np), Tensor(tp_np)

                lr_t = lr_schedule(state.step, total_steps, cfg, steps_per_epoch=spe)
                with Tape() as tape:
                    recon, tokens = model.forward(Tensor(normalize(pixels)))
                    loss, report = losses.total_loss(
                        recon, Tensor(pixels), tokens, heads, tg, tp, cfg.loss)
                    if not math.isfinite(report["total"]):
                        if out_dir is not None:
                            hypernet.save_checkpoint(out_dir / "diagnostic.ckpt", model)
                        raise NumericError(f"non-finite loss at step {state.step}")
                    tape.backward(loss)
                grads = {name: tape.grad(p) for name, p in params.items()}
                grads = clip_global_norm(grads, cfg.clip_norm)
                state.step += 1
                try:
                    adamw_step(params, grads, state.moments, lr_t, cfg.betas,
                               cfg.eps, cfg.weight_decay, t=state.step)
                except NumericError as e:
                    if log:
                        log(f"step {state.step} rejected: {e}")
                    continue

                if writer is not None:
                    writer.writerow(_csv_row(state.step, epoch, lr_t, report, "", ""))

            eval_idx = val_idx if len(val_idx) else train_idx[:min(16, len(train_idx))]
            psnr_v, ssim_v = evaluate_reconstruction(model, dataset, eval_idx,
                                                     cfg.batch_size)
            state.history.append({"epoch": epoch, "psnr": psnr_v, "ssim": ssim_v})
            if writer is not None:
                writer.writerow(_csv_row(state.step, epoch, lr_t, report,
                                         f"{psnr_v:.6f}", f"{ssim_v:.6f}"))
            if log:
                log(f"epoch {epoch}: loss={report['total']:.6f} "
                    f"psnr={psnr_v:.2f} ssim={ssim_v:.4f}")
            if (out_dir is not None and cfg.checkpoint_every_epochs
                    and (epoch + 1) % cfg.checkpoint_every_epochs == 0):
                _save_state(out_dir / f"epoch{epoch:04d}.ckpt", state)
        if out_dir is not None:
            _save_state(out_dir / "final.ckpt", state)
    finally:
        if csv_file is not None:
            csv_file.close()
    return state


def _csv_row(step, epoch, lr, report, psnr_v, ssim_v):
    return [step, epoch, f"{lr:.10g}", f"{report['total']:.8f}",
            f"{report['mse']:.8f}", f"{report['ssim']:.8f}",
            f"{report['distill_g_enc']:.8f}", f"{report['distill_p_enc']:.8f}",
            f"{report['distill_g_dec']:.8f}", f"{report['distill_p_dec']:.8f}",
            psnr_v, ssim_v]


def _save_state(path, state: TrainState) -> None:
    extra = {"step": np.array([float(state.step)], dtype=np.float32)}
    for name, (m, v) in state.moments.items():
        extra["adam_m." + name] = m
        extra["adam_v." + name] = v
    hypernet.save_checkpoint(path, state.model, extra=extra)


def load_state(path) -> TrainState:
    model, extra = hypernet.load_checkpoint(path)
    step = int(extra.pop("step").data[0]) if "step" in extra else 0
    moments = {}
    for k, t in extra.items():
        if k.startswith("adam_m."):
            name = k[7:]
            moments.setdefault(name, [None, None])[0] = t.data
        elif k.startswith("adam_v."):
            name = k[7:]
            moments.setdefault(name, [None, None])[1] = t.data
    moments = {k: (m, v) for k, (m, v) in moments.items()}
    return TrainState(step=step, model=model, moments=moments)


def config_text(cfg: TrainConfig, model: HuvrModel) -> str:
    lines = [f"train.lr_base={cfg.lr_base}", f"train.batch_size={cfg.batch_size}",
             f"train.epochs={cfg.epochs}", f"train.warmup_epochs={cfg.warmup_epochs}",
             f"train.clip_norm={cfg.clip_norm}", f"train.weight_decay={cfg.weight_decay}",
             f"train.seed={cfg.seed}", f"train.val_fraction={cfg.val_fraction}",
             f"train.augment={cfg.augment}",
             f"loss.use_reconstruction={cfg.loss.use_reconstruction}",
             f"loss.use_ssim={cfg.loss.use_ssim}",
             f"loss.lambda_ssim={cfg.loss.lambda_ssim}",
             f"loss.distill={cfg.loss.distill is not None}"]
    return "\n".join(lines) + "\n" + model.config.to_text()
