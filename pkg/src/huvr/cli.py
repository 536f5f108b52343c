"""Command line entry point: training, evaluation, reconstruction, teacher
file tooling, and the ablation ladder runner.

Configuration is plain key=value text merged as defaults < file < --set
overrides; unknown keys are rejected. Exit codes: 1 config error, 2 data
error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluation, hypernet, trainer
from .autodiff import Tensor
from .data import (DataError, DatasetSpec, FrozenRandomTeacher, TeacherProvider,
                   load_dataset, load_image, normalize, read_teacher_file,
                   save_image, write_teacher_file)
from .hypernet import HuvrConfig, HuvrModel, VARIANTS
from .losses import DistillationConfig, LossConfig
from .trainer import NumericError, TrainConfig

EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

_MODEL_KEYS = ["image_size", "patch_size", "d_vit", "n_enc_blocks", "n_heads",
               "ff_mult", "d_t", "d_dec", "n_dec_blocks", "decoder_attention",
               "variant", "n_weight_tokens", "use_rope", "inr_pos_dim",
               "inr_mlp_layers", "inr_mlp_dim", "inr_stride",
               "inr_modulated_layer", "seed"]

SCHEMA = {}
for _k in _MODEL_KEYS:
    _f = HuvrConfig.__dataclass_fields__[_k]
    SCHEMA["model." + _k] = (_f.type, _f.default)
SCHEMA.update({
    "data.kind": ("str", "synthetic-shapes"),
    "data.resolution": ("int", 32),
    "data.classes": ("int", 8),
    "data.images": ("int", 200),
    "data.seed": ("int", 0),
    "data.root": ("str", ""),
    "train.lr_base": ("float", 0.0005),
    "train.batch_size": ("int", 16),
    "train.epochs": ("int", 10),
    "train.warmup_epochs": ("int", 5),
    "train.clip_norm": ("float", 0.01),
    "train.weight_decay": ("float", 0.05),
    "train.seed": ("int", 0),
    "train.val_fraction": ("float", 0.0),
    "train.augment": ("bool", False),
    "train.checkpoint_every": ("int", 0),
    "loss.reconstruction": ("bool", True),
    "loss.ssim": ("bool", False),
    "loss.lambda_ssim": ("float", 0.1),
    "distill.enabled": ("bool", False),
    "distill.teacher_file": ("str", ""),
    "distill.teacher_dim": ("int", 32),
    "distill.alpha_g_enc": ("float", 2.0),
    "distill.alpha_p_enc": ("float", 2.0),
    "distill.alpha_g_dec": ("float", 0.5),
    "distill.alpha_p_dec": ("float", 0.5),
    "distill.frozen_random_seed": ("int", 0),
    "ablation.variants": ("str", ",".join(VARIANTS)),
    "eval.d_t": ("int", 0),  # 0: model's d_t
    "probe.epochs": ("int", 100),
    "probe.train_fraction": ("float", 0.8),
})


class ConfigError(ValueError):
    pass


def _coerce(key: str, value: str):
    typ = SCHEMA[key][0]
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
        if typ == "bool":
            if value.strip().lower() in ("true", "1", "yes"):
                return True
            if value.strip().lower() in ("false", "0", "no"):
                return False
            raise ValueError(value)
        return value.strip()
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {value!r}") from e


def build_run_config(config_path=None, overrides=(), seed=None) -> dict:
    cfg = {k: v for k, (_, v) in SCHEMA.items()}
    if config_path:
        p = Path(config_path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        for ln, line in enumerate(p.read_text().splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, sep, v = line.partition("=")
            k = k.strip()
            if not sep or k not in SCHEMA:
                raise ConfigError(f"{p}:{ln}: unknown config key {k!r}")
            cfg[k] = _coerce(k, v)
    for item in overrides:
        k, sep, v = item.partition("=")
        if not sep or k not in SCHEMA:
            raise ConfigError(f"unknown override key {k!r}")
        cfg[k] = _coerce(k, v)
    if seed is not None:
        cfg["model.seed"] = cfg["train.seed"] = cfg["data.seed"] = seed
    return cfg


def config_to_text(cfg: dict) -> str:
    return "".join(f"{k}={cfg[k]}\n" for k in sorted(cfg))


def model_config(cfg: dict) -> HuvrConfig:
    kwargs = {k: cfg["model." + k] for k in _MODEL_KEYS}
    kwargs["distill_enabled"] = cfg["distill.enabled"]
    kwargs["teacher_dim"] = cfg["distill.teacher_dim"]
    return HuvrConfig(**kwargs)


def dataset_spec(cfg: dict) -> DatasetSpec:
    return DatasetSpec(kind=cfg["data.kind"], resolution=cfg["data.resolution"],
                       n_classes=cfg["data.classes"], n_images=cfg["data.images"],
                       seed=cfg["data.seed"], root=cfg["data.root"] or None)


def train_config(cfg: dict) -> TrainConfig:
    distill = None
    if cfg["distill.enabled"]:
        distill = DistillationConfig(
            alphas={"g_enc": cfg["distill.alpha_g_enc"],
                    "p_enc": cfg["distill.alpha_p_enc"],
                    "g_dec": cfg["distill.alpha_g_dec"],
                    "p_dec": cfg["distill.alpha_p_dec"]},
            teacher_dim=cfg["distill.teacher_dim"])
    loss = LossConfig(use_reconstruction=cfg["loss.reconstruction"],
                      use_ssim=cfg["loss.ssim"],
                      lambda_ssim=cfg["loss.lambda_ssim"], distill=distill)
    return TrainConfig(lr_base=cfg["train.lr_base"], batch_size=cfg["train.batch_size"],
                       epochs=cfg["train.epochs"], warmup_epochs=cfg["train.warmup_epochs"],
                       clip_norm=cfg["train.clip_norm"],
                       weight_decay=cfg["train.weight_decay"], seed=cfg["train.seed"],
                       loss=loss, val_fraction=cfg["train.val_fraction"],
                       augment=cfg["train.augment"],
                       checkpoint_every_epochs=cfg["train.checkpoint_every"])


def make_teacher(cfg: dict, model_cfg: HuvrConfig, dataset):
    if not cfg["distill.enabled"]:
        return None
    if cfg["distill.teacher_file"]:
        return TeacherProvider.from_file(cfg["distill.teacher_file"])
    ft = FrozenRandomTeacher(cfg["distill.frozen_random_seed"],
                             model_cfg.patch_size, cfg["distill.teacher_dim"])
    return TeacherProvider(ft.export(dataset.images), cfg["distill.teacher_dim"])


def _limit_threads(n):
    if n is None:
        n = os.environ.get("HUVR_THREADS")
    if n is None:
        return
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(limits=int(n))
    except ImportError:
        pass


# ---------------------------------------------------------------------------
# subcommands

def cmd_train(args) -> int:
    cfg = build_run_config(args.config, args.set or [], args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mc = model_config(cfg)
    dataset = load_dataset(dataset_spec(cfg))
    model = HuvrModel(mc)
    teacher = make_teacher(cfg, mc, dataset)
    tc = train_config(cfg)
    (out / "config.txt").write_text(config_to_text(cfg))
    trainer.train(model, dataset, teacher, tc, out_dir=out, log=print)
    print(f"done: {out / 'final.ckpt'}")
    return 0


def cmd_reconstruct(args) -> int:
    model, _ = hypernet.load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for path in args.images:
        img = load_image(path)
        if img.pixels.shape[1:] != (model.config.image_size, model.config.image_size):
            print(f"error: {path} is {img.pixels.shape[1:]}, model expects "
                  f"{model.config.image_size}", file=sys.stderr)
            return EXIT_CONFIG
        recon, _ = model.forward(Tensor(normalize(img.pixels[None])))
        rec = recon.data[0]
        name = Path(path).stem + "_recon.png"
        save_image(out / name, rec)
        from .losses import ssim as ssim_fn
        rows.append([Path(path).name, f"{evaluation.psnr(rec, img.pixels):.4f}",
                     f"{ssim_fn(Tensor(rec), Tensor(img.pixels)).item():.6f}"])
    with open(out / "reconstruction.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["image", "psnr", "ssim"])
        w.writerows(rows)
    for r in rows:
        print(f"{r[0]}: psnr={r[1]} ssim={r[2]}")
    return 0


def cmd_eval(args) -> int:
    cfg = build_run_config(args.config, args.set or [], args.seed)
    model, _ = hypernet.load_checkpoint(args.checkpoint)
    dataset = load_dataset(dataset_spec(cfg))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    d_t = cfg["eval.d_t"] or model.config.d_t
    rng = np.random.default_rng(cfg["data.seed"])
    n = len(dataset.images)
    split = np.zeros(n, dtype=bool)
    split[rng.permutation(n)[:int(cfg["probe.train_fraction"] * n)]] = True
    pc = evaluation.ProbeConfig(epochs=cfg["probe.epochs"], seed=cfg["train.seed"])

    if args.task == "recon":
        idx = np.arange(n)
        p, s = trainer.evaluate_reconstruction(model, dataset, idx)
        _write_csv(out / "recon.csv", ["n_images", "psnr", "ssim"],
                   [[n, f"{p:.4f}", f"{s:.6f}"]])
        print(f"recon: psnr={p:.2f} ssim={s:.4f}")
        return 0

    if args.task == "probe":
        rows = []
        for source in ("encoder", "tintok"):
            try:
                feats = evaluation.extract_features(model, dataset, source)
            except ValueError as e:
                print(f"skip {source}: {e}")
                continue
            res = evaluation.linear_probe(feats, dataset.labels, split, pc, source)
            rows.append([res.source, feats.shape[1], f"{res.accuracy:.4f}",
                         res.n_classes, res.n_train, res.n_val])
            print(f"probe[{source}] d={feats.shape[1]} acc={res.accuracy:.4f}")
        _write_csv(out / "probe.csv",
                   ["source", "dim", "accuracy", "classes", "train", "val"], rows)
        return 0

    if args.task == "pca-baseline":
        feats = evaluation.extract_features(model, dataset, "encoder")
        if d_t > feats.shape[1]:
            print(f"error: d_t={d_t} exceeds feature dim {feats.shape[1]}",
                  file=sys.stderr)
            return EXIT_CONFIG
        pca = evaluation.fit_pca(feats[split].astype(np.float64), d_t)
        z = pca.apply(feats.astype(np.float64))
        res = evaluation.linear_probe(z, dataset.labels, split, pc, "pca-of-encoder")
        _write_csv(out / "probe.csv",
                   ["source", "dim", "accuracy", "classes", "train", "val"],
                   [[res.source, d_t, f"{res.accuracy:.4f}", res.n_classes,
                     res.n_train, res.n_val]])
        print(f"probe[pca-of-encoder] d={d_t} acc={res.accuracy:.4f}")
        return 0

    print(f"unknown task {args.task}", file=sys.stderr)
    return EXIT_CONFIG


def cmd_ablation(args) -> int:
    cfg = build_run_config(args.config, args.set or [], args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(dataset_spec(cfg))
    variants = [v.strip() for v in cfg["ablation.variants"].split(",") if v.strip()]
    rows, checks = evaluation.run_ablation_ladder(
        dataset, model_config(cfg), train_config(cfg), variants=variants,
        out_dir=out, log=print)
    _write_csv(out / "ladder.csv", ["variant", "params", "psnr", "ssim"],
               [[r.variant, r.n_params, f"{r.psnr:.4f}", f"{r.ssim:.6f}"] for r in rows])
    lines = []
    print(f"{'variant':24s} {'params':>9s} {'psnr':>7s} {'ssim':>7s}")
    for r in rows:
        print(f"{r.variant:24s} {r.n_params:9d} {r.psnr:7.2f} {r.ssim:7.4f}")
    for c in checks:
        status = "PASS" if c["passed"] else "FAIL"
        line = f"{status}: {c['check']} ({c['lhs']:.2f} vs {c['rhs']:.2f})"
        print(line)
        lines.append(line)
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    return 0


def cmd_teacher(args) -> int:
    if args.teacher_cmd == "inspect":
        from .data import TeacherFormatError
        try:
            records, P, dim = read_teacher_file(args.file)
        except (TeacherFormatError, OSError) as e:
            print(f"format error: {e}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"magic=HUVRTEAC version=1 images={len(records)} "
              f"patches={P} teacher_dim={dim}")
        return 0
    # synth
    cfg = build_run_config(args.config, args.set or [], args.seed)
    dataset = load_dataset(dataset_spec(cfg))
    mc = model_config(cfg)
    ft = FrozenRandomTeacher(cfg["distill.frozen_random_seed"], mc.patch_size,
                             cfg["distill.teacher_dim"])
    records = ft.export(dataset.images)
    P = mc.n_patches
    write_teacher_file(args.file, records, P, cfg["distill.teacher_dim"])
    print(f"wrote {len(records)} records to {args.file}")
    return 0


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------

def _common(sub):
    sub.add_argument("--config", default=None)
    sub.add_argument("--set", action="append", metavar="K=V")
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--out", default="out")
    sub.add_argument("--threads", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="huvr")
    sp = ap.add_subparsers(dest="cmd", required=True)

    t = sp.add_parser("train", help="train a model")
    _common(t)
    t.set_defaults(fn=cmd_train)

    r = sp.add_parser("reconstruct", help="reconstruct images through a checkpoint")
    r.add_argument("checkpoint")
    r.add_argument("images", nargs="+")
    _common(r)
    r.set_defaults(fn=cmd_reconstruct)

    e = sp.add_parser("eval", help="probe / reconstruction / PCA-baseline evaluation")
    e.add_argument("checkpoint")
    e.add_argument("task", choices=["probe", "recon", "pca-baseline"])
    _common(e)
    e.set_defaults(fn=cmd_eval)

    a = sp.add_parser("ablation", help="run the design ablation ladder")
    _common(a)
    a.set_defaults(fn=cmd_ablation)

    te = sp.add_parser("teacher", help="teacher feature file tooling")
    tsp = te.add_subparsers(dest="teacher_cmd", required=True)
    ti = tsp.add_parser("inspect")
    ti.add_argument("file")
    _common(ti)
    ti.set_defaults(fn=cmd_teacher)
    ts = tsp.add_parser("synth")
    ts.add_argument("file")
    _common(ts)
    ts.set_defaults(fn=cmd_teacher)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _limit_threads(getattr(args, "threads", None))
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
