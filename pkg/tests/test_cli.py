"""Command line behavior: config merging, exit codes, artifacts."""

import numpy as np
import pytest

from huvr.cli import ConfigError, build_run_config, config_to_text, main
from huvr.data import save_image

TINY = ["--set", "model.image_size=16", "--set", "model.patch_size=8",
        "--set", "model.d_vit=16", "--set", "model.n_enc_blocks=1",
        "--set", "model.n_heads=2", "--set", "model.d_t=8",
        "--set", "model.d_dec=16", "--set", "model.n_dec_blocks=1",
        "--set", "model.inr_pos_dim=8", "--set", "model.inr_mlp_dim=16",
        "--set", "data.resolution=16", "--set", "data.images=8",
        "--set", "data.classes=4", "--set", "train.epochs=1",
        "--set", "train.batch_size=4"]


# ---------------------------------------------------------------------------
# config merging

def test_defaults_then_file_then_set(tmp_path):
    cfgf = tmp_path / "c.txt"
    cfgf.write_text("# comment\ntrain.epochs=7\nmodel.d_t=12\n")
    cfg = build_run_config(cfgf, ["train.epochs=9"])
    assert cfg["train.epochs"] == 9       # --set beats file
    assert cfg["model.d_t"] == 12         # file beats default
    assert cfg["train.batch_size"] == 16  # untouched default


def test_seed_flag_overrides_all_seeds(tmp_path):
    cfg = build_run_config(None, ["train.seed=5"], seed=11)
    assert cfg["train.seed"] == cfg["model.seed"] == cfg["data.seed"] == 11


def test_unknown_key_rejected(tmp_path):
    with pytest.raises(ConfigError):
        build_run_config(None, ["bogus.key=1"])
    cfgf = tmp_path / "c.txt"
    cfgf.write_text("nope=2\n")
    with pytest.raises(ConfigError):
        build_run_config(cfgf)


def test_bad_value_rejected():
    with pytest.raises(ConfigError):
        build_run_config(None, ["train.epochs=three"])
    with pytest.raises(ConfigError):
        build_run_config(None, ["train.augment=maybe"])


def test_config_text_round_trip(tmp_path):
    cfg = build_run_config(None, ["model.d_t=4", "loss.ssim=true"])
    cfgf = tmp_path / "c.txt"
    cfgf.write_text(config_to_text(cfg))
    assert build_run_config(cfgf) == cfg


# ---------------------------------------------------------------------------
# exit codes through main()

def test_missing_config_file_exit_1(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.txt"),
                 "--out", str(tmp_path / "o")]) == 1


def test_unknown_override_exit_1(tmp_path):
    assert main(["train", "--set", "zzz=1", "--out", str(tmp_path / "o")]) == 1


def test_missing_data_dir_exit_2(tmp_path):
    args = ["train", *TINY, "--set", "data.kind=image-directory",
            "--set", f"data.root={tmp_path / 'missing'}",
            "--out", str(tmp_path / "o")]
    assert main(args) == 2


def test_teacher_inspect_bad_file_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.teach"
    bad.write_bytes(b"WRONGMAG" + b"\x00" * 24)
    assert main(["teacher", "inspect", str(bad)]) == 1
    assert "format error" in capsys.readouterr().err


def test_teacher_inspect_truncated_exit_1(tmp_path, capsys):
    teach = tmp_path / "t.teach"
    assert main(["teacher", "synth", str(teach), *TINY]) == 0
    (tmp_path / "trunc.teach").write_bytes(teach.read_bytes()[:-5])
    assert main(["teacher", "inspect", str(tmp_path / "trunc.teach")]) == 1
    assert "record count mismatch" in capsys.readouterr().err


def test_teacher_synth_inspect_round_trip(tmp_path, capsys):
    teach = tmp_path / "t.teach"
    assert main(["teacher", "synth", str(teach), *TINY]) == 0
    capsys.readouterr()
    assert main(["teacher", "inspect", str(teach)]) == 0
    out = capsys.readouterr().out
    assert "images=8" in out and "teacher_dim=32" in out


# ---------------------------------------------------------------------------
# train / reconstruct / eval artifacts

def _train(tmp_path, name, extra=()):
    out = tmp_path / name
    assert main(["train", *TINY, *extra, "--out", str(out)]) == 0
    return out


def test_train_writes_artifacts(tmp_path):
    out = _train(tmp_path, "run")
    for f in ("config.txt", "run_config.txt", "metrics.csv", "final.ckpt"):
        assert (out / f).exists()


def test_train_seed_determinism(tmp_path):
    a = _train(tmp_path, "a", ["--seed", "7"])
    b = _train(tmp_path, "b", ["--seed", "7"])
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()


def test_reconstruct_outputs(tmp_path, rng):
    out = _train(tmp_path, "run")
    imgs = []
    for i in range(2):
        p = tmp_path / f"img{i}.png"
        save_image(p, rng.random((3, 16, 16)).astype(np.float32))
        imgs.append(str(p))
    rout = tmp_path / "recon"
    assert main(["reconstruct", str(out / "final.ckpt"), *imgs,
                 "--out", str(rout)]) == 0
    assert (rout / "img0_recon.png").exists()
    assert (rout / "img1_recon.png").exists()
    lines = (rout / "reconstruction.csv").read_text().splitlines()
    assert lines[0] == "image,psnr,ssim"
    assert len(lines) == 3


def test_reconstruct_size_mismatch_exit_1(tmp_path, rng):
    out = _train(tmp_path, "run")
    p = tmp_path / "big.png"
    save_image(p, rng.random((3, 32, 32)).astype(np.float32))
    assert main(["reconstruct", str(out / "final.ckpt"), str(p),
                 "--out", str(tmp_path / "r")]) == 1


def test_eval_probe_and_recon(tmp_path):
    out = _train(tmp_path, "run")
    eo = tmp_path / "eval"
    assert main(["eval", str(out / "final.ckpt"), "probe", *TINY,
                 "--set", "probe.epochs=5", "--out", str(eo)]) == 0
    lines = (eo / "probe.csv").read_text().splitlines()
    assert lines[0] == "source,dim,accuracy,classes,train,val"
    assert len(lines) >= 2
    assert main(["eval", str(out / "final.ckpt"), "recon", *TINY,
                 "--out", str(eo)]) == 0
    assert (eo / "recon.csv").exists()


def test_eval_pca_dt_too_large_exit_1(tmp_path):
    out = _train(tmp_path, "run")
    assert main(["eval", str(out / "final.ckpt"), "pca-baseline", *TINY,
                 "--set", "eval.d_t=999", "--out", str(tmp_path / "e")]) == 1
