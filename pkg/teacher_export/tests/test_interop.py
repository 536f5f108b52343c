"""Cross-component round trip with the primary package."""

import csv

import numpy as np
import pytest

from huvr.data import (DatasetSpec, TeacherProvider, read_teacher_file,
                       save_image, synth_shapes)
from huvr.hypernet import HuvrConfig, HuvrModel
from huvr.losses import DistillationConfig, LossConfig
from huvr.trainer import TrainConfig, train

from teacher_export.encoder import load_model
from teacher_export.exporter import export_features


def test_B1_exporter_interop(tmp_path):
    """The emitted TeacherFile loads in the primary reader, dims validate,
    and a short distillation run decreases all four loss terms."""
    ds = synth_shapes(DatasetSpec(resolution=32, n_images=10, n_classes=4,
                                  seed=0))
    img_dir = tmp_path / "imgs"
    img_dir.mkdir()
    for i, img in enumerate(ds.images):
        save_image(img_dir / f"{i:02d}.png", img.pixels)

    model_t = load_model("local-frozen-0", 8, 16)
    teach_path = tmp_path / "t.teach"
    export_features(img_dir, model_t, "local-frozen-0", teach_path, 32)

    records, P, dim = read_teacher_file(teach_path)
    assert len(records) == 10
    assert (P, dim) == (16, 16)
    # content ids line up with the primary's hashing of the same pixels
    assert set(records) == {img.id for img in ds.images}

    cfg = HuvrConfig(image_size=32, patch_size=8, d_vit=32, n_enc_blocks=2,
                     n_heads=4, d_t=16, d_dec=32, n_dec_blocks=1,
                     variant="plus_decoder", distill_enabled=True,
                     teacher_dim=16, seed=0)
    model = HuvrModel(cfg)
    teacher = TeacherProvider.from_file(teach_path)
    loss = LossConfig(use_reconstruction=True,
                      distill=DistillationConfig(teacher_dim=16))
    tc = TrainConfig(lr_base=0.048, batch_size=5, epochs=15, clip_norm=1.0,
                     weight_decay=0.0, seed=0, loss=loss)
    train(model, ds, teacher, tc, out_dir=tmp_path / "run")

    with open(tmp_path / "run" / "metrics.csv") as f:
        rows = [r for r in csv.DictReader(f) if r["psnr_val"] == ""]
    terms = ["loss_distill_g_enc", "loss_distill_p_enc",
             "loss_distill_g_dec", "loss_distill_p_dec"]
    for term in terms:
        first = np.mean([float(r[term]) for r in rows[:4]])
        last = np.mean([float(r[term]) for r in rows[-4:]])
        assert last < first, f"{term} did not decrease: {first} -> {last}"
