"""Exporter unit tests: determinism, format validity, error paths."""

import numpy as np
import pytest
from PIL import Image

from teacher_export.cli import main
from teacher_export.encoder import (FrozenLocalEncoder, ModelUnavailableError,
                                    load_model)
from teacher_export.exporter import ExportDataError, export_features
from teacher_export.teacherfile import (TeacherFileError, content_id,
                                        read_teacher_file, write_teacher_file)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def _image_dir(tmp_path, rng, n=10, res=32):
    d = tmp_path / "imgs"
    d.mkdir()
    for i in range(n):
        rgb = rng.integers(0, 256, size=(res, res, 3), dtype=np.uint8)
        Image.fromarray(rgb).save(d / f"{i:03d}.png")
    return d


def test_load_model_ids():
    enc = load_model("local-frozen-3", 8, 16)
    assert isinstance(enc, FrozenLocalEncoder)
    assert enc.seed == 3
    with pytest.raises(ModelUnavailableError):
        load_model("dino-vits16", 8, 16)
    with pytest.raises(ModelUnavailableError):
        load_model("something-else", 8, 16)


def test_encoder_deterministic(rng):
    pixels = rng.random((3, 32, 32)).astype(np.float32)
    a = FrozenLocalEncoder(0, 8, 16)
    b = FrozenLocalEncoder(0, 8, 16)
    ga, pa = a.forward(pixels)
    gb, pb = b.forward(pixels)
    np.testing.assert_array_equal(ga, gb)
    np.testing.assert_array_equal(pa, pb)
    assert ga.shape == (16,) and pa.shape == (16, 16)


def test_encoder_seed_sensitivity(rng):
    pixels = rng.random((3, 32, 32)).astype(np.float32)
    g0, _ = FrozenLocalEncoder(0, 8, 16).forward(pixels)
    g1, _ = FrozenLocalEncoder(1, 8, 16).forward(pixels)
    assert not np.allclose(g0, g1)


def test_export_header_and_manifest(tmp_path, rng):
    d = _image_dir(tmp_path, rng, n=10)
    model = load_model("local-frozen-0", 8, 32)
    out = tmp_path / "t.teach"
    manifest = export_features(d, model, "local-frozen-0", out, 32)
    records, P, dim = read_teacher_file(out)
    assert (len(records), P, dim) == (10, 16, 32)
    assert set(records) == set(manifest.images)
    text = (tmp_path / "t.teach.manifest").read_text()
    assert "model=local-frozen-0" in text
    assert "count=10" in text


def test_reexport_bitwise_identical(tmp_path, rng):
    d = _image_dir(tmp_path, rng, n=4)
    model = load_model("local-frozen-0", 8, 16)
    export_features(d, model, "local-frozen-0", tmp_path / "a.teach", 32)
    export_features(d, model, "local-frozen-0", tmp_path / "b.teach", 32)
    assert (tmp_path / "a.teach").read_bytes() == (tmp_path / "b.teach").read_bytes()


def test_content_id_path_independent(tmp_path, rng):
    rgb = rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
    d1 = tmp_path / "a"; d1.mkdir()
    d2 = tmp_path / "b"; d2.mkdir()
    Image.fromarray(rgb).save(d1 / "x.png")
    Image.fromarray(rgb).save(d2 / "renamed.png")
    model = load_model("local-frozen-0", 8, 8)
    m1 = export_features(d1, model, "local-frozen-0", tmp_path / "1.teach", 16)
    m2 = export_features(d2, model, "local-frozen-0", tmp_path / "2.teach", 16)
    assert set(m1.images) == set(m2.images) == {content_id(rgb)}


def test_export_missing_dir(tmp_path):
    model = load_model("local-frozen-0", 8, 8)
    with pytest.raises(ExportDataError):
        export_features(tmp_path / "nope", model, "local-frozen-0",
                        tmp_path / "t.teach", 16)


def test_export_empty_dir(tmp_path):
    (tmp_path / "empty").mkdir()
    model = load_model("local-frozen-0", 8, 8)
    with pytest.raises(ExportDataError):
        export_features(tmp_path / "empty", model, "local-frozen-0",
                        tmp_path / "t.teach", 16)


def test_export_bad_resolution(tmp_path, rng):
    d = _image_dir(tmp_path, rng, n=1)
    model = load_model("local-frozen-0", 8, 8)
    with pytest.raises(TeacherFileError):
        export_features(d, model, "local-frozen-0", tmp_path / "t.teach", 20)


def test_file_round_trip(tmp_path, rng):
    recs = {}
    for _ in range(3):
        rgb = rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
        recs[content_id(rgb)] = (rng.normal(size=8).astype(np.float32),
                                 rng.normal(size=(4, 8)).astype(np.float32))
    write_teacher_file(tmp_path / "t.teach", recs, 4, 8)
    back, P, dim = read_teacher_file(tmp_path / "t.teach")
    assert (P, dim) == (4, 8)
    for k, (g, p) in recs.items():
        np.testing.assert_array_equal(back[k][0], g)
        np.testing.assert_array_equal(back[k][1], p)


def test_cli_export_and_errors(tmp_path, rng, capsys):
    d = _image_dir(tmp_path, rng, n=3)
    out = tmp_path / "t.teach"
    rc = main(["export", "--images", str(d), "--model", "local-frozen-0",
               "--out", str(out), "--resolution", "32", "--patch-size", "8",
               "--dim", "16"])
    assert rc == 0
    assert out.exists()
    assert "3 records" in capsys.readouterr().out
    assert main(["export", "--images", str(d), "--model", "dino-vits16",
                 "--out", str(out)]) == 1
    assert main(["export", "--images", str(tmp_path / "nope"),
                 "--model", "local-frozen-0", "--out", str(out)]) == 2
