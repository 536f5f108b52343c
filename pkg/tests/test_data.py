"""Image I/O, synthetic dataset, augmentation, and teacher file checks."""

import math

import numpy as np
import pytest

from huvr.data import (DataError, DatasetSpec, FrozenRandomTeacher, ImageTensor,
                       TeacherFeatures, TeacherFormatError, TeacherProvider,
                       content_id, denormalize, from_uint8, load_dataset,
                       load_image, load_image_directory, normalize, patchify,
                       random_resized_crop, read_teacher_file, save_image,
                       synth_shapes, to_uint8, unpatchify, write_teacher_file)


# ---------------------------------------------------------------------------
# image I/O

def test_load_white_png(tmp_path):
    from PIL import Image
    p = tmp_path / "w.png"
    Image.fromarray(np.full((1, 1, 3), 255, dtype=np.uint8)).save(p)
    img = load_image(p)
    np.testing.assert_array_equal(img.pixels, np.ones((3, 1, 1)))


def test_load_ppm_scaling(tmp_path):
    p = tmp_path / "g.ppm"
    p.write_bytes(b"P6\n1 1\n255\n" + bytes([128, 128, 128]))
    img = load_image(p)
    np.testing.assert_allclose(img.pixels, np.full((3, 1, 1), 128 / 255), rtol=1e-6)


def test_save_load_round_trip_within_quantization(tmp_path, rng):
    pixels = rng.random((3, 8, 8)).astype(np.float32)
    for name in ("a.png", "a.ppm"):
        save_image(tmp_path / name, pixels)
        back = load_image(tmp_path / name)
        assert np.abs(back.pixels - pixels).max() <= 0.5 / 255 + 1e-6


def test_png_ppm_identical_content_id(tmp_path, rng):
    pixels = rng.random((3, 8, 8)).astype(np.float32)
    save_image(tmp_path / "a.png", pixels)
    save_image(tmp_path / "a.ppm", pixels)
    assert load_image(tmp_path / "a.png").id == load_image(tmp_path / "a.ppm").id


def test_load_unsupported_format(tmp_path, rng):
    from PIL import Image
    p = tmp_path / "x.bmp"
    Image.fromarray(np.zeros((2, 2, 3), dtype=np.uint8)).save(p)
    with pytest.raises(DataError):
        load_image(p)


def test_load_corrupt_file(tmp_path):
    p = tmp_path / "bad.png"
    p.write_bytes(b"\x89PNG\r\n\x1a\n garbage")
    with pytest.raises(DataError):
        load_image(p)


def test_load_missing_file(tmp_path):
    with pytest.raises(DataError):
        load_image(tmp_path / "nope.png")


def test_content_id_is_pixel_hash(rng):
    rgb = rng.integers(0, 256, size=(4, 4, 3), dtype=np.uint8)
    assert content_id(rgb) == content_id(rgb.copy())
    rgb2 = rgb.copy()
    rgb2[0, 0, 0] ^= 1
    assert content_id(rgb) != content_id(rgb2)


# ---------------------------------------------------------------------------
# normalize / patchify

def test_normalize_values():
    x = np.array([0.0, 0.5, 1.0], dtype=np.float32)
    np.testing.assert_array_equal(normalize(x), [-1.0, 0.0, 1.0])


def test_denormalize_inverse(rng):
    x = rng.random((3, 4, 4)).astype(np.float32)
    np.testing.assert_allclose(denormalize(normalize(x)), x, atol=1e-7)


def test_patchify_whole_image_single_patch(rng):
    img = rng.random((3, 4, 4)).astype(np.float32)
    patches = patchify(img, 4)
    assert patches.shape == (1, 3, 4, 4)
    np.testing.assert_array_equal(patches[0], img)


def test_patchify_unpatchify_round_trip(rng):
    img = rng.random((3, 8, 12)).astype(np.float32)
    patches = patchify(img, 4)
    assert patches.shape == (6, 3, 4, 4)
    np.testing.assert_array_equal(unpatchify(patches, (2, 3)), img)


def test_patchify_indivisible():
    with pytest.raises(DataError):
        patchify(np.zeros((3, 5, 5), dtype=np.float32), 2)


# ---------------------------------------------------------------------------
# random resized crop

def test_rrc_deterministic(rng):
    img = ImageTensor(rng.random((3, 32, 32)).astype(np.float32), "x")
    a = random_resized_crop(img, 16, np.random.default_rng(5))
    b = random_resized_crop(img, 16, np.random.default_rng(5))
    np.testing.assert_array_equal(a.pixels, b.pixels)
    assert a.pixels.shape == (3, 16, 16)


def test_rrc_full_area_is_resize(rng):
    img = ImageTensor(rng.random((3, 16, 16)).astype(np.float32), "x")

    class FullRng:
        def uniform(self, lo, hi):
            return hi if hi == 1.0 else 0.0  # ratio 1, log-aspect 0

        def integers(self, lo, hi):
            return lo

    out = random_resized_crop(img, 16, FullRng())
    np.testing.assert_allclose(out.pixels, img.pixels, atol=1e-5)


def test_rrc_area_ratio_distribution_uniform():
    """KS statistic of the sampled area ratios against U[0.2, 1].

    Ratios are recorded at the sampling site (a spy generator) because crops
    rejected at the image boundary censor the accepted distribution.
    """

    class SpyRng:
        def __init__(self, seed):
            self.g = np.random.default_rng(seed)
            self.ratios = []

        def uniform(self, lo, hi):
            v = self.g.uniform(lo, hi)
            if (lo, hi) == (0.2, 1.0):
                self.ratios.append(v)
            return v

        def integers(self, lo, hi):
            return self.g.integers(lo, hi)

    img = ImageTensor(np.zeros((3, 64, 64), dtype=np.float32), "x")
    spy = SpyRng(11)
    for _ in range(2000):
        random_resized_crop(img, 16, spy)
    x = np.sort((np.array(spy.ratios) - 0.2) / 0.8)
    n = len(x)
    assert n >= 2000
    ecdf_hi = np.arange(1, n + 1) / n
    ecdf_lo = np.arange(0, n) / n
    ks = max(np.abs(ecdf_hi - x).max(), np.abs(x - ecdf_lo).max())
    # 1% critical value for the one-sample KS test
    assert ks < 1.63 / math.sqrt(n)


# ---------------------------------------------------------------------------
# synthetic shapes

def test_synth_shapes_deterministic():
    a = synth_shapes(DatasetSpec(n_images=12, seed=4))
    b = synth_shapes(DatasetSpec(n_images=12, seed=4))
    for x, y in zip(a.images, b.images):
        np.testing.assert_array_equal(x.pixels, y.pixels)
        assert x.id == y.id
    np.testing.assert_array_equal(a.labels, b.labels)


def test_synth_shapes_balanced():
    ds = synth_shapes(DatasetSpec(n_images=50, n_classes=8, seed=0))
    counts = np.bincount(ds.labels, minlength=8)
    assert counts.max() - counts.min() <= 1


def test_synth_shapes_class_cap():
    with pytest.raises(DataError):
        DatasetSpec(n_classes=17)


def test_synth_shapes_pixel_probe_above_chance():
    from huvr.evaluation import ProbeConfig, linear_probe
    ds = synth_shapes(DatasetSpec(n_images=160, n_classes=4, resolution=16, seed=1))
    feats = np.stack([im.pixels.reshape(-1) for im in ds.images])
    split = np.zeros(len(feats), dtype=bool)
    split[: int(0.8 * len(feats))] = True
    res = linear_probe(feats, ds.labels, split, ProbeConfig(epochs=40))
    assert res.accuracy > 1.5 / 4


def test_image_directory_layout(tmp_path, rng):
    for cname in ("cat", "dog"):
        (tmp_path / cname).mkdir()
        for i in range(2):
            save_image(tmp_path / cname / f"{i}.png",
                       rng.random((3, 8, 8)).astype(np.float32))
    ds = load_image_directory(tmp_path)
    assert len(ds.images) == 4
    np.testing.assert_array_equal(ds.labels, [0, 0, 1, 1])
    with pytest.raises(DataError):
        load_image_directory(tmp_path / "missing")


# ---------------------------------------------------------------------------
# teacher files

def _records(rng, n, P=4, dim=8):
    recs = {}
    for _ in range(n):
        rgb = rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
        img_id = content_id(rgb)
        recs[img_id] = TeacherFeatures(
            rng.normal(size=dim).astype(np.float32),
            rng.normal(size=(P, dim)).astype(np.float32), img_id)
    return recs


def test_teacher_file_round_trip_bitwise(tmp_path, rng):
    recs = _records(rng, 5)
    path = tmp_path / "t.teach"
    write_teacher_file(path, recs, 4, 8)
    back, P, dim = read_teacher_file(path)
    assert (P, dim) == (4, 8)
    assert set(back) == set(recs)
    for k in recs:
        np.testing.assert_array_equal(back[k].global_feat, recs[k].global_feat)
        np.testing.assert_array_equal(back[k].patch_feats, recs[k].patch_feats)
    # re-writing the loaded records is byte identical
    path2 = tmp_path / "t2.teach"
    write_teacher_file(path2, back, 4, 8)
    assert path.read_bytes() == path2.read_bytes()


def test_teacher_file_truncated(tmp_path, rng):
    path = tmp_path / "t.teach"
    write_teacher_file(path, _records(rng, 3), 4, 8)
    data = path.read_bytes()
    (tmp_path / "bad.teach").write_bytes(data[:-7])
    with pytest.raises(TeacherFormatError, match="record count mismatch"):
        read_teacher_file(tmp_path / "bad.teach")


def test_teacher_file_bad_magic(tmp_path):
    p = tmp_path / "x.teach"
    p.write_bytes(b"WRONGMAG" + b"\x00" * 16)
    with pytest.raises(TeacherFormatError):
        read_teacher_file(p)


def test_teacher_file_dim_validation(tmp_path, rng):
    recs = _records(rng, 2, P=4, dim=8)
    with pytest.raises(TeacherFormatError):
        write_teacher_file(tmp_path / "t.teach", recs, 4, 16)


def test_frozen_random_teacher_deterministic(rng):
    ds = synth_shapes(DatasetSpec(n_images=3, seed=2))
    t1 = FrozenRandomTeacher(7, patch_size=8, teacher_dim=16)
    t2 = FrozenRandomTeacher(7, patch_size=8, teacher_dim=16)
    for img in ds.images:
        a, b = t1.features(img), t2.features(img)
        np.testing.assert_array_equal(a.global_feat, b.global_feat)
        np.testing.assert_array_equal(a.patch_feats, b.patch_feats)
    assert t1.features(ds.images[0]).patch_feats.shape == (16, 16)


def test_teacher_provider_lookup_and_missing(rng):
    ds = synth_shapes(DatasetSpec(n_images=4, seed=2))
    teacher = FrozenRandomTeacher(0, 8, 8)
    provider = TeacherProvider(teacher.export(ds.images[:3]), 8)
    g, p = provider.batch(ds.images[:3])
    assert g.shape == (3, 8) and p.shape == (3, 16, 8)
    with pytest.raises(DataError):
        provider.batch([ds.images[3]])
