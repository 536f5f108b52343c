"""Scikit-learn facade checks: params, cloning, fit/transform shapes."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from huvr.estimator import HuvrEncoder, TinyTokenPca


def _images(rng, n=8, res=16):
    return rng.random((n, 3, res, res)).astype(np.float32)


def _tiny_encoder(**kw):
    base = dict(image_size=16, patch_size=8, d_vit=16, n_enc_blocks=1,
                n_heads=2, d_t=8, d_dec=16, n_dec_blocks=1,
                variant="plus_decoder", epochs=1, batch_size=4, seed=0)
    base.update(kw)
    return HuvrEncoder(**base)


def test_get_set_params_round_trip():
    enc = _tiny_encoder()
    params = enc.get_params()
    assert params["d_t"] == 8
    assert params["variant"] == "plus_decoder"
    enc.set_params(d_t=4, epochs=3)
    assert enc.d_t == 4 and enc.epochs == 3


def test_clone_preserves_params():
    enc = _tiny_encoder(d_vit=16, seed=7)
    dup = clone(enc)
    assert dup.get_params() == enc.get_params()
    assert dup is not enc


def test_transform_before_fit_raises(rng):
    enc = _tiny_encoder()
    with pytest.raises(NotFittedError):
        enc.transform(_images(rng))
    with pytest.raises(NotFittedError):
        enc.reconstruct(_images(rng))


def test_fit_transform_shapes(rng):
    enc = _tiny_encoder()
    X = _images(rng)
    Z = enc.fit(X).transform(X)
    assert Z.shape == (8, 8)
    assert np.all(np.isfinite(Z))


def test_transform_feature_sources(rng):
    X = _images(rng)
    enc = _tiny_encoder(feature_source="encoder").fit(X)
    assert enc.transform(X).shape == (8, 16)
    enc.feature_source = "tintok"
    assert enc.transform(X).shape == (8, 8)


def test_fit_rejects_bad_inputs(rng):
    enc = _tiny_encoder()
    with pytest.raises(ValueError):
        enc.fit(rng.random((4, 1, 16, 16)))
    with pytest.raises(ValueError):
        enc.fit(rng.random((4, 3, 8, 8)))
    with pytest.raises(ValueError):
        enc.fit(rng.random((4, 3, 16, 16)) * 2.0)


def test_reconstruct_shape_and_range(rng):
    X = _images(rng, n=5)
    enc = _tiny_encoder().fit(X)
    R = enc.reconstruct(X)
    assert R.shape == X.shape
    assert R.min() >= 0.0 and R.max() <= 1.0


def test_fit_deterministic_for_seed(rng):
    X = _images(rng)
    a = _tiny_encoder(seed=3).fit(X).transform(X)
    b = _tiny_encoder(seed=3).fit(X).transform(X)
    np.testing.assert_array_equal(a, b)


def test_tiny_token_pca_round_trip(rng):
    X = rng.normal(size=(50, 12))
    pca = TinyTokenPca(d_t=12).fit(X)
    Z = pca.transform(X)
    assert Z.shape == (50, 12)
    np.testing.assert_allclose(pca.inverse_transform(Z), X, atol=1e-8)


def test_tiny_token_pca_not_fitted(rng):
    with pytest.raises(NotFittedError):
        TinyTokenPca().transform(rng.normal(size=(4, 20)))


def test_tiny_token_pca_clone():
    pca = TinyTokenPca(d_t=6)
    assert clone(pca).get_params() == {"d_t": 6}
