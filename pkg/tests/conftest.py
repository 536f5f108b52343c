import numpy as np
import pytest

from huvr.autodiff import Tensor
from huvr.hypernet import HuvrConfig, HuvrModel


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tiny_config(**kw):
    """Smallest config that still exercises every pipeline stage."""
    base = dict(image_size=16, patch_size=8, d_vit=16, n_enc_blocks=2,
                n_heads=2, ff_mult=2, d_t=8, d_dec=16, n_dec_blocks=1,
                variant="plus_decoder", inr_pos_dim=8, inr_mlp_dim=16,
                inr_stride=4, seed=0)
    base.update(kw)
    return HuvrConfig(**base)


def cast_model_f64(model: HuvrModel) -> HuvrModel:
    for p in model.named_params().values():
        p.data = p.data.astype(np.float64)
    return model


def rand_f64(rng, shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), dtype="f64")
