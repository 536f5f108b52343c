"""Shared base patch INR, its per-patch modulation, and patch/image decoding.

The base network maps strided coordinates inside a patch through a small
ReLU MLP; a 3x3 conv head plus pixel shuffle recovers full patch resolution.
Per-patch modulation multiplies one configured MLP layer elementwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nnops
from .autodiff import Tensor
from .nnops import LinearLayer


@dataclass
class InrConfig:
    pos_dim: int = 128
    n_mlp_layers: int = 3
    mlp_dim: int = 256
    coord_stride: int = 4
    upscale_factor: int = 4
    patch_size: int = 16
    modulated_layer_index: int = 2  # 1-based

    def __post_init__(self):
        if self.patch_size % self.coord_stride != 0:
            raise ValueError("patch_size must be divisible by coord_stride")
        if self.upscale_factor != self.coord_stride:
            raise ValueError("upscale_factor must equal coord_stride")
        if not 1 <= self.modulated_layer_index <= self.n_mlp_layers:
            raise ValueError("modulated_layer_index out of range")

    def layer_dims(self, i: int) -> tuple[int, int]:
        """(d_in, d_out) of 1-based MLP layer i."""
        d_in = self.pos_dim if i == 1 else self.mlp_dim
        return d_in, self.mlp_dim

    @property
    def modulated_dims(self) -> tuple[int, int]:
        return self.layer_dims(self.modulated_layer_index)


@dataclass
class BaseInr:
    mlp: list  # LinearLayer per MLP layer
    conv_kernel: Tensor  # [3*stride^2, mlp_dim, 3, 3]
    conv_bias: Tensor
    config: InrConfig

    @staticmethod
    def create(config: InrConfig, rng: np.random.Generator) -> "BaseInr":
        layers = []
        for i in range(1, config.n_mlp_layers + 1):
            d_in, d_out = config.layer_dims(i)
            # fan-in scaled init; the modulated layer sees multiplicative noise
            std = 1.0 / np.sqrt(d_in)
            layers.append(LinearLayer.create(d_in, d_out, rng, std=std))
        c_out = 3 * config.coord_stride ** 2
        kernel = ad.param(nnops._rng_init(rng, (c_out, config.mlp_dim, 3, 3),
                                          std=1.0 / np.sqrt(9 * config.mlp_dim)))
        bias = ad.param(np.zeros(c_out, dtype=np.float32))
        return BaseInr(layers, kernel, bias, config)

    def params(self) -> list[Tensor]:
        ps = []
        for l in self.mlp:
            ps += l.params()
        return ps + [self.conv_kernel, self.conv_bias]


@dataclass
class CoordGrid:
    coords: Tensor  # [(side)^2, 2] in [0,1], row-major
    side: int

    @staticmethod
    def for_patch(config: InrConfig) -> "CoordGrid":
        side = config.patch_size // config.coord_stride
        return CoordGrid.make(side)

    @staticmethod
    def make(side: int) -> "CoordGrid":
        # strided sample centers, normalized to [0,1]
        xs = (np.arange(side) + 0.5) / side
        yy, xx = np.meshgrid(xs, xs, indexing="ij")
        coords = np.stack([yy.reshape(-1), xx.reshape(-1)], axis=1).astype(np.float32)
        return CoordGrid(Tensor(coords), side)


def modulate(base: BaseInr, m: Tensor):
    """Return the modulated weight view theta' = {W_k ⊙ M} for the configured k.

    ``m`` has shape [..., d_in, d_out] (leading axes batch over patches);
    all other layers alias the base weights. Differentiable through both.
    """
    k = base.config.modulated_layer_index - 1
    d_in, d_out = base.config.modulated_dims
    if m.shape[-2:] != (d_in, d_out):
        raise ad.ShapeMismatch(
            f"modulation shape {m.shape[-2:]} != modulated layer ({d_in}, {d_out})")
    # weight stored [d_out, d_in]; work in [d_in, d_out] orientation
    w_t = ad.transpose(base.mlp[k].weight)
    return _ModulatedInr(base, k, w_t * m)


@dataclass
class _ModulatedInr:
    base: BaseInr
    mod_index: int  # 0-based
    mod_weight: Tensor  # [..., d_in, d_out], already elementwise-multiplied


def _mlp_forward(theta, x: Tensor) -> Tensor:
    """Run the (possibly modulated) MLP; x [..., m, pos_dim] -> [..., m, mlp_dim]."""
    if isinstance(theta, BaseInr):
        base, mod_index, mod_weight = theta, -1, None
    else:
        base, mod_index, mod_weight = theta.base, theta.mod_index, theta.mod_weight
    h = x
    for i, layer in enumerate(base.mlp):
        if i == mod_index:
            h = ad.matmul(h, mod_weight)
            if layer.bias is not None:
                h = h + layer.bias
        else:
            h = nnops.linear(h, layer)
        if i < len(base.mlp) - 1:
            h = ad.relu(h)
    return h


def decode_patch(theta, grid: CoordGrid) -> Tensor:
    """Decode pixels from coordinates.

    Returns [..., 3, side*stride, side*stride] where leading axes come from
    the modulation batch (none for the unmodulated base INR).
    """
    base = theta if isinstance(theta, BaseInr) else theta.base
    cfg = base.config
    enc = nnops.sinusoidal_encode(grid.coords, cfg.pos_dim)  # [m, pos_dim]
    enc = Tensor(enc.data.astype(base.mlp[0].weight.data.dtype))
    feats = _mlp_forward(theta, enc)  # [..., m, mlp_dim]
    lead = feats.shape[:-2]
    side = grid.side
    # row-major coordinate order -> [..., mlp_dim, side, side] feature map
    fmap = ad.reshape(ad.swap_last2(feats), lead + (cfg.mlp_dim, side, side))
    out = nnops.conv2d_3x3(fmap, base.conv_kernel, base.conv_bias)
    out = nnops.pixel_shuffle(out, cfg.upscale_factor)
    return ad.sigmoid(out)


def assemble_image(patches: Tensor, grid_shape: tuple[int, int]) -> Tensor:
    """Tile patches [..., P, 3, p, p] row-major into [..., 3, rows*p, cols*p]."""
    rows, cols = grid_shape
    P, c, ph, pw = patches.shape[-4:]
    if P != rows * cols:
        raise ad.ShapeMismatch(f"{P} patches cannot tile {rows}x{cols}")
    lead = patches.shape[:-4]
    nl = len(lead)
    x = ad.reshape(patches, lead + (rows, cols, c, ph, pw))
    # -> [..., c, rows, ph, cols, pw]
    perm = tuple(range(nl)) + (nl + 2, nl, nl + 3, nl + 1, nl + 4)
    x = ad.transpose(x, perm)
    return ad.reshape(x, lead + (c, rows * ph, cols * pw))
