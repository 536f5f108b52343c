"""Neural network layers built on the autodiff primitives.

Linear, LayerNorm, pre-norm attention blocks (SwiGLU or plain MLP
feedforward, optional rotary position rotation), sinusoidal coordinate
encoding, pixel shuffle upsampling, and a fixed 3x3 convolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def _rng_init(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Truncated normal at 2 sigma."""
    w = rng.normal(0.0, std, size=shape)
    return np.clip(w, -2 * std, 2 * std).astype(np.float32)


@dataclass
class LinearLayer:
    weight: Tensor  # [d_out, d_in]
    bias: Optional[Tensor] = None

    @staticmethod
    def create(d_in: int, d_out: int, rng: np.random.Generator,
               bias: bool = True, std: float = 0.02) -> "LinearLayer":
        w = ad.param(_rng_init(rng, (d_out, d_in), std))
        b = ad.param(np.zeros(d_out, dtype=np.float32)) if bias else None
        return LinearLayer(w, b)

    def params(self) -> list[Tensor]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])


def linear(x: Tensor, layer: LinearLayer) -> Tensor:
    """y = x W^T + b over the trailing axis."""
    if x.shape[-1] != layer.weight.shape[-1]:
        raise ad.ShapeMismatch(
            f"linear input dim {x.shape[-1]} != weight cols {layer.weight.shape[-1]}")
    y = ad.matmul(x, ad.transpose(layer.weight))
    if layer.bias is not None:
        y = y + layer.bias
    return y


@dataclass
class LayerNormParams:
    gain: Tensor
    shift: Tensor
    epsilon: float = 1e-5

    @staticmethod
    def create(d: int, epsilon: float = 1e-5) -> "LayerNormParams":
        return LayerNormParams(ad.param(np.ones(d, dtype=np.float32)),
                               ad.param(np.zeros(d, dtype=np.float32)), epsilon)

    def params(self) -> list[Tensor]:
        return [self.gain, self.shift]


def layer_norm(x: Tensor, p: LayerNormParams) -> Tensor:
    if x.shape[-1] == 0:
        raise ad.ShapeMismatch("layer_norm over empty axis")
    mu = ad.tmean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = ad.tmean(centered * centered, axis=-1, keepdims=True)
    inv = ad.power(var + p.epsilon, -0.5)
    return centered * inv * p.gain + p.shift


def norm_linear(x: Tensor, ln: LayerNormParams, fc: LinearLayer) -> Tensor:
    """LayerNorm followed by a linear projection, the artifact's standard glue."""
    return linear(layer_norm(x, ln), fc)


# ---------------------------------------------------------------------------
# rotary position rotation

def rope_table(n_rows: int, n_cols: int, head_dim: int,
               with_global: bool = True, base: float = 100.0) -> np.ndarray:
    """Per-token rotation angles, axial 2-D layout over an image patch grid.

    Half the head-dim pairs rotate with the row index, half with the column
    index, at geometric frequencies. Returns angles [n_tokens, head_dim//2];
    the optional leading global token gets the zero rotation.
    """
    if head_dim % 2 != 0:
        raise ad.ShapeMismatch("RoPE requires even head dim")
    pairs = head_dim // 2
    half = pairs // 2
    freqs = base ** (-np.arange(max(half, 1)) / max(half, 1))
    rows, cols = np.meshgrid(np.arange(n_rows), np.arange(n_cols), indexing="ij")
    rows = rows.reshape(-1)[:, None]
    cols = cols.reshape(-1)[:, None]
    ang = np.zeros((n_rows * n_cols, pairs), dtype=np.float32)
    ang[:, :half] = rows * freqs[None, :]
    ang[:, half:2 * half] = cols * freqs[None, :]
    if with_global:
        ang = np.concatenate([np.zeros((1, pairs), dtype=np.float32), ang], axis=0)
    return ang


def _apply_rope(x: Tensor, cos_t: Tensor, sin_t: Tensor) -> Tensor:
    """Rotate consecutive head-dim pairs of x [..., n, hd] by the table angles."""
    hd = x.shape[-1]
    xp = ad.reshape(x, x.shape[:-1] + (hd // 2, 2))
    x1 = xp[..., 0]
    x2 = xp[..., 1]
    r1 = x1 * cos_t - x2 * sin_t
    r2 = x1 * sin_t + x2 * cos_t
    out = ad.concat([ad.reshape(r1, r1.shape + (1,)), ad.reshape(r2, r2.shape + (1,))], axis=-1)
    return ad.reshape(out, x.shape)


@dataclass
class AttentionBlockParams:
    qkv: LinearLayer
    out: LinearLayer
    n_heads: int
    head_dim: int
    ff: list  # SwiGLU: [gate, value, out]; plain MLP: [hidden, out]
    swiglu: bool
    norm1: LayerNormParams = None
    norm2: LayerNormParams = None

    @staticmethod
    def create(d: int, n_heads: int, ff_mult: int, rng: np.random.Generator,
               swiglu: bool = True) -> "AttentionBlockParams":
        if d % n_heads != 0:
            raise ad.ShapeMismatch(f"dim {d} not divisible by {n_heads} heads")
        hd = d // n_heads
        ff_dim = ff_mult * d
        if swiglu:
            ff = [LinearLayer.create(d, ff_dim, rng), LinearLayer.create(d, ff_dim, rng),
                  LinearLayer.create(ff_dim, d, rng)]
        else:
            ff = [LinearLayer.create(d, ff_dim, rng), LinearLayer.create(ff_dim, d, rng)]
        return AttentionBlockParams(
            qkv=LinearLayer.create(d, 3 * d, rng), out=LinearLayer.create(d, d, rng),
            n_heads=n_heads, head_dim=hd, ff=ff, swiglu=swiglu,
            norm1=LayerNormParams.create(d), norm2=LayerNormParams.create(d))

    def params(self) -> list[Tensor]:
        ps = self.qkv.params() + self.out.params()
        for l in self.ff:
            ps += l.params()
        return ps + self.norm1.params() + self.norm2.params()


def multi_head_attention(tokens: Tensor, p: AttentionBlockParams,
                         rope: Optional[np.ndarray] = None) -> Tensor:
    """Scaled dot-product attention over tokens [..., n, d], no residual."""
    n, d = tokens.shape[-2], tokens.shape[-1]
    lead = tokens.shape[:-2]
    qkv = linear(tokens, p.qkv)  # [..., n, 3d]
    qkv = ad.reshape(qkv, lead + (n, 3, p.n_heads, p.head_dim))
    perm = tuple(range(len(lead))) + tuple(len(lead) + i for i in (1, 2, 0, 3))
    qkv = ad.transpose(qkv, perm)  # [..., 3, heads, n, hd]
    q = qkv[..., 0, :, :, :]
    k = qkv[..., 1, :, :, :]
    v = qkv[..., 2, :, :, :]
    if rope is not None:
        if p.head_dim % 2 != 0:
            raise ad.ShapeMismatch("odd head dim with RoPE")
        cos_t = Tensor(np.cos(rope).astype(tokens.data.dtype))
        sin_t = Tensor(np.sin(rope).astype(tokens.data.dtype))
        q = _apply_rope(q, cos_t, sin_t)
        k = _apply_rope(k, cos_t, sin_t)
    scores = ad.matmul(q, ad.swap_last2(k)) * (1.0 / math.sqrt(p.head_dim))
    attn = ad.softmax(scores, axis=-1)
    ctx = ad.matmul(attn, v)  # [..., heads, n, hd]
    perm_back = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    ctx = ad.transpose(ctx, perm_back)  # [..., n, heads, hd]
    ctx = ad.reshape(ctx, lead + (n, d))
    return linear(ctx, p.out)


def feedforward(x: Tensor, p: AttentionBlockParams) -> Tensor:
    if p.swiglu:
        a = linear(x, p.ff[0])
        gate = ad.sigmoid(a) * a  # silu
        return linear(gate * linear(x, p.ff[1]), p.ff[2])
    return linear(ad.relu(linear(x, p.ff[0])), p.ff[1])


def attention_block(tokens: Tensor, p: AttentionBlockParams,
                    rope: Optional[np.ndarray] = None) -> Tensor:
    """Pre-norm residual transformer block."""
    x = tokens + multi_head_attention(layer_norm(tokens, p.norm1), p, rope=rope)
    return x + feedforward(layer_norm(x, p.norm2), p)


def residual_mlp_block(tokens: Tensor, p: AttentionBlockParams) -> Tensor:
    """Attention-free block: per-token pre-norm residual MLP only."""
    return tokens + feedforward(layer_norm(tokens, p.norm2), p)


# ---------------------------------------------------------------------------
# coordinate encoding and upsampling

def sinusoidal_encode(coords: Tensor, dim: int) -> Tensor:
    """Interleaved sin/cos of 2-D coords in [0,1] at geometric frequencies.

    coords [m, 2] -> [m, dim]; dim must be even. Deterministic.
    """
    if dim % 2 != 0:
        raise ad.ShapeMismatch("sinusoidal dim must be even")
    pairs = dim // 2
    nx = (pairs + 1) // 2
    ny = pairs - nx
    dt = coords.data.dtype
    fx = (2.0 ** np.arange(nx)).astype(dt) * np.pi
    fy = (2.0 ** np.arange(max(ny, 1))).astype(dt)[:ny] * np.pi
    ang = np.concatenate([coords.data[:, 0:1] * fx[None, :],
                          coords.data[:, 1:2] * fy[None, :]], axis=1)  # [m, pairs]
    out = np.empty((coords.shape[0], dim), dtype=dt)
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return Tensor(out)


def sinusoidal_positions(n: int, dim: int) -> np.ndarray:
    """Standard 1-D sin/cos table for token positions, [n, dim]."""
    pos = np.arange(n)[:, None]
    idx = np.arange(dim // 2)[None, :]
    ang = pos / (10000.0 ** (2 * idx / dim))
    out = np.zeros((n, dim), dtype=np.float32)
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """[..., C*r^2, h, w] -> [..., C, h*r, w*r], value-preserving."""
    c2, h, w = x.shape[-3], x.shape[-2], x.shape[-1]
    if c2 % (r * r) != 0:
        raise ad.ShapeMismatch(f"channels {c2} not divisible by r^2={r * r}")
    c = c2 // (r * r)
    lead = x.shape[:-3]
    nl = len(lead)
    x = ad.reshape(x, lead + (c, r, r, h, w))
    # [..., c, h, r, w, r]
    perm = tuple(range(nl)) + (nl, nl + 3, nl + 1, nl + 4, nl + 2)
    x = ad.transpose(x, perm)
    return ad.reshape(x, lead + (c, h * r, w * r))


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse rearrangement of pixel_shuffle."""
    c, hr, wr = x.shape[-3], x.shape[-2], x.shape[-1]
    h, w = hr // r, wr // r
    lead = x.shape[:-3]
    nl = len(lead)
    x = ad.reshape(x, lead + (c, h, r, w, r))
    perm = tuple(range(nl)) + (nl, nl + 2, nl + 4, nl + 1, nl + 3)
    x = ad.transpose(x, perm)
    return ad.reshape(x, lead + (c * r * r, h, w))


def conv2d_3x3(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Cross-correlation, stride 1, zero padding 1.

    x [..., C_in, h, w], kernel [C_out, C_in, 3, 3] -> [..., C_out, h, w].
    """
    if kernel.shape[-2:] != (3, 3):
        raise ad.ShapeMismatch(f"kernel must be 3x3, got {kernel.shape[-2:]}")
    cin, h, w = x.shape[-3], x.shape[-2], x.shape[-1]
    if kernel.shape[1] != cin:
        raise ad.ShapeMismatch(f"kernel C_in {kernel.shape[1]} != input {cin}")
    cout = kernel.shape[0]
    lead = x.shape[:-3]
    xp = ad.pad2d(x, 1)
    patches = []
    for di in range(3):
        for dj in range(3):
            s = xp[..., di:di + h, dj:dj + w]
            patches.append(ad.reshape(s, lead + (cin, 1, h * w)))
    stacked = ad.concat(patches, axis=-2)  # [..., cin, 9, h*w]
    stacked = ad.reshape(stacked, lead + (cin * 9, h * w))
    kmat = ad.reshape(kernel, (cout, cin * 9))  # row-major matches (cin, di, dj)
    # reorder stacked from (cin, didj) to match kernel's (cin, didj): already aligned
    out = ad.matmul(kmat, stacked)  # [..., cout, h*w]
    if bias is not None:
        out = out + ad.reshape(bias, (cout, 1))
    return ad.reshape(out, lead + (cout, h, w))
