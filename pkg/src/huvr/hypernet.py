"""The full image -> per-patch-modulation hyper-network, with its design
ablation ladder.

Variant ladder, each stage keeping all prior changes:

    transinr_weight_tokens  per-image INR from learnable weight tokens,
                            every MLP layer modulated (repeat-k construction)
    second_layer_only       same, but only the configured layer is modulated
    patchwise_copy          patch tokens as weight tokens, one INR per patch,
                            patch projection replicated across columns
    patchwise_global        learnable global token; rank-1 outer-product
                            modulation  M = p_proj x g_proj^T
    plus_compression        LayerNorm+linear bottleneck to d_t (TinToks) and
                            back up to d_dec
    plus_decoder            token decoder blocks (attention or residual MLP)
                            between upsampling and the INR projections
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import nnops
from .autodiff import Tensor
from .inr import BaseInr, CoordGrid, InrConfig, modulate
from .nnops import AttentionBlockParams, LayerNormParams, LinearLayer

VARIANTS = ["transinr_weight_tokens", "second_layer_only", "patchwise_copy",
            "patchwise_global", "plus_compression", "plus_decoder"]

_CKPT_MAGIC = b"HUVRCKPT"


class VariantError(ValueError):
    pass


def variant_rank(variant: str) -> int:
    if variant not in VARIANTS:
        raise VariantError(f"unknown variant {variant!r}")
    return VARIANTS.index(variant)


@dataclass
class HuvrConfig:
    """Every dimension and switch of the desk-scale model."""

    image_size: int = 32
    patch_size: int = 8
    d_vit: int = 64
    n_enc_blocks: int = 4
    n_heads: int = 4
    ff_mult: int = 2
    d_t: int = 16
    d_dec: int = 64
    n_dec_blocks: int = 1
    decoder_attention: bool = True
    variant: str = "plus_decoder"
    n_weight_tokens: int = 16
    use_rope: bool = True
    inr_pos_dim: int = 32
    inr_mlp_layers: int = 3
    inr_mlp_dim: int = 64
    inr_stride: int = 4
    inr_modulated_layer: int = 2
    distill_enabled: bool = False
    teacher_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        variant_rank(self.variant)
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if variant_rank(self.variant) < variant_rank("plus_compression"):
            self.d_t = self.d_vit  # no bottleneck below the compression stage

    @property
    def rank(self) -> int:
        return variant_rank(self.variant)

    @property
    def grid_shape(self) -> tuple[int, int]:
        n = self.image_size // self.patch_size
        return n, n

    @property
    def n_patches(self) -> int:
        r, c = self.grid_shape
        return r * c

    @property
    def has_global(self) -> bool:
        return self.rank >= variant_rank("patchwise_global")

    @property
    def patchwise(self) -> bool:
        return self.rank >= variant_rank("patchwise_copy")

    @property
    def has_compression(self) -> bool:
        return self.rank >= variant_rank("plus_compression")

    @property
    def has_decoder(self) -> bool:
        return self.rank >= variant_rank("plus_decoder")

    @property
    def d_mod_input(self) -> int:
        """Token dim feeding the INR projections."""
        return self.d_dec if self.has_compression else self.d_vit

    def inr_config(self) -> InrConfig:
        return InrConfig(pos_dim=self.inr_pos_dim, n_mlp_layers=self.inr_mlp_layers,
                         mlp_dim=self.inr_mlp_dim, coord_stride=self.inr_stride,
                         upscale_factor=self.inr_stride, patch_size=self.patch_size,
                         modulated_layer_index=self.inr_modulated_layer)

    def to_text(self) -> str:
        items = sorted(asdict(self).items())
        return "".join(f"{k}={v}\n" for k, v in items)

    @staticmethod
    def from_text(text: str) -> "HuvrConfig":
        kwargs = {}
        hints = {f.name: f.type for f in HuvrConfig.__dataclass_fields__.values()}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, _, v = line.partition("=")
            k = k.strip()
            if k not in hints:
                raise ValueError(f"unknown config key {k!r}")
            t = hints[k]
            if t in ("int", int):
                kwargs[k] = int(v)
            elif t in ("bool", bool):
                kwargs[k] = v.strip() in ("True", "true", "1")
            else:
                kwargs[k] = v.strip()
        return HuvrConfig(**kwargs)


@dataclass
class TokenSet:
    """Per-image token state at each pipeline stage."""

    patch_tokens_enc: Tensor  # [B, P, d_vit]
    global_token_enc: Optional[Tensor] = None  # [B, d_vit]
    weight_tokens_out: Optional[Tensor] = None  # [B, n_wt_total, d_vit]
    tintoks: Optional[Tensor] = None  # [B, P, d_t]
    global_tintok: Optional[Tensor] = None  # [B, d_t]
    patch_tokens_dec: Optional[Tensor] = None  # [B, P, d_dec]
    global_token_dec: Optional[Tensor] = None  # [B, d_dec]


class HuvrModel:
    """Hyper-network h: image -> per-patch modulation matrices -> pixels."""

    def __init__(self, config: HuvrConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        c = config
        p2 = 3 * c.patch_size * c.patch_size
        self.patch_embed = LinearLayer.create(p2, c.d_vit, rng, std=1.0 / np.sqrt(p2))
        self.enc_blocks = [AttentionBlockParams.create(c.d_vit, c.n_heads, c.ff_mult, rng)
                           for _ in range(c.n_enc_blocks)]
        self.enc_norm = LayerNormParams.create(c.d_vit)
        self.base_inr = BaseInr.create(c.inr_config(), rng)
        icfg = self.base_inr.config

        self.global_token = None
        if c.has_global:
            self.global_token = ad.param(nnops._rng_init(rng, (c.d_vit,)))

        self.weight_tokens = None
        self.wt_projections = None
        if not c.patchwise:
            layers = (range(1, icfg.n_mlp_layers + 1)
                      if c.variant == "transinr_weight_tokens"
                      else [icfg.modulated_layer_index])
            self.wt_layers = list(layers)
            for i in self.wt_layers:
                d_out = icfg.layer_dims(i)[1]
                if d_out % c.n_weight_tokens != 0:
                    raise VariantError(
                        f"layer {i} d_out {d_out} not divisible by {c.n_weight_tokens} tokens")
            n_total = len(self.wt_layers) * c.n_weight_tokens
            self.weight_tokens = ad.param(nnops._rng_init(rng, (n_total, c.d_vit)))
            self.wt_projections = [
                LinearLayer.create(c.d_vit, icfg.layer_dims(i)[0], rng,
                                   std=1.0 / np.sqrt(c.d_vit))
                for i in self.wt_layers]

        self.down = self.down_norm = self.up = self.up_norm = None
        if c.has_compression:
            self.down_norm = LayerNormParams.create(c.d_vit)
            self.down = LinearLayer.create(c.d_vit, c.d_t, rng, std=1.0 / np.sqrt(c.d_vit))
            self.up_norm = LayerNormParams.create(c.d_t)
            self.up = LinearLayer.create(c.d_t, c.d_dec, rng, std=1.0 / np.sqrt(c.d_t))

        self.dec_blocks = []
        if c.has_decoder:
            self.dec_blocks = [
                AttentionBlockParams.create(c.d_dec, c.n_heads, c.ff_mult, rng, swiglu=False)
                for _ in range(c.n_dec_blocks)]

        d_in, d_out = icfg.modulated_dims
        self.proj_patch_norm = self.proj_patch = None
        self.proj_global_norm = self.proj_global = None
        if c.patchwise:
            dm = c.d_mod_input
            self.proj_patch_norm = LayerNormParams.create(dm)
            self.proj_patch = LinearLayer.create(dm, d_in, rng, std=1.0 / np.sqrt(dm))
            if c.has_global:
                self.proj_global_norm = LayerNormParams.create(dm)
                self.proj_global = LinearLayer.create(dm, d_out, rng, std=1.0 / np.sqrt(dm))

        self.distill_heads = None
        if c.distill_enabled:
            dd = c.d_mod_input
            self.distill_heads = {}
            for name, d in (("g_enc", c.d_vit), ("p_enc", c.d_vit),
                            ("g_dec", dd), ("p_dec", dd)):
                self.distill_heads[name] = (LayerNormParams.create(d),
                                            LinearLayer.create(d, c.teacher_dim, rng,
                                                               std=1.0 / np.sqrt(d)))

        self._grid_patch = CoordGrid.for_patch(icfg)
        self._grid_image = CoordGrid.make(c.image_size // icfg.coord_stride)
        self._rope = self._build_rope() if c.use_rope else None
        self._dec_pos = None

    # -- parameter bookkeeping ------------------------------------------------

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}

        def put(prefix, obj):
            if obj is None:
                return
            if isinstance(obj, Tensor):
                out[prefix] = obj
            elif isinstance(obj, LinearLayer):
                out[prefix + ".weight"] = obj.weight
                if obj.bias is not None:
                    out[prefix + ".bias"] = obj.bias
            elif isinstance(obj, LayerNormParams):
                out[prefix + ".gain"] = obj.gain
                out[prefix + ".shift"] = obj.shift
            elif isinstance(obj, AttentionBlockParams):
                put(prefix + ".qkv", obj.qkv)
                put(prefix + ".out", obj.out)
                for i, l in enumerate(obj.ff):
                    put(f"{prefix}.ff{i}", l)
                put(prefix + ".norm1", obj.norm1)
                put(prefix + ".norm2", obj.norm2)
            else:
                raise TypeError(type(obj))

        put("patch_embed", self.patch_embed)
        for i, b in enumerate(self.enc_blocks):
            put(f"enc.{i}", b)
        put("enc_norm", self.enc_norm)
        put("global_token", self.global_token)
        put("weight_tokens", self.weight_tokens)
        if self.wt_projections:
            for i, l in enumerate(self.wt_projections):
                put(f"wt_proj.{i}", l)
        put("down_norm", self.down_norm)
        put("down", self.down)
        put("up_norm", self.up_norm)
        put("up", self.up)
        for i, b in enumerate(self.dec_blocks):
            put(f"dec.{i}", b)
        put("proj_patch_norm", self.proj_patch_norm)
        put("proj_patch", self.proj_patch)
        put("proj_global_norm", self.proj_global_norm)
        put("proj_global", self.proj_global)
        for i, l in enumerate(self.base_inr.mlp):
            put(f"inr.mlp.{i}", l)
        put("inr.conv_kernel", self.base_inr.conv_kernel)
        put("inr.conv_bias", self.base_inr.conv_bias)
        if self.distill_heads:
            for name, (ln, fc) in self.distill_heads.items():
                put(f"distill.{name}.norm", ln)
                put(f"distill.{name}.fc", fc)
        return out

    def params(self) -> list[Tensor]:
        return list(self.named_params().values())

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params())

    # -- pipeline stages ------------------------------------------------------

    def _build_rope(self) -> np.ndarray:
        c = self.config
        rows, cols = c.grid_shape
        hd = c.d_vit // c.n_heads
        ang = nnops.rope_table(rows, cols, hd, with_global=False)
        zeros = np.zeros((1, ang.shape[1]), dtype=np.float32)
        pieces = []
        if c.has_global:
            pieces.append(zeros)
        pieces.append(ang)
        if self.weight_tokens is not None:
            pieces.append(np.repeat(zeros, self.weight_tokens.shape[0], axis=0))
        return np.concatenate(pieces, axis=0)

    def encode(self, images: Tensor) -> TokenSet:
        """Patchify, embed, run encoder blocks. images [B, 3, H, W] normalized."""
        c = self.config
        B = images.shape[0]
        if images.shape[-1] % c.patch_size or images.shape[-2] % c.patch_size:
            raise ad.ShapeMismatch("image extents not divisible by patch size")
        rows, cols = c.grid_shape
        p = c.patch_size
        x = ad.reshape(images, (B, 3, rows, p, cols, p))
        x = ad.transpose(x, (0, 2, 4, 1, 3, 5))  # [B, rows, cols, 3, p, p]
        x = ad.reshape(x, (B, rows * cols, 3 * p * p))
        tokens = nnops.linear(x, self.patch_embed)  # [B, P, d_vit]

        pieces = []
        if c.has_global:
            g = ad.broadcast_to(ad.reshape(self.global_token, (1, 1, c.d_vit)),
                                (B, 1, c.d_vit))
            pieces.append(g)
        pieces.append(tokens)
        if self.weight_tokens is not None:
            n_wt = self.weight_tokens.shape[0]
            w = ad.broadcast_to(ad.reshape(self.weight_tokens, (1, n_wt, c.d_vit)),
                                (B, n_wt, c.d_vit))
            pieces.append(w)
        seq = pieces[0] if len(pieces) == 1 else ad.concat(pieces, axis=1)

        for block in self.enc_blocks:
            seq = nnops.attention_block(seq, block, rope=self._rope)
        seq = nnops.layer_norm(seq, self.enc_norm)

        P = c.n_patches
        off = 1 if c.has_global else 0
        ts = TokenSet(patch_tokens_enc=seq[:, off:off + P, :])
        if c.has_global:
            ts.global_token_enc = seq[:, 0, :]
        if self.weight_tokens is not None:
            ts.weight_tokens_out = seq[:, off + P:, :]
        return ts

    def compress(self, ts: TokenSet) -> TokenSet:
        """LayerNorm + linear bottleneck to d_t over every token."""
        c = self.config
        if not c.has_compression:
            raise VariantError(f"variant {c.variant} has no compression stage")
        ts.tintoks = nnops.norm_linear(ts.patch_tokens_enc, self.down_norm, self.down)
        if ts.global_token_enc is not None:
            ts.global_tintok = nnops.norm_linear(ts.global_token_enc, self.down_norm, self.down)
        return ts

    def decode_tokens(self, ts: TokenSet) -> TokenSet:
        """Upsample (when compressed) and run decoder blocks (when present)."""
        c = self.config
        if c.has_compression:
            pieces = [ad.reshape(ts.global_tintok, (ts.global_tintok.shape[0], 1, c.d_t)),
                      ts.tintoks] if ts.global_tintok is not None else [ts.tintoks]
            seq = pieces[0] if len(pieces) == 1 else ad.concat(pieces, axis=1)
            seq = nnops.norm_linear(seq, self.up_norm, self.up)
        else:
            pieces = []
            if ts.global_token_enc is not None:
                g = ts.global_token_enc
                pieces.append(ad.reshape(g, (g.shape[0], 1, c.d_vit)))
            pieces.append(ts.patch_tokens_enc)
            seq = pieces[0] if len(pieces) == 1 else ad.concat(pieces, axis=1)

        if c.has_decoder:
            if self._dec_pos is None or self._dec_pos.shape[0] != seq.shape[1]:
                self._dec_pos = nnops.sinusoidal_positions(seq.shape[1], c.d_dec)
            seq = seq + Tensor(self._dec_pos.astype(seq.data.dtype))
            for block in self.dec_blocks:
                if c.decoder_attention:
                    seq = nnops.attention_block(seq, block)
                else:
                    seq = nnops.residual_mlp_block(seq, block)

        off = 1 if ts.global_token_enc is not None else 0
        ts.patch_tokens_dec = seq[:, off:, :]
        if off:
            ts.global_token_dec = seq[:, 0, :]
        return ts

    def build_modulations(self, ts: TokenSet):
        """Per-patch (or per-image, for baselines) modulation matrices."""
        c = self.config
        icfg = self.base_inr.config
        d_in, d_out = icfg.modulated_dims
        if c.patchwise:
            p_tokens = ts.patch_tokens_dec
            B, P = p_tokens.shape[0], p_tokens.shape[1]
            p_proj = nnops.norm_linear(p_tokens, self.proj_patch_norm, self.proj_patch)
            if c.has_global:
                g_proj = nnops.norm_linear(ts.global_token_dec, self.proj_global_norm,
                                           self.proj_global)  # [B, d_out]
                m = ad.matmul(ad.reshape(p_proj, (B, P, d_in, 1)),
                              ad.reshape(g_proj, (B, 1, 1, d_out)))
            else:
                m = ad.broadcast_to(ad.reshape(p_proj, (B, P, d_in, 1)),
                                    (B, P, d_in, d_out))
            return {icfg.modulated_layer_index: m}
        # weight-token baselines: per-image repeat-k construction
        w = ts.weight_tokens_out  # [B, n_layers*n_wt, d_vit]
        B = w.shape[0]
        n_wt = c.n_weight_tokens
        mods = {}
        for j, layer_idx in enumerate(self.wt_layers):
            li, lo = icfg.layer_dims(layer_idx)
            wi = w[:, j * n_wt:(j + 1) * n_wt, :]
            proj = nnops.linear(wi, self.wt_projections[j])  # [B, n_wt, d_in]
            k = lo // n_wt
            rep = ad.broadcast_to(ad.reshape(proj, (B, n_wt, 1, li)), (B, n_wt, k, li))
            rep = ad.reshape(rep, (B, n_wt * k, li))
            mods[layer_idx] = ad.transpose(rep, (0, 2, 1))  # [B, d_in, d_out]
        return mods

    def decode_pixels(self, mods: dict) -> Tensor:
        """Modulate the base INR and decode to a [B, 3, H, W] image in [0, 1]."""
        c = self.config
        icfg = self.base_inr.config
        if c.patchwise:
            theta = modulate(self.base_inr, mods[icfg.modulated_layer_index])
            patches = _decode(theta, self._grid_patch)  # [B, P, 3, p, p]
            from .inr import assemble_image
            return assemble_image(patches, c.grid_shape)
        theta = _modulate_multi(self.base_inr, mods)
        return _decode(theta, self._grid_image)  # [B, 3, H, W]

    def forward(self, images: Tensor) -> tuple[Tensor, TokenSet]:
        ts = self.encode(images)
        if self.config.has_compression:
            ts = self.compress(ts)
        ts = self.decode_tokens(ts)
        mods = self.build_modulations(ts)
        recon = self.decode_pixels(mods)
        return recon, ts

    def embed(self, images: Tensor) -> TokenSet:
        """Token stages only, no pixel decode (cheap evaluation path)."""
        ts = self.encode(images)
        if self.config.has_compression:
            ts = self.compress(ts)
        return ts


# multi-layer modulation support for the weight-token baselines

@dataclass
class _MultiModulated:
    base: BaseInr
    mod_weights: dict  # 0-based layer index -> [..., d_in, d_out]


def _modulate_multi(base: BaseInr, mods: dict) -> _MultiModulated:
    mw = {}
    for layer_idx, m in mods.items():
        k = layer_idx - 1
        w_t = ad.transpose(base.mlp[k].weight)
        mw[k] = w_t * m
    return _MultiModulated(base, mw)


def _decode(theta, grid: CoordGrid) -> Tensor:
    from . import inr as inr_mod
    if isinstance(theta, _MultiModulated):
        cfg = theta.base.config
        enc = nnops.sinusoidal_encode(grid.coords, cfg.pos_dim)
        h = Tensor(enc.data.astype(theta.base.mlp[0].weight.data.dtype))
        for i, layer in enumerate(theta.base.mlp):
            if i in theta.mod_weights:
                h = ad.matmul(h, theta.mod_weights[i])
                if layer.bias is not None:
                    h = h + layer.bias
            else:
                h = nnops.linear(h, layer)
            if i < len(theta.base.mlp) - 1:
                h = ad.relu(h)
        lead = h.shape[:-2]
        fmap = ad.reshape(ad.swap_last2(h), lead + (cfg.mlp_dim, grid.side, grid.side))
        out = nnops.conv2d_3x3(fmap, theta.base.conv_kernel, theta.base.conv_bias)
        out = nnops.pixel_shuffle(out, cfg.upscale_factor)
        return ad.sigmoid(out)
    return inr_mod.decode_patch(theta, grid)


# ---------------------------------------------------------------------------
# checkpoints: named-tensor archive + embedded canonical config text

def save_checkpoint(path, model: HuvrModel, extra: Optional[dict] = None) -> None:
    """Write model weights (and optional extra named tensors) to ``path``."""
    named = dict(model.named_params())
    if extra:
        for k, v in extra.items():
            named["extra." + k] = v if isinstance(v, Tensor) else Tensor(v)
    cfg = model.config.to_text().encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", 1))
        f.write(struct.pack("<I", len(cfg)))
        f.write(cfg)
        f.write(struct.pack("<I", len(named)))
        for name in sorted(named):
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            ad.write_tensor(f, named[name])


def load_checkpoint(path) -> tuple[HuvrModel, dict]:
    """Rebuild a model from a checkpoint; returns (model, extra tensors)."""
    with open(path, "rb") as f:
        if f.read(8) != _CKPT_MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", f.read(4))
        if version != 1:
            raise ValueError(f"unsupported checkpoint version {version}")
        (clen,) = struct.unpack("<I", f.read(4))
        config = HuvrConfig.from_text(f.read(clen).decode())
        model = HuvrModel(config)
        named = model.named_params()
        (n,) = struct.unpack("<I", f.read(4))
        extra = {}
        seen = set()
        for _ in range(n):
            (ln,) = struct.unpack("<H", f.read(2))
            name = f.read(ln).decode()
            t = ad.read_tensor(f)
            if name.startswith("extra."):
                extra[name[6:]] = t
                continue
            if name not in named:
                raise ValueError(f"unexpected tensor {name!r} in checkpoint")
            if t.shape != named[name].shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: {t.shape} vs {named[name].shape}")
            named[name].data = t.data.astype(named[name].data.dtype)
            seen.add(name)
        missing = set(named) - seen
        if missing:
            raise ValueError(f"checkpoint missing tensors: {sorted(missing)}")
    return model, extra
