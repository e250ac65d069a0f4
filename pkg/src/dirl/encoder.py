"""Patch-tokenizing pre-norm transformer encoder.

An image is cut into non-overlapping p x p patches (row-major, matching the
cell-prior grid), each flattened and sent through a shared linear projection,
plus a learnable 1D position embedding. L pre-norm residual blocks follow:

    t' = t + MSA(LN(t))
    t  = t' + MLP(LN(t'))

There is no class token; the image representation is the mean over tokens.
Every op accepts an arbitrary leading batch shape so paired views can run as
one graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .numerics import Tensor, layer_norm, matmul, parameter, scaled_dot_attention


@dataclass(frozen=True)
class EncoderConfig:
    p: int = 8
    d: int = 32
    L: int = 3
    h: int = 4
    n: int = 16
    mlp_ratio: int = 4
    channels: int = 3
    attn_scale: str = "head"  # "head" -> 1/sqrt(d/h), "model" -> 1/sqrt(d)

    def __post_init__(self):
        if self.d % self.h:
            raise ConfigError(f"embed dim {self.d} not divisible by {self.h} heads")
        if self.attn_scale not in ("head", "model"):
            raise ConfigError(f"attn_scale must be head or model, got {self.attn_scale!r}")

    @property
    def scale(self) -> float:
        denom = self.d / self.h if self.attn_scale == "head" else self.d
        return 1.0 / float(np.sqrt(denom))


@dataclass
class BlockParams:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named(self, prefix: str):
        for name in (
            "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv",
            "wo", "bo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2",
        ):
            yield f"{prefix}.{name}", getattr(self, name)


@dataclass
class EncoderParams:
    embed: Tensor  # (p*p*channels, d)
    pos: Tensor  # (n, d)
    blocks: list[BlockParams] = field(default_factory=list)

    def named(self, prefix: str = "encoder"):
        yield f"{prefix}.embed", self.embed
        yield f"{prefix}.pos", self.pos
        for i, blk in enumerate(self.blocks):
            yield from blk.named(f"{prefix}.block{i}")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named()]


@dataclass
class TokenMatrix:
    tokens: Tensor  # (..., n, d)
    depth: int


@dataclass
class AttentionRecord:
    """Post-softmax attention weights, one (..., h, n, n) array per block."""

    per_block: list[np.ndarray] = field(default_factory=list)

    def last(self) -> np.ndarray:
        return self.per_block[-1]


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return np.clip(rng.standard_normal(shape), -2.0, 2.0) * std


def init_block(cfg: EncoderConfig, rng: np.random.Generator, prefix: str) -> BlockParams:
    d, hidden = cfg.d, cfg.d * cfg.mlp_ratio

    def w(name, shape):
        return parameter(trunc_normal(rng, shape), name=f"{prefix}.{name}")

    def zeros(name, shape):
        return parameter(np.zeros(shape), name=f"{prefix}.{name}")

    return BlockParams(
        ln1_g=parameter(np.ones(d), name=f"{prefix}.ln1_g"),
        ln1_b=zeros("ln1_b", d),
        wq=w("wq", (d, d)), bq=zeros("bq", d),
        wk=w("wk", (d, d)), bk=zeros("bk", d),
        wv=w("wv", (d, d)), bv=zeros("bv", d),
        wo=w("wo", (d, d)), bo=zeros("bo", d),
        ln2_g=parameter(np.ones(d), name=f"{prefix}.ln2_g"),
        ln2_b=zeros("ln2_b", d),
        w1=w("w1", (d, hidden)), b1=zeros("b1", hidden),
        w2=w("w2", (hidden, d)), b2=zeros("b2", d),
    )


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator) -> EncoderParams:
    embed = parameter(
        trunc_normal(rng, (cfg.p * cfg.p * cfg.channels, cfg.d)), name="encoder.embed"
    )
    pos = parameter(trunc_normal(rng, (cfg.n, cfg.d)), name="encoder.pos")
    blocks = [init_block(cfg, rng, f"encoder.block{i}") for i in range(cfg.L)]
    return EncoderParams(embed=embed, pos=pos, blocks=blocks)


def _tensor_from(arrays: dict[str, np.ndarray], name: str, requires_grad: bool) -> Tensor:
    if name not in arrays:
        raise ConfigError(f"checkpoint is missing parameter {name!r}")
    return Tensor(arrays[name].copy(), requires_grad=requires_grad, name=name)


def block_params_from_arrays(
    arrays: dict[str, np.ndarray], prefix: str, requires_grad: bool = False
) -> BlockParams:
    fields = (
        "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv",
        "wo", "bo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2",
    )
    return BlockParams(**{
        f: _tensor_from(arrays, f"{prefix}.{f}", requires_grad) for f in fields
    })


def encoder_params_from_arrays(
    cfg: EncoderConfig,
    arrays: dict[str, np.ndarray],
    prefix: str = "encoder",
    requires_grad: bool = False,
) -> EncoderParams:
    """Rebuild parameters from named checkpoint arrays."""
    return EncoderParams(
        embed=_tensor_from(arrays, f"{prefix}.embed", requires_grad),
        pos=_tensor_from(arrays, f"{prefix}.pos", requires_grad),
        blocks=[
            block_params_from_arrays(arrays, f"{prefix}.block{i}", requires_grad)
            for i in range(cfg.L)
        ],
    )


def extract_patches(image: np.ndarray, p: int) -> np.ndarray:
    """(..., H, W, C) -> (..., n, p*p*C), patches row-major, pixels row-major."""
    *lead, H, W, C = image.shape
    if H % p or W % p:
        raise ConfigError(f"image {H}x{W} not divisible by patch size {p}")
    gh, gw = H // p, W // p
    x = image.reshape(*lead, gh, p, gw, p, C)
    x = np.moveaxis(x, -4, -3)  # (..., gh, gw, p, p, C)
    return np.ascontiguousarray(x).reshape(*lead, gh * gw, p * p * C)


def patch_embed(image, cfg: EncoderConfig, params: EncoderParams) -> TokenMatrix:
    """Project flattened patches with the shared filter bank, add positions."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    flat = extract_patches(arr, cfg.p)
    if flat.shape[-2] != cfg.n:
        raise DimensionError(f"image yields {flat.shape[-2]} tokens, config says {cfg.n}")
    tokens = matmul(Tensor(flat), params.embed) + params.pos
    return TokenMatrix(tokens=tokens, depth=0)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return matmul(x, w) + b


def transformer_block(
    t: TokenMatrix,
    blk: BlockParams,
    cfg: EncoderConfig,
    additive_mask: np.ndarray | None = None,
) -> tuple[TokenMatrix, np.ndarray]:
    """One pre-norm residual block; returns the new tokens and the attention weights."""
    x = t.tokens
    normed = layer_norm(x, blk.ln1_g, blk.ln1_b)
    q = _linear(normed, blk.wq, blk.bq)
    k = _linear(normed, blk.wk, blk.bk)
    v = _linear(normed, blk.wv, blk.bv)
    attn_out, weights = scaled_dot_attention(
        q, k, v, cfg.h, cfg.scale, additive_mask=additive_mask
    )
    x = x + _linear(attn_out, blk.wo, blk.bo)
    normed2 = layer_norm(x, blk.ln2_g, blk.ln2_b)
    hidden = _linear(normed2, blk.w1, blk.b1).gelu()
    x = x + _linear(hidden, blk.w2, blk.b2)
    return TokenMatrix(tokens=x, depth=t.depth + 1), weights


def encode(
    image, cfg: EncoderConfig, params: EncoderParams
) -> tuple[TokenMatrix, AttentionRecord]:
    """Full forward pass: patch embedding followed by the L-block stack."""
    t = patch_embed(image, cfg, params)
    record = AttentionRecord()
    for blk in params.blocks:
        t, weights = transformer_block(t, blk, cfg)
        record.per_block.append(weights)
    return t, record


def mean_pool(t: TokenMatrix) -> Tensor:
    """Arithmetic mean over the token axis."""
    return t.tokens.mean(axis=-2)
