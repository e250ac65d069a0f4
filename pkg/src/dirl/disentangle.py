"""Region-masked token mixing and region pooling.

Given a binary cell prior over tokens, two additive attention masks restrict
mixing: the self mask lets a token attend only within its own region (cell to
cell, background to background), the cross mask only across regions plus its
own diagonal. A single extra pre-norm block run once per mask over the
encoder's final tokens yields two token matrices, and region-subset means of
those give the four disentangled representations. The pooling and the block
are also where empty regions surface: a view with no cell tokens simply has
no cell-side representations, flagged absent rather than NaN.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cell_prior import CellPrior
from .encoder import BlockParams, EncoderConfig, TokenMatrix, transformer_block
from .errors import DimensionError
from .numerics import Tensor


@dataclass
class AttentionMaskPair:
    """Additive {0, -inf} masks; zero means the position may attend."""

    m_self: np.ndarray
    m_cross: np.ndarray


@dataclass
class PooledFeature:
    """A pooled vector plus a presence flag; empty regions stay absent."""

    value: Tensor | None
    present: bool

    @staticmethod
    def absent() -> "PooledFeature":
        return PooledFeature(value=None, present=False)


@dataclass
class RepresentationSet:
    """Everything a variant may pool from one view: image-level f, region
    means f_c / f_b, and the four masked-path representations."""

    f: PooledFeature
    f_c: PooledFeature = None
    f_b: PooledFeature = None
    f_cc: PooledFeature = None
    f_bb: PooledFeature = None
    f_cb: PooledFeature = None
    f_bc: PooledFeature = None
    class_region: list[PooledFeature] = None  # per-class means, multi-prior variant

    def __post_init__(self):
        for name in ("f_c", "f_b", "f_cc", "f_bb", "f_cb", "f_bc"):
            if getattr(self, name) is None:
                setattr(self, name, PooledFeature.absent())
        if self.class_region is None:
            self.class_region = []


def build_masks(prior: CellPrior) -> AttentionMaskPair:
    """Masks from a binary prior: same-region pairs for self, different-region
    pairs or the diagonal for cross."""
    bits = prior.bits
    same = bits[:, None] == bits[None, :]
    eye = np.eye(prior.n, dtype=bool)
    neg = -np.inf
    m_self = np.where(same, 0.0, neg)
    m_cross = np.where(~same | eye, 0.0, neg)
    return AttentionMaskPair(m_self=m_self, m_cross=m_cross)


def masked_msa(
    t: TokenMatrix, mask: np.ndarray, blk: BlockParams, cfg: EncoderConfig
) -> tuple[TokenMatrix, np.ndarray]:
    """A full pre-norm block whose attention honors the additive mask."""
    return transformer_block(t, blk, cfg, additive_mask=mask)


def disentangle_block(
    t_last: TokenMatrix,
    prior: CellPrior,
    cfg: EncoderConfig,
    self_params: BlockParams,
    cross_params: BlockParams | None = None,
) -> tuple[TokenMatrix, TokenMatrix, np.ndarray, np.ndarray]:
    """Run the masked block once per mask over the same input tokens.

    With `cross_params` omitted the two paths share parameters. Returns both
    token matrices and their post-softmax attention weights.
    """
    masks = build_masks(prior)
    t_self, w_self = masked_msa(t_last, masks.m_self, self_params, cfg)
    t_cross, w_cross = masked_msa(
        t_last, masks.m_cross, cross_params or self_params, cfg
    )
    return t_self, t_cross, w_self, w_cross


def region_pool(t: TokenMatrix, weights: np.ndarray) -> PooledFeature:
    """Mean of token rows selected by a binary weight vector.

    An all-zero selection yields an absent feature. Batched token matrices
    pool per batch element over the token axis.
    """
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total == 0.0:
        return PooledFeature.absent()
    if t.tokens.shape[-2] != w.shape[0]:
        raise DimensionError(
            f"prior length {w.shape[0]} != token count {t.tokens.shape[-2]}"
        )
    picked = (t.tokens * w[:, None]).sum(axis=-2) * (1.0 / total)
    return PooledFeature(value=picked, present=True)


def cell_back_pool(t: TokenMatrix, prior: CellPrior) -> tuple[PooledFeature, PooledFeature]:
    """Mean over cell tokens and mean over background tokens."""
    return region_pool(t, prior.bits), region_pool(t, 1.0 - prior.bits)


def disentangled_pool(
    t_self: TokenMatrix, t_cross: TokenMatrix, prior: CellPrior
) -> tuple[PooledFeature, PooledFeature, PooledFeature, PooledFeature]:
    """f_cc, f_bb from the self path; f_cb, f_bc from the cross path."""
    f_cc, f_bb = cell_back_pool(t_self, prior)
    f_cb, f_bc = cell_back_pool(t_cross, prior)
    return f_cc, f_bb, f_cb, f_bc
