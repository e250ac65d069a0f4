from .augment import AugmentConfig, ViewPair, make_views, resize_bilinear
from .distill import (
    LossWeights,
    aux_cell_count_loss,
    center_update,
    composite_loss,
    cross_entropy_term,
    dino_pair_loss,
    ema_update,
    sharpen_and_center,
)
from .heads import HeadBank, HeadConfig, ProjectionHead, build_head_bank, init_head
from .optim import AdamW, cosine_values

__all__ = [
    "AdamW",
    "AugmentConfig",
    "HeadBank",
    "HeadConfig",
    "LossWeights",
    "ProjectionHead",
    "ViewPair",
    "aux_cell_count_loss",
    "build_head_bank",
    "center_update",
    "composite_loss",
    "cosine_values",
    "cross_entropy_term",
    "dino_pair_loss",
    "ema_update",
    "init_head",
    "make_views",
    "resize_bilinear",
    "sharpen_and_center",
]
