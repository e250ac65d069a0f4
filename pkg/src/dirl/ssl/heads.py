"""Projection heads mapping pooled representations onto prototype logits.

Each head is a 3-layer GELU MLP down to a bottleneck, an l2 normalization,
and a weight-normalized prototype layer whose per-prototype gain is frozen at
1, so logits are cosine similarities against K learned directions. Region
level heads (whole image, cell, background, per-class) use a larger K than
the four disentangled-path heads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..encoder import trunc_normal
from ..errors import ConfigError
from ..numerics import Tensor, matmul, parameter

_L2_EPS = 1e-12


@dataclass(frozen=True)
class HeadConfig:
    in_dim: int
    hidden: int = 128
    bottleneck: int = 32
    k: int = 256

    def __post_init__(self):
        if self.k <= 1:
            raise ConfigError(f"head needs K > 1 prototypes, got {self.k}")


@dataclass
class ProjectionHead:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor
    protos: Tensor  # (bottleneck, K), normalized per column on every forward

    def forward(self, x: Tensor) -> Tensor:
        """(..., in_dim) -> (..., K) cosine logits."""
        h = (matmul(x, self.w1) + self.b1).gelu()
        h = (matmul(h, self.w2) + self.b2).gelu()
        z = matmul(h, self.w3) + self.b3
        z = z / ((z * z).sum(axis=-1, keepdims=True) + _L2_EPS).sqrt()
        col_norm = ((self.protos * self.protos).sum(axis=0, keepdims=True) + _L2_EPS).sqrt()
        return matmul(z, self.protos / col_norm)

    def named(self, prefix: str):
        for name in ("w1", "b1", "w2", "b2", "w3", "b3", "protos"):
            yield f"{prefix}.{name}", getattr(self, name)

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named("")]


def init_head(cfg: HeadConfig, rng: np.random.Generator, prefix: str = "head") -> ProjectionHead:
    def w(name, shape):
        return parameter(trunc_normal(rng, shape), name=f"{prefix}.{name}")

    def zeros(name, dim):
        return parameter(np.zeros(dim), name=f"{prefix}.{name}")

    return ProjectionHead(
        w1=w("w1", (cfg.in_dim, cfg.hidden)), b1=zeros("b1", cfg.hidden),
        w2=w("w2", (cfg.hidden, cfg.hidden)), b2=zeros("b2", cfg.hidden),
        w3=w("w3", (cfg.hidden, cfg.bottleneck)), b3=zeros("b3", cfg.bottleneck),
        protos=w("protos", (cfg.bottleneck, cfg.k)),
    )


# which pooled representation each pretraining variant matches, in loss order
VARIANT_TERMS = {
    "baseline": ("image",),
    "cellback": ("cell", "back"),
    "cellback-v2": ("image", "back"),  # per-class terms appended at build time
    "dirl": ("cell", "back", "cc", "bb", "cb", "bc"),
}
DISENTANGLED_TERMS = ("cc", "bb", "cb", "bc")


@dataclass
class HeadBank:
    heads: dict[str, ProjectionHead]

    def __getitem__(self, term: str) -> ProjectionHead:
        return self.heads[term]

    def __contains__(self, term: str) -> bool:
        return term in self.heads

    def term_names(self) -> list[str]:
        return list(self.heads.keys())

    def named(self, prefix: str = "heads"):
        for term, head in self.heads.items():
            yield from head.named(f"{prefix}.{term}")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named()]


def variant_terms(variant: str, cell_classes: int = 0) -> list[str]:
    if variant not in VARIANT_TERMS:
        raise ConfigError(
            f"unknown variant {variant!r}, expected one of {sorted(VARIANT_TERMS)}"
        )
    terms = list(VARIANT_TERMS[variant])
    if variant == "cellback-v2":
        if cell_classes < 1:
            raise ConfigError("cellback-v2 needs at least one cell class")
        terms += [f"class_{j}" for j in range(cell_classes)]
    return terms


def build_head_bank(
    variant: str,
    in_dim: int,
    rng: np.random.Generator,
    k_region: int = 256,
    k_dis: int = 64,
    hidden: int = 128,
    bottleneck: int = 32,
    cell_classes: int = 0,
) -> HeadBank:
    """One projection head per loss term of the chosen variant."""
    heads: dict[str, ProjectionHead] = {}
    for term in variant_terms(variant, cell_classes):
        k = k_dis if term in DISENTANGLED_TERMS else k_region
        cfg = HeadConfig(in_dim=in_dim, hidden=hidden, bottleneck=bottleneck, k=k)
        heads[term] = init_head(cfg, rng, prefix=f"heads.{term}")
    return HeadBank(heads=heads)
