"""Student/teacher distillation losses and the momentum plumbing around them.

The teacher's logits are centered, sharpened with a low temperature, and
treated as constants; the student's are softened with a higher temperature
and trained to match via cross-entropy, symmetrized over the two views. The
composite loss runs one such pair loss per pooled representation of the
active variant, with fixed weights that are never renormalized when a term
is skipped for an empty region.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..disentangle import RepresentationSet
from ..errors import CheckpointError, ConfigError, NoSignalError
from ..numerics import Tensor, log_softmax_rows, softmax_rows
from .heads import HeadBank, variant_terms


@dataclass(frozen=True)
class LossWeights:
    lam1: float = 0.5
    lam2: float = 0.025  # per disentangled term: 0.1 split across the four
    aux_weight: float = 0.0

    def __post_init__(self):
        if self.lam1 < 0 or self.lam2 < 0 or self.aux_weight < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.lam1 == 0 and self.lam2 == 0 and self.aux_weight == 0:
            raise ConfigError("at least one loss weight must be positive")


def term_weight(variant: str, term: str, weights: LossWeights, n_terms: int) -> float:
    """Fixed per-term weight under each variant's weighting scheme."""
    if variant == "baseline":
        return 1.0
    if variant == "cellback":
        return weights.lam1
    if variant == "cellback-v2":
        return 1.0 / n_terms  # equal weightage across region + crop terms
    if variant == "dirl":
        return weights.lam1 if term in ("cell", "back") else weights.lam2
    raise ConfigError(f"unknown variant {variant!r}")


_TERM_MEMBER = {
    "image": "f",
    "cell": "f_c",
    "back": "f_b",
    "cc": "f_cc",
    "bb": "f_bb",
    "cb": "f_cb",
    "bc": "f_bc",
}


def rep_member(reps: RepresentationSet, term: str):
    if term.startswith("class_"):
        idx = int(term.split("_", 1)[1])
        if idx >= len(reps.class_region):
            raise ConfigError(f"representation set has no class region {idx}")
        return reps.class_region[idx]
    return getattr(reps, _TERM_MEMBER[term])


def sharpen_and_center(logits, temp: float, center: np.ndarray | None = None) -> Tensor:
    """softmax((logits - center) / temp); centering is the teacher-only part."""
    if temp <= 0:
        raise ConfigError(f"temperature must be positive, got {temp}")
    t = logits if isinstance(logits, Tensor) else Tensor(np.asarray(logits, dtype=np.float64))
    if center is not None:
        t = t - Tensor(center)
    return softmax_rows(t * (1.0 / temp))


def cross_entropy_term(
    student_logits: Tensor,
    teacher_logits: np.ndarray,
    temp_s: float,
    temp_t: float,
    center: np.ndarray | None,
) -> Tensor:
    """-sum p_teacher * log p_student over the last axis, teacher constant."""
    z = teacher_logits if center is None else teacher_logits - center
    z = z / temp_t
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p_t = e / e.sum(axis=-1, keepdims=True)
    log_p_s = log_softmax_rows(student_logits * (1.0 / temp_s))
    return -(log_p_s * Tensor(p_t)).sum(axis=-1)


def dino_pair_loss(
    s1: Tensor,
    s2: Tensor,
    t1: np.ndarray,
    t2: np.ndarray,
    temp_s: float,
    temp_t: float,
    center: np.ndarray | None = None,
) -> Tensor:
    """Each view's teacher output teaches the other view's student output."""
    a = cross_entropy_term(s2, t1, temp_s, temp_t, center)
    b = cross_entropy_term(s1, t2, temp_s, temp_t, center)
    return (a + b) * 0.5


@dataclass
class LossReport:
    total: float = 0.0
    terms: dict[str, float] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)


def composite_loss(
    student_pair: tuple[RepresentationSet, RepresentationSet],
    teacher_pair: tuple[RepresentationSet, RepresentationSet],
    student_bank: HeadBank,
    teacher_bank: HeadBank,
    centers: dict[str, np.ndarray],
    weights: LossWeights,
    variant: str,
    temp_s: float = 0.1,
    temp_t: float = 0.04,
) -> tuple[Tensor, LossReport]:
    """Weighted sum of per-representation pair losses for one sample.

    A term whose representation is absent in either view is skipped and
    recorded; remaining weights stay as-is. A sample with every term absent
    has no training signal at all and raises NoSignalError.
    """
    s1, s2 = student_pair
    t1, t2 = teacher_pair
    n_classes = len(s1.class_region)
    terms = variant_terms(variant, cell_classes=n_classes)
    report = LossReport()
    total: Tensor | None = None
    for term in terms:
        members = (
            rep_member(s1, term), rep_member(s2, term),
            rep_member(t1, term), rep_member(t2, term),
        )
        if not all(m.present for m in members):
            report.skipped.append(term)
            continue
        sl1 = student_bank[term].forward(members[0].value)
        sl2 = student_bank[term].forward(members[1].value)
        tl1 = teacher_bank[term].forward(members[2].value).data
        tl2 = teacher_bank[term].forward(members[3].value).data
        pair = dino_pair_loss(
            sl1, sl2, tl1, tl2, temp_s, temp_t, centers.get(term)
        )
        weighted = pair * term_weight(variant, term, weights, len(terms))
        report.terms[term] = float(pair.data)
        total = weighted if total is None else total + weighted
    if total is None:
        raise NoSignalError(
            f"every loss term of variant {variant!r} was absent for this sample"
        )
    report.total = float(total.data)
    return total, report


def aux_cell_count_loss(tokens: Tensor, counts: np.ndarray, w: Tensor, b: Tensor) -> Tensor:
    """Mean squared error of a per-token linear count prediction."""
    from ..numerics import matmul

    pred = (matmul(tokens, w) + b).reshape(*tokens.shape[:-1])
    diff = pred - Tensor(np.asarray(counts, dtype=np.float64))
    return (diff * diff).mean()


def ema_update(teacher_params: list[Tensor], student_params: list[Tensor], m: float) -> None:
    """teacher <- m * teacher + (1 - m) * student, elementwise and in place."""
    if len(teacher_params) != len(student_params):
        raise CheckpointError(
            f"parameter count mismatch: teacher {len(teacher_params)}, "
            f"student {len(student_params)}"
        )
    for t, s in zip(teacher_params, student_params):
        if t.data.shape != s.data.shape:
            raise CheckpointError(
                f"shape mismatch in momentum update: {t.data.shape} vs {s.data.shape}"
            )
        t.data *= m
        t.data += (1.0 - m) * s.data


def center_update(center: np.ndarray, teacher_logits: np.ndarray, momentum: float) -> np.ndarray:
    """Running mean of teacher logits; empty batches leave the center alone."""
    rows = np.asarray(teacher_logits, dtype=np.float64).reshape(-1, center.shape[-1])
    if rows.shape[0] == 0:
        return center.copy()
    return momentum * center + (1.0 - momentum) * rows.mean(axis=0)
