"""Attention diagnostics: aggregated column mass, sparsity bins, region maps.

Aggregated attention sums each column of a head-averaged post-softmax n x n
matrix, so the values total n; the three-bin histogram of those values over
many crops is the sparsity profile, with [0.5, 2] as the desired middle bin
(boundaries inclusive on that bin). Representation maps select the matrix
rows of one region, sum down columns, and rescale by n / |region| so uniform
attention maps to a flat 1.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .cell_prior import CellPrior
from .errors import AbsentRegionError, DataError
from .imageio import to_uint8, write_png


@dataclass
class AggregatedAttention:
    values: np.ndarray  # (n,), sums to n


@dataclass
class SparsityProfile:
    low: float  # [0, 0.5)
    desired: float  # [0.5, 2]
    high: float  # (2, inf)
    count: int

    def as_dict(self) -> dict:
        return {
            "bins": {"low": self.low, "desired": self.desired, "high": self.high},
            "token_count": self.count,
        }


def head_average(weights: np.ndarray) -> np.ndarray:
    """(h, n, n) or (n, n) post-softmax weights -> (n, n)."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 3:
        return w.mean(axis=0)
    if w.ndim == 2:
        return w
    raise DataError(f"attention weights must be (h, n, n) or (n, n), got {w.shape}")


def aggregate_attention(record, layer: int = -1) -> AggregatedAttention:
    """Column sums of the head-averaged matrix at one encoder layer."""
    per_block = record.per_block if hasattr(record, "per_block") else record
    matrix = head_average(per_block[layer])
    return AggregatedAttention(values=matrix.sum(axis=0))


def bin_profile(values) -> SparsityProfile:
    """Fractions in [0, 0.5), [0.5, 2], (2, inf)."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise DataError("empty value set for sparsity profile")
    if (v < 0).any():
        raise DataError("aggregated attention values cannot be negative")
    low = float((v < 0.5).mean())
    desired = float(((v >= 0.5) & (v <= 2.0)).mean())
    high = float((v > 2.0).mean())
    return SparsityProfile(low=low, desired=desired, high=high, count=int(v.size))


_REGION_OF = {"c": 1, "b": 0, "cc": 1, "bb": 0, "cb": 1, "bc": 0}


def representation_attention(weights: np.ndarray, prior: CellPrior, which: str) -> np.ndarray:
    """Region-row column sums of the given attention matrix, scaled by n/|region|.

    `weights` must already be the matrix of the path that `which` refers to:
    the plain encoder layer for c/b, the self-masked block for cc/bb, the
    cross-masked block for cb/bc.
    """
    if which not in _REGION_OF:
        raise DataError(f"unknown representation {which!r}, expected one of {sorted(_REGION_OF)}")
    matrix = head_average(weights)
    n = matrix.shape[0]
    if prior.n != n:
        raise DataError(f"prior length {prior.n} != token count {n}")
    sel = prior.bits == (1.0 if _REGION_OF[which] else 0.0)
    n_sel = int(sel.sum())
    if n_sel == 0:
        raise AbsentRegionError(f"no tokens in the {which!r} region for this crop")
    return matrix[sel].sum(axis=0) * (n / n_sel)


def save_map_csv(path, values: np.ndarray, grid_w: int) -> None:
    """Raw (unclipped) map as a grid CSV with full float64 precision."""
    v = np.asarray(values, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in v.reshape(-1, grid_w):
            writer.writerow([repr(float(x)) for x in row])


def load_map_csv(path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if row:
                rows.append([float(x) for x in row])
    if not rows:
        raise DataError(f"{path}: empty map file")
    return np.asarray(rows, dtype=np.float64).reshape(-1)


def export_overlay(image: np.ndarray, values: np.ndarray, png_path, csv_path) -> None:
    """Clipped per-patch heat over the grayscale image, plus the raw CSV.

    Values are clipped to [0, 1] for rendering only; zero map means the
    output is exactly the grayscale image.
    """
    h, w = image.shape[:2]
    n = values.size
    grid = int(round(np.sqrt(n)))
    if grid * grid != n or h % grid or w % grid:
        raise DataError(f"map of {n} patches does not tile a {h}x{w} image")
    save_map_csv(csv_path, values, grid)

    heat = np.clip(values, 0.0, 1.0).reshape(grid, grid)
    heat = np.repeat(np.repeat(heat, h // grid, axis=0), w // grid, axis=1)
    gray = image.mean(axis=2) if image.ndim == 3 else image
    out = np.empty((h, w, 3))
    alpha = 0.5 * heat
    out[:, :, 0] = gray * (1.0 - alpha) + alpha  # heat drawn in red
    out[:, :, 1] = gray * (1.0 - alpha)
    out[:, :, 2] = gray * (1.0 - alpha)
    write_png(png_path, to_uint8(out))
