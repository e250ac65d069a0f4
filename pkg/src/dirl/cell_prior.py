"""Patch-level binary priors derived from cell-centroid annotations.

A centroid map lists point annotations on an image; max-pooling them onto the
patch grid yields a binary vector marking which tokens contain at least one
cell. Multi-class variants keep one prior per cell class plus a background
prior for tokens containing no cells at all. Priors must follow the image
through geometric augmentation, so the same crop/resize/flip chain applied to
a view can be applied to its centroids.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError


@dataclass(frozen=True)
class ViewGeometry:
    """Crop rectangle, resize target, and flips, applied in that order.

    The crop is [x0, x0+crop_w) x [y0, y0+crop_h) in source pixels.
    """

    crop_x: int
    crop_y: int
    crop_w: int
    crop_h: int
    out_w: int
    out_h: int
    flip_h: bool = False

    def __post_init__(self):
        if self.crop_w <= 0 or self.crop_h <= 0:
            raise ConfigError(f"empty crop rect {self.crop_w}x{self.crop_h}")

    @staticmethod
    def identity(w: int, h: int) -> "ViewGeometry":
        return ViewGeometry(0, 0, w, h, w, h)


@dataclass
class CentroidMap:
    """Point annotations on one image: (x, y, class_id) in pixel coordinates."""

    image_w: int
    image_h: int
    centroids: list[tuple[int, int, int]] = field(default_factory=list)

    def __post_init__(self):
        for x, y, _ in self.centroids:
            if not (0 <= x < self.image_w and 0 <= y < self.image_h):
                raise DataError(
                    f"centroid ({x},{y}) outside {self.image_w}x{self.image_h} image"
                )


@dataclass
class CellPrior:
    """Binary per-token vector: 1 where the patch holds at least one centroid."""

    n: int
    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.float64)
        if self.bits.shape != (self.n,):
            raise ConfigError(f"prior length {self.bits.shape} != ({self.n},)")
        if not np.isin(self.bits, (0.0, 1.0)).all():
            raise DataError("prior bits must be 0 or 1")


@dataclass
class ClassPriorSet:
    class_priors: list[CellPrior]
    background: CellPrior


@dataclass
class CellCountTarget:
    counts: np.ndarray  # length n, non-negative ints


def _grid(cm: CentroidMap, p: int) -> tuple[int, int]:
    if cm.image_w % p or cm.image_h % p:
        raise ConfigError(
            f"image {cm.image_w}x{cm.image_h} not divisible by patch size {p}"
        )
    return cm.image_w // p, cm.image_h // p


def _patch_index(x: float, y: float, p: int, gw: int) -> int:
    return int(y // p) * gw + int(x // p)


def build_cell_counts(cm: CentroidMap, p: int) -> CellCountTarget:
    """Count centroids per patch, row-major over the patch grid."""
    gw, gh = _grid(cm, p)
    counts = np.zeros(gw * gh, dtype=np.int64)
    for x, y, _ in cm.centroids:
        counts[_patch_index(x, y, p, gw)] += 1
    return CellCountTarget(counts=counts)


def build_cell_prior(cm: CentroidMap, p: int) -> CellPrior:
    """Max-pool the centroid map onto the patch grid: any centroid sets the bit."""
    counts = build_cell_counts(cm, p).counts
    return CellPrior(n=counts.size, bits=(counts > 0).astype(np.float64))


def build_class_priors(cm: CentroidMap, p: int, J: int) -> ClassPriorSet:
    """One prior per cell class, plus the background complement.

    Class priors may overlap (two classes in the same patch both set their
    bit); the background bit is set only where no class claims the patch.
    """
    for x, y, c in cm.centroids:
        if not (0 <= c < J):
            raise DataError(f"centroid ({x},{y}) has class_id {c}, expected < {J}")
    priors = []
    for j in range(J):
        sub = CentroidMap(
            cm.image_w, cm.image_h, [c for c in cm.centroids if c[2] == j]
        )
        priors.append(build_cell_prior(sub, p))
    union = np.zeros_like(priors[0].bits) if priors else None
    if union is None:
        raise ConfigError("class prior set needs J >= 1")
    for pr in priors:
        union = np.maximum(union, pr.bits)
    background = CellPrior(n=priors[0].n, bits=1.0 - union)
    return ClassPriorSet(class_priors=priors, background=background)


def transform_centroids(cm: CentroidMap, geom: ViewGeometry) -> CentroidMap:
    """Carry centroids through the crop -> resize -> flip chain of a view.

    Centroids outside the crop are dropped silently (a view may legitimately
    contain no cells). Resize maps coordinates by scale then round-half-up,
    clamped into the output frame.
    """
    sx = geom.out_w / geom.crop_w
    sy = geom.out_h / geom.crop_h
    moved: list[tuple[int, int, int]] = []
    for x, y, c in cm.centroids:
        lx = x - geom.crop_x
        ly = y - geom.crop_y
        if not (0 <= lx < geom.crop_w and 0 <= ly < geom.crop_h):
            continue
        nx = min(int(np.floor(lx * sx + 0.5)), geom.out_w - 1)
        ny = min(int(np.floor(ly * sy + 0.5)), geom.out_h - 1)
        if geom.flip_h:
            nx = geom.out_w - 1 - nx
        moved.append((nx, ny, c))
    return CentroidMap(image_w=geom.out_w, image_h=geom.out_h, centroids=moved)


def load_centroids(path, image_w: int, image_h: int) -> CentroidMap:
    """Read a `x,y,class_id` CSV (with that exact header) into a CentroidMap."""
    rows: list[tuple[int, int, int]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["x", "y", "class_id"]:
            raise DataError(f"{path}: expected header x,y,class_id, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                x, y, c = (int(v) for v in row)
            except (ValueError, TypeError):
                raise DataError(f"{path}:{lineno}: malformed centroid row {row!r}")
            rows.append((x, y, c))
    return CentroidMap(image_w=image_w, image_h=image_h, centroids=rows)


def save_centroids(path, cm: CentroidMap) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "class_id"])
        for x, y, c in cm.centroids:
            writer.writerow([x, y, c])
