"""Paired-view augmentation with centroid-consistent geometry.

Two views per image: a square random resized crop, an optional horizontal
flip, and per-view brightness/contrast jitter. The geometric half of the
chain is mirrored onto the centroid annotations so each view keeps a correct
cell prior; jitter touches pixels only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..cell_prior import CentroidMap, ViewGeometry, transform_centroids
from ..errors import ConfigError


@dataclass(frozen=True)
class AugmentConfig:
    crop_scale_min: float = 0.6
    crop_scale_max: float = 1.0
    flip_prob: float = 0.5
    jitter: float = 0.2  # brightness shift and contrast range, 0 disables

    def __post_init__(self):
        if not (0.0 < self.crop_scale_min <= self.crop_scale_max <= 1.0):
            raise ConfigError(
                f"crop scale range ({self.crop_scale_min}, {self.crop_scale_max}) "
                f"must sit inside (0, 1]"
            )


@dataclass
class ViewPair:
    images: np.ndarray  # (2, H, W, C)
    maps: tuple[CentroidMap, CentroidMap]
    geoms: tuple[ViewGeometry, ViewGeometry]


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain bilinear resample of an (H, W, C) image, edge-clamped."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def _sample_geometry(
    h: int, w: int, cfg: AugmentConfig, rng: np.random.Generator
) -> ViewGeometry:
    scale = rng.uniform(cfg.crop_scale_min, cfg.crop_scale_max)
    side = max(1, int(round(np.sqrt(scale) * min(h, w))))
    cx = int(rng.integers(0, w - side + 1))
    cy = int(rng.integers(0, h - side + 1))
    flip = bool(rng.random() < cfg.flip_prob)
    return ViewGeometry(cx, cy, side, side, w, h, flip_h=flip)


def apply_geometry(img: np.ndarray, geom: ViewGeometry) -> np.ndarray:
    crop = img[geom.crop_y : geom.crop_y + geom.crop_h, geom.crop_x : geom.crop_x + geom.crop_w]
    out = resize_bilinear(crop, geom.out_h, geom.out_w)
    if geom.flip_h:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def _jitter(img: np.ndarray, amp: float, rng: np.random.Generator) -> np.ndarray:
    if amp == 0.0:
        return img
    shift = rng.uniform(-amp, amp)
    contrast = rng.uniform(1.0 - amp, 1.0 + amp)
    mean = img.mean()
    return np.clip((img - mean) * contrast + mean + shift, 0.0, 1.0)


def make_views(
    image: np.ndarray, cm: CentroidMap, cfg: AugmentConfig, rng: np.random.Generator
) -> ViewPair:
    """Two independently augmented views plus their transformed centroid maps."""
    h, w = image.shape[:2]
    views = []
    maps = []
    geoms = []
    for _ in range(2):
        geom = _sample_geometry(h, w, cfg, rng)
        view = _jitter(apply_geometry(image, geom), cfg.jitter, rng)
        views.append(view)
        maps.append(transform_centroids(cm, geom))
        geoms.append(geom)
    return ViewPair(
        images=np.stack(views), maps=(maps[0], maps[1]), geoms=(geoms[0], geoms[1])
    )
