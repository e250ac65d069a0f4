"""Synthetic tissue-like crops with planted cell centroids.

Each crop is a bright low-frequency value-noise background with dark
Gaussian-profile blobs at sampled centroid positions. Bag classes differ in
cell density and spatial clustering, so bag labels are learnable from crop
features while every centroid position stays known exactly. Generation is a
pure function of (config, seed): each crop derives its own RNG stream from
(master seed, bag index, crop index), so parallel generation cannot change
outputs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cell_prior import CentroidMap, load_centroids, save_centroids
from .config import per_class_floats
from .errors import ConfigError, DataError
from .imageio import read_png, to_uint8, write_png


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 32
    bag_classes: int = 2
    cell_types: int = 2
    radius_min: float = 1.2
    radius_max: float = 2.5
    texture_amp: float = 0.8
    densities: tuple[float, ...] = (10.0, 18.0)  # Poisson mean per bag class
    clusterings: tuple[float, ...] = (0.0, 0.8)  # 0 uniform, 1 tight clusters

    def __post_init__(self):
        if self.cell_types < 1:
            raise ConfigError("need at least one cell type")
        if any(d <= 0 for d in self.densities):
            raise ConfigError("densities must be positive")
        if len(self.densities) != self.bag_classes or len(self.clusterings) != self.bag_classes:
            raise ConfigError("densities/clusterings must list one value per bag class")

    @staticmethod
    def from_flat(cfg: dict) -> "SynthConfig":
        classes = int(cfg["synth.bag_classes"])
        return SynthConfig(
            image_size=int(cfg["synth.image_size"]),
            bag_classes=classes,
            cell_types=int(cfg["synth.cell_types"]),
            radius_min=float(cfg["synth.radius_min"]),
            radius_max=float(cfg["synth.radius_max"]),
            texture_amp=float(cfg["synth.texture_amp"]),
            densities=tuple(per_class_floats(cfg, "synth.densities", classes)),
            clusterings=tuple(per_class_floats(cfg, "synth.clusterings", classes)),
        )


def _value_noise(size: int, amp: float, rng: np.random.Generator) -> np.ndarray:
    """Bright background: coarse random grid upsampled bilinearly."""
    coarse = rng.uniform(-1.0, 1.0, size=(4, 4))
    from .ssl.augment import resize_bilinear

    field_ = resize_bilinear(coarse[:, :, None], size, size)[:, :, 0]
    return 0.82 + amp * field_


def _sample_positions(
    k: int, size: int, clustering: float, rng: np.random.Generator
) -> np.ndarray:
    if clustering <= 0.0:
        return rng.uniform(0, size, size=(k, 2))
    n_parents = max(1, int(round((1.0 - clustering) * k)))
    parents = rng.uniform(0, size, size=(n_parents, 2))
    sigma = max(1.0, (1.0 - clustering) * size / 4.0)
    assign = rng.integers(0, n_parents, size=k)
    pts = parents[assign] + rng.normal(0.0, sigma, size=(k, 2))
    return np.clip(pts, 0, size - 1e-9)


def generate_crop(
    cfg: SynthConfig, bag_class: int, rng: np.random.Generator
) -> tuple[np.ndarray, CentroidMap]:
    """One crop image in [0,1] plus the exact planted centroid map."""
    size = cfg.image_size
    img = _value_noise(size, cfg.texture_amp, rng)
    k = max(1, int(rng.poisson(cfg.densities[bag_class])))
    pts = _sample_positions(k, size, cfg.clusterings[bag_class], rng)
    yy, xx = np.mgrid[0:size, 0:size]
    centroids: list[tuple[int, int, int]] = []
    for px, py in pts:
        ctype = int(rng.integers(0, cfg.cell_types))
        radius = rng.uniform(cfg.radius_min, cfg.radius_max)
        # darker, slightly larger blobs for higher-index types
        depth = 0.45 + 0.2 * (ctype / max(cfg.cell_types - 1, 1))
        sigma = radius * (1.0 + 0.15 * ctype) / 2.0
        img = img - depth * np.exp(-((xx - px) ** 2 + (yy - py) ** 2) / (2.0 * sigma**2))
        centroids.append((min(int(px), size - 1), min(int(py), size - 1), ctype))
    img = np.clip(img, 0.0, 1.0)
    return np.repeat(img[:, :, None], 3, axis=2), CentroidMap(size, size, centroids)


@dataclass
class CropRecord:
    bag_id: str
    label: int
    image_path: Path
    centroid_path: Path


@dataclass
class CropDataset:
    root: Path
    image_size: int
    records: list[CropRecord] = field(default_factory=list)

    def bag_labels(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.records:
            out[r.bag_id] = r.label
        return out

    def load_crop(self, record: CropRecord) -> tuple[np.ndarray, CentroidMap]:
        img = read_png(record.image_path)
        cm = load_centroids(record.centroid_path, img.shape[1], img.shape[0])
        return img, cm


def crop_rng(master_seed: int, bag_index: int, crop_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((master_seed, bag_index, crop_index)))


def generate_dataset(
    cfg: SynthConfig,
    crops_per_bag: int,
    bags_per_class: int,
    out_root,
    seed: int,
    force: bool = False,
) -> CropDataset:
    """Write crops/, centroids/ and manifest.csv under `out_root`."""
    root = Path(out_root)
    if root.exists() and any(root.iterdir()) and not force:
        raise DataError(f"{root}: output directory not empty (use force to overwrite)")
    (root / "crops").mkdir(parents=True, exist_ok=True)
    (root / "centroids").mkdir(parents=True, exist_ok=True)

    records: list[CropRecord] = []
    manifest_rows: list[tuple[str, int]] = []
    bag_index = 0
    for label in range(cfg.bag_classes):
        for b in range(bags_per_class):
            bag_id = f"bag{label}_{b:03d}"
            crop_dir = root / "crops" / bag_id
            cent_dir = root / "centroids" / bag_id
            crop_dir.mkdir(exist_ok=True)
            cent_dir.mkdir(exist_ok=True)
            for c in range(crops_per_bag):
                rng = crop_rng(seed, bag_index, c)
                img, cm = generate_crop(cfg, label, rng)
                img_path = crop_dir / f"{c:03d}.png"
                cent_path = cent_dir / f"{c:03d}.csv"
                write_png(img_path, to_uint8(img))
                save_centroids(cent_path, cm)
                records.append(CropRecord(bag_id, label, img_path, cent_path))
            manifest_rows.append((bag_id, label))
            bag_index += 1

    with open(root / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bag_id", "label"])
        for bag_id, label in manifest_rows:
            writer.writerow([bag_id, label])
    return CropDataset(root=root, image_size=cfg.image_size, records=records)


def read_manifest(path) -> list[tuple[str, int]]:
    rows: list[tuple[str, int]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["bag_id", "label"]:
            raise DataError(f"{path}: expected header bag_id,label, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                bag_id, label = row[0], int(row[1])
            except (IndexError, ValueError):
                raise DataError(f"{path}:{lineno}: malformed manifest row {row!r}")
            rows.append((bag_id, label))
    return rows


def load_dataset(root) -> CropDataset:
    """Open a generated dataset directory and index its crops."""
    root = Path(root)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise DataError(f"{root}: no manifest.csv (not a dataset directory?)")
    records: list[CropRecord] = []
    image_size = None
    for bag_id, label in read_manifest(manifest):
        crop_dir = root / "crops" / bag_id
        if not crop_dir.is_dir():
            raise DataError(f"{root}: manifest lists {bag_id} but {crop_dir} is missing")
        for img_path in sorted(crop_dir.glob("*.png")):
            cent_path = root / "centroids" / bag_id / (img_path.stem + ".csv")
            if not cent_path.exists():
                raise DataError(f"{cent_path}: centroid file missing for {img_path}")
            records.append(CropRecord(bag_id, label, img_path, cent_path))
    if not records:
        raise DataError(f"{root}: dataset contains no crops")
    first = read_png(records[0].image_path)
    image_size = first.shape[0]
    return CropDataset(root=root, image_size=image_size, records=records)
