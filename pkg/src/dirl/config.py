"""Flat `key = value` run configuration with namespaced keys and full defaults.

Every tunable has a default here; a config file only overrides. Unknown keys
are rejected rather than ignored so typos cannot silently change a run.
Lines starting with `#` and blank lines are skipped.
"""

from __future__ import annotations

from .encoder import EncoderConfig
from .errors import ConfigError

DEFAULTS: dict[str, object] = {
    # data / tokenization
    "data.image_size": 32,
    "encoder.p": 8,
    "encoder.d": 32,
    "encoder.L": 3,
    "encoder.h": 4,
    "encoder.mlp_ratio": 4,
    "encoder.attn_scale": "head",
    # disentangle block
    "disentangle.shared_params": True,
    # self-distillation
    "ssl.temp_student": 0.1,
    "ssl.temp_teacher": 0.04,
    "ssl.center_momentum": 0.9,
    "ssl.momentum_base": 0.996,
    "ssl.momentum_final": 1.0,
    "ssl.lr": 5e-4,  # scaled by batch_size / 256 at runtime
    "ssl.weight_decay": 0.04,
    "ssl.warmup_epochs": 10,
    "ssl.epochs": 30,
    "ssl.batch_size": 16,
    "ssl.k_region": 256,
    "ssl.k_dis": 64,
    "ssl.head_hidden": 128,
    "ssl.head_bottleneck": 32,
    "ssl.lambda1": 0.5,
    "ssl.lambda2": 0.025,
    "ssl.aux_weight": 0.1,  # used only when the aux count task is enabled
    "ssl.checkpoint_every": 10,
    # augmentation
    "aug.crop_scale_min": 0.6,
    "aug.crop_scale_max": 1.0,
    "aug.flip_prob": 0.5,
    "aug.jitter": 0.2,
    # synthetic data
    "synth.image_size": 32,
    "synth.bag_classes": 2,
    "synth.cell_types": 2,
    "synth.bags_per_class": 50,
    "synth.crops_per_bag": 16,
    "synth.radius_min": 1.2,
    "synth.radius_max": 2.5,
    "synth.texture_amp": 0.8,
    "synth.densities": "10,18",  # Poisson mean cells/crop, one per bag class
    "synth.clusterings": "0.0,0.8",  # 0 = uniform scatter, 1 = tight clusters
    # downstream MIL
    "mil.lr": 2e-4,
    "mil.weight_decay": 0.05,
    "mil.epochs": 50,
    "mil.seeds": 5,
    "mil.val_fraction": 0.2,
    "mil.test_fraction": 0.3,
    "mil.query_dim": 32,
    # attention analysis
    "analyze.layer": -1,
}


def _parse_value(key: str, raw: str, default) -> object:
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}")
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}")
    return raw


def load_config(path=None) -> dict[str, object]:
    """Defaults, optionally overridden by a flat key = value file."""
    cfg = dict(DEFAULTS)
    if path is None:
        return cfg
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value, got {line!r}")
            key, _, raw = line.partition("=")
            key = key.strip()
            if key not in DEFAULTS:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            cfg[key] = _parse_value(key, raw, DEFAULTS[key])
    return cfg


def per_class_floats(cfg: dict, key: str, n_classes: int) -> list[float]:
    """Parse a comma-separated per-class list, recycling entries if short."""
    raw = str(cfg[key])
    try:
        values = [float(v) for v in raw.split(",") if v.strip() != ""]
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated numbers, got {raw!r}")
    if not values:
        raise ConfigError(f"{key}: empty list")
    return [values[i % len(values)] for i in range(n_classes)]


def encoder_config_from(cfg: dict) -> EncoderConfig:
    size = int(cfg["data.image_size"])
    p = int(cfg["encoder.p"])
    if size % p:
        raise ConfigError(f"data.image_size {size} not divisible by encoder.p {p}")
    return EncoderConfig(
        p=p,
        d=int(cfg["encoder.d"]),
        L=int(cfg["encoder.L"]),
        h=int(cfg["encoder.h"]),
        n=(size // p) * (size // p),
        mlp_ratio=int(cfg["encoder.mlp_ratio"]),
        attn_scale=str(cfg["encoder.attn_scale"]),
    )
