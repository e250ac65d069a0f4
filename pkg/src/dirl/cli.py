"""Command-line pipeline: generate data, pretrain, extract, classify, analyze.

Every command writes a run manifest (command, resolved config, seed, input
content hashes, timestamps) into its output directory before doing any work,
so each artifact directory is self-describing and replayable. Machine-read
outputs are JSON with sorted keys; errors come out as one line on stderr with
a nonzero exit code.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .attention_analysis import (
    aggregate_attention,
    bin_profile,
    export_overlay,
    representation_attention,
)
from .cell_prior import build_cell_prior
from .checkpoint import (
    KIND_EXTRACTOR,
    KIND_TRAIN_STATE,
    load_checkpoint,
    load_features,
    save_features,
)
from .config import encoder_config_from, load_config
from .disentangle import build_masks
from .encoder import block_params_from_arrays, encoder_params_from_arrays, encode, transformer_block
from .errors import AbsentRegionError, CheckpointError, ConfigError, DataError, DirlError
from .mil import Bag, MilConfig, extract_features, load_extractor, run_mil_eval
from .ssl.trainer import pretrain
from .synth_data import SynthConfig, generate_dataset, load_dataset, read_manifest

VARIANTS = ("baseline", "cellback", "cellback-v2", "dirl")
MAP_KINDS = ("agg", "c", "b", "cc", "bb", "cb", "bc")


def _utc_now() -> str:
    """Wall clock, or SOURCE_DATE_EPOCH when set (reproducible-build runs)."""
    sde = os.environ.get("SOURCE_DATE_EPOCH")
    if sde is not None:
        return datetime.fromtimestamp(int(sde), tz=timezone.utc).isoformat()
    return datetime.now(tz=timezone.utc).isoformat()


def _hash_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_inputs(paths: dict[str, object]) -> dict[str, str]:
    out = {}
    for name, p in sorted(paths.items()):
        if p is None:
            out[name] = "none"
            continue
        p = Path(p)
        # a dataset directory is identified by its manifest
        target = p / "manifest.csv" if p.is_dir() else p
        if not target.exists():
            raise DataError(f"{target}: input file not found")
        out[name] = _hash_file(target)
    return out


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_run_manifest(out_dir, command: str, cfg: dict, seed: int,
                       inputs: dict[str, object]) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": cfg,
        "seed": seed,
        "inputs": _hash_inputs(inputs),
        "timestamps": {"started": _utc_now()},
        "version": __version__,
    }
    path = out / "run_manifest.json"
    _write_json(path, manifest)
    return path


def cmd_gen_synthetic(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DataError(f"{out}: output directory not empty (pass --force to overwrite)")
    write_run_manifest(out, "gen-synthetic", cfg, args.seed,
                       {"config": args.config})
    synth = SynthConfig.from_flat(cfg)
    ds = generate_dataset(
        synth,
        crops_per_bag=int(cfg["synth.crops_per_bag"]),
        bags_per_class=int(cfg["synth.bags_per_class"]),
        out_root=out,
        seed=args.seed,
        force=True,  # emptiness was checked above; only our manifest is here
    )
    print(f"wrote {len(ds.records)} crops in {len(ds.bag_labels())} bags to {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    dataset = load_dataset(args.data)
    if dataset.image_size != int(cfg["data.image_size"]):
        raise ConfigError(
            f"dataset images are {dataset.image_size}px but config expects "
            f"{cfg['data.image_size']}px (set data.image_size)"
        )
    write_run_manifest(args.out, "pretrain", cfg, args.seed,
                       {"data": args.data, "config": args.config})

    def progress(entry):
        print(f"epoch {entry['epoch']:4d}  loss {entry['loss']:.6f}  lr {entry['lr']:.3e}")

    result = pretrain(
        dataset, cfg, args.variant, args.seed, args.out,
        aux_enabled=args.aux_cell_count, progress=progress,
    )
    _write_json(Path(args.out) / "metrics.json", result)
    print(f"final loss {result['final_loss']:.6f}; checkpoints in {args.out}")
    return 0


def cmd_extract_features(args) -> int:
    run_cfg, enc_cfg, params = load_extractor(args.ckpt)
    dataset = load_dataset(args.data)
    write_run_manifest(args.out, "extract-features", run_cfg, args.seed,
                       {"ckpt": args.ckpt, "data": args.data})
    d, bags = extract_features(enc_cfg, params, dataset)
    out_path = Path(args.out) / "features.bin"
    save_features(out_path, d, bags)
    n = sum(rows.shape[0] for _, _, rows in bags)
    print(f"extracted {n} crop features ({d}-d) from {len(bags)} bags to {out_path}")
    return 0


def cmd_mil(args) -> int:
    cfg = load_config(args.config)
    d, feature_bags = load_features(args.features)
    labels = {bag_id: label for bag_id, label, _ in feature_bags}
    if args.manifest is not None:
        labels = dict(read_manifest(args.manifest))
        missing = [b for b, _, _ in feature_bags if b not in labels]
        if missing:
            raise DataError(
                f"{args.manifest}: no labels for bags {missing[:3]}"
                + ("..." if len(missing) > 3 else "")
            )
    bags = [Bag(bag_id, labels[bag_id], rows) for bag_id, _, rows in feature_bags]
    n_classes = len({b.label for b in bags})
    n_seeds = args.seeds if args.seeds is not None else int(cfg["mil.seeds"])
    write_run_manifest(args.out, "mil", cfg, args.seed,
                       {"features": args.features, "manifest": args.manifest,
                        "config": args.config})
    mil_cfg = MilConfig.from_flat(cfg, n_classes=n_classes, in_dim=d)
    result = run_mil_eval(
        bags, mil_cfg,
        seeds=[args.seed + i for i in range(n_seeds)],
        test_fraction=float(cfg["mil.test_fraction"]),
    )
    _write_json(Path(args.out) / "metrics.json", result)
    m, s = result["mean"], result["sd"]
    print(
        f"test acc {m['accuracy']:.4f}±{s['accuracy']:.4f}  "
        f"auc {m['auc']:.4f}±{s['auc']:.4f}  "
        f"macro-f1 {m['macro_f1']:.4f}±{s['macro_f1']:.4f}  "
        f"({result['n_test_bags']} bags, {n_seeds} seeds)"
    )
    return 0


def _load_analysis_model(ckpt_path):
    """Encoder (plus masked blocks when present) from either checkpoint kind."""
    kind, run_cfg, arrays = load_checkpoint(ckpt_path)
    enc_cfg = encoder_config_from(run_cfg)
    if kind == KIND_EXTRACTOR:
        encoder = encoder_params_from_arrays(enc_cfg, arrays, prefix="encoder")
        return run_cfg, enc_cfg, encoder, None, None
    encoder = encoder_params_from_arrays(enc_cfg, arrays, prefix="teacher.encoder")
    dis_self = dis_cross = None
    if any(name.startswith("teacher.dis_self.") for name in arrays):
        dis_self = block_params_from_arrays(arrays, "teacher.dis_self")
        dis_cross = dis_self
        if any(name.startswith("teacher.dis_cross.") for name in arrays):
            dis_cross = block_params_from_arrays(arrays, "teacher.dis_cross")
    return run_cfg, enc_cfg, encoder, dis_self, dis_cross


def cmd_analyze_attention(args) -> int:
    run_cfg, enc_cfg, encoder, dis_self, dis_cross = _load_analysis_model(args.ckpt)
    dataset = load_dataset(args.data)
    if not (-enc_cfg.L <= args.layer < enc_cfg.L):
        raise ConfigError(f"--layer {args.layer} out of range for a {enc_cfg.L}-block encoder")
    if args.which in ("cc", "bb", "cb", "bc") and dis_self is None:
        raise CheckpointError(
            f"{args.ckpt}: no disentangle parameters; {args.which!r} maps need a "
            f"training-state checkpoint from the dirl variant"
        )
    write_run_manifest(args.out, "analyze-attention", run_cfg, args.seed,
                       {"ckpt": args.ckpt, "data": args.data})
    out = Path(args.out)
    maps_dir = out / "maps"
    maps_dir.mkdir(exist_ok=True)

    values = []
    skipped = 0
    exported = 0
    for rec in dataset.records:
        img, cm = dataset.load_crop(rec)
        tokens, record = encode(img, enc_cfg, encoder)
        if args.which == "agg":
            crop_map = aggregate_attention(record, layer=args.layer).values
        else:
            prior = build_cell_prior(cm, enc_cfg.p)
            if args.which in ("c", "b"):
                weights = record.per_block[args.layer]
            else:
                masks = build_masks(prior)
                mask = masks.m_self if args.which in ("cc", "bb") else masks.m_cross
                blk = dis_self if args.which in ("cc", "bb") else dis_cross
                _, weights = transformer_block(tokens, blk, enc_cfg, additive_mask=mask)
            try:
                crop_map = representation_attention(weights, prior, args.which)
            except AbsentRegionError:
                skipped += 1
                continue
        values.append(crop_map)
        if exported < args.limit:
            stem = f"{rec.bag_id}_{rec.image_path.stem}_{args.which}"
            export_overlay(img, crop_map, maps_dir / f"{stem}.png", maps_dir / f"{stem}.csv")
            exported += 1

    if not values:
        raise DataError("no crop produced a map (every region was empty)")
    profile = bin_profile(np.concatenate(values))
    report = {
        "model_id": _hash_file(args.ckpt)[:12],
        "dataset_id": _hash_file(Path(args.data) / "manifest.csv")[:12],
        **profile.as_dict(),
    }
    _write_json(out / "profile.json", report)
    print(
        f"{args.which}: low {profile.low:.4f}  desired {profile.desired:.4f}  "
        f"high {profile.high:.4f} over {profile.count} tokens "
        f"({exported} overlays{f', {skipped} crops skipped' if skipped else ''})"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dirl",
        description="Diversity-inducing self-supervised pretraining pipeline.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--seed", type=int, default=0, help="run seed (default: %(default)s)")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen-synthetic", help="generate the synthetic crop dataset")
    p.add_argument("--config", default=None, help="flat key = value config file")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output dir")
    common(p)
    p.set_defaults(fn=cmd_gen_synthetic)

    p = sub.add_parser("pretrain", help="self-distillation pretraining")
    p.add_argument("--variant", required=True, choices=VARIANTS,
                   help="which set of representations to match")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", default=None, help="flat key = value config file")
    p.add_argument("--aux-cell-count", action="store_true",
                   help="add the per-token cell-count regression task")
    common(p)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("extract-features", help="crop features from a checkpoint")
    p.add_argument("--ckpt", required=True, help="extractor checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    common(p)
    p.set_defaults(fn=cmd_extract_features)

    p = sub.add_parser("mil", help="bag-level evaluation over several seeds")
    p.add_argument("--features", required=True, help="feature archive")
    p.add_argument("--manifest", default=None,
                   help="optional manifest.csv overriding bag labels")
    p.add_argument("--seeds", type=int, default=None,
                   help="number of training seeds (default: mil.seeds from config)")
    p.add_argument("--config", default=None, help="flat key = value config file")
    common(p)
    p.set_defaults(fn=cmd_mil)

    p = sub.add_parser("analyze-attention", help="sparsity profile and overlay maps")
    p.add_argument("--ckpt", required=True,
                   help="extractor or training-state checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--which", default="agg", choices=MAP_KINDS,
                   help="aggregated attention or one region map")
    p.add_argument("--layer", type=int, default=-1,
                   help="encoder layer for agg/c/b maps (default: %(default)s)")
    p.add_argument("--limit", type=int, default=8,
                   help="max crops to export overlays for (default: %(default)s)")
    common(p)
    p.set_defaults(fn=cmd_analyze_attention)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except DirlError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
