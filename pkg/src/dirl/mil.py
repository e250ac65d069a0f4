"""Bag-level evaluation: feature extraction and a dual-stream MIL classifier.

Feature extraction runs crops through a frozen encoder checkpoint and mean
pools the final tokens; cell priors play no part here. Classification uses
two streams per bag: per-instance logits pick a critical instance (highest
max-class score, ties to the lowest index), and attention over query
similarities to that instance aggregates value projections into a bag
embedding. Bag logits average the bag-embedding classifier with the critical
instance's own logits. Training is one bag per step; evaluation repeats over
several seeds and averages.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import KIND_EXTRACTOR, load_checkpoint
from .config import encoder_config_from
from .encoder import EncoderConfig, EncoderParams, encode, encoder_params_from_arrays
from .errors import CheckpointError, ConfigError, DimensionError, MetricError
from .numerics import Tensor, log_softmax_rows, matmul, parameter, softmax_rows
from .ssl.optim import AdamW
from .synth_data import CropDataset


@dataclass
class Bag:
    bag_id: str
    label: int
    features: np.ndarray  # (N, d)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise DimensionError(
                f"bag {self.bag_id!r}: features must be (N >= 1, d), got {self.features.shape}"
            )


@dataclass(frozen=True)
class MilConfig:
    n_classes: int
    in_dim: int
    query_dim: int = 32
    lr: float = 2e-4
    weight_decay: float = 5e-2
    epochs: int = 50
    val_fraction: float = 0.2

    @staticmethod
    def from_flat(cfg: dict, n_classes: int, in_dim: int) -> "MilConfig":
        return MilConfig(
            n_classes=n_classes,
            in_dim=in_dim,
            query_dim=int(cfg["mil.query_dim"]),
            lr=float(cfg["mil.lr"]),
            weight_decay=float(cfg["mil.weight_decay"]),
            epochs=int(cfg["mil.epochs"]),
            val_fraction=float(cfg["mil.val_fraction"]),
        )


@dataclass
class MilParams:
    w_inst: Tensor
    b_inst: Tensor
    w_query: Tensor
    w_value: Tensor
    w_bag: Tensor
    b_bag: Tensor

    def parameters(self) -> list[Tensor]:
        return [self.w_inst, self.b_inst, self.w_query, self.w_value, self.w_bag, self.b_bag]

    def snapshot(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def restore(self, arrays: list[np.ndarray]) -> None:
        for p, a in zip(self.parameters(), arrays):
            p.data = a.copy()


def init_mil_params(cfg: MilConfig, rng: np.random.Generator) -> MilParams:
    def w(name, shape):
        return parameter(rng.standard_normal(shape) * 0.02, name=name)

    d, q, c = cfg.in_dim, cfg.query_dim, cfg.n_classes
    return MilParams(
        w_inst=w("mil.w_inst", (d, c)),
        b_inst=parameter(np.zeros(c), name="mil.b_inst"),
        w_query=w("mil.w_query", (d, q)),
        w_value=w("mil.w_value", (d, d)),
        w_bag=w("mil.w_bag", (d, c)),
        b_bag=parameter(np.zeros(c), name="mil.b_bag"),
    )


def mil_forward(bag: Bag, params: MilParams) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Returns bag logits (Tensor, for training), instance logits, attention."""
    h = Tensor(bag.features)
    inst_logits = matmul(h, params.w_inst) + params.b_inst  # (N, C)
    crit = int(np.argmax(inst_logits.data.max(axis=1)))  # ties -> lowest index
    q = matmul(h, params.w_query)  # (N, q)
    sims = matmul(q, q[crit].reshape(-1, 1)).reshape(-1)  # (N,)
    attn = softmax_rows(sims)
    v = matmul(h, params.w_value)  # (N, d)
    bag_emb = (v * attn.reshape(-1, 1)).sum(axis=0)
    bag_stream = matmul(bag_emb.reshape(1, -1), params.w_bag).reshape(-1) + params.b_bag
    bag_logits = (bag_stream + inst_logits[crit]) * 0.5
    return bag_logits, inst_logits.data.copy(), attn.data.copy()


def _split_test(bags: list[Bag], test_fraction: float) -> tuple[list[Bag], list[Bag]]:
    """Deterministic stratified test split keyed on bag-id digests."""
    by_class: dict[int, list[Bag]] = {}
    for b in bags:
        by_class.setdefault(b.label, []).append(b)
    train, test = [], []
    for label in sorted(by_class):
        group = sorted(
            by_class[label],
            key=lambda b: hashlib.sha1(b.bag_id.encode()).hexdigest(),
        )
        k = max(1, int(round(len(group) * test_fraction)))
        test.extend(group[:k])
        train.extend(group[k:])
    return train, test


def _bag_nll(bag: Bag, params: MilParams) -> Tensor:
    logits, _, _ = mil_forward(bag, params)
    return -log_softmax_rows(logits)[bag.label]


def _predict_scores(bags: list[Bag], params: MilParams, n_classes: int) -> np.ndarray:
    out = np.zeros((len(bags), n_classes))
    for i, bag in enumerate(bags):
        logits, _, _ = mil_forward(bag, params)
        z = logits.data - logits.data.max()
        e = np.exp(z)
        out[i] = e / e.sum()
    return out


def train_mil(
    train_bags: list[Bag], cfg: MilConfig, seed: int
) -> tuple[MilParams, dict]:
    """Fit on a train/val split of the given bags; keeps the best-val epoch."""
    labels = sorted({b.label for b in train_bags})
    if len(labels) < 2:
        raise ConfigError(f"MIL training needs >= 2 classes, found {labels}")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xD5)))
    params = init_mil_params(cfg, rng)
    optimizer = AdamW(params.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)

    order = rng.permutation(len(train_bags))
    n_val = max(1, int(round(len(train_bags) * cfg.val_fraction)))
    if len(train_bags) - n_val < 2:
        n_val = max(0, len(train_bags) - 2)
    val_idx = set(int(i) for i in order[:n_val])
    fit_bags = [b for i, b in enumerate(train_bags) if i not in val_idx]
    val_bags = [b for i, b in enumerate(train_bags) if i in val_idx]

    best = (-1.0, None)
    history = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(fit_bags))
        losses = []
        for i in perm:
            bag = fit_bags[int(i)]
            loss = _bag_nll(bag, params)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.data))
        ref = val_bags if val_bags else fit_bags
        scores = _predict_scores(ref, params, cfg.n_classes)
        acc = float(np.mean(scores.argmax(axis=1) == [b.label for b in ref]))
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_acc": acc})
        if acc > best[0]:
            best = (acc, params.snapshot())
    if best[1] is not None:
        params.restore(best[1])
    return params, {"history": history, "best_val_acc": best[0]}


def compute_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-based (Mann-Whitney) AUC; ties count half. Binary only here."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise MetricError("AUC needs both classes present")
    from scipy.stats import rankdata

    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[: len(pos)].sum() - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))


def macro_auc(scores: np.ndarray, labels: np.ndarray, n_classes: int) -> float:
    """One-vs-rest average over classes; reduces to plain AUC when binary."""
    labels = np.asarray(labels)
    if n_classes == 2:
        return compute_auc(scores[:, 1], (labels == 1).astype(int))
    vals = []
    for c in range(n_classes):
        if (labels == c).any() and (labels != c).any():
            vals.append(compute_auc(scores[:, c], (labels == c).astype(int)))
    if not vals:
        raise MetricError("AUC needs both classes present")
    return float(np.mean(vals))


def macro_f1(pred: np.ndarray, labels: np.ndarray, n_classes: int) -> float:
    vals = []
    for c in range(n_classes):
        tp = int(((pred == c) & (labels == c)).sum())
        fp = int(((pred == c) & (labels != c)).sum())
        fn = int(((pred != c) & (labels == c)).sum())
        denom = 2 * tp + fp + fn
        vals.append(2.0 * tp / denom if denom else 0.0)
    return float(np.mean(vals))


def evaluate_mil(bags: list[Bag], params: MilParams, n_classes: int) -> dict:
    labels = np.array([b.label for b in bags])
    scores = _predict_scores(bags, params, n_classes)
    pred = scores.argmax(axis=1)
    return {
        "accuracy": float(np.mean(pred == labels)),
        "auc": macro_auc(scores, labels, n_classes),
        "macro_f1": macro_f1(pred, labels, n_classes),
    }


def run_mil_eval(bags: list[Bag], cfg: MilConfig, seeds: list[int],
                 test_fraction: float) -> dict:
    """Train/test over several seeds on a fixed stratified test split."""
    train, test = _split_test(bags, test_fraction)
    per_seed = []
    for seed in seeds:
        params, fit_info = train_mil(train, cfg, seed)
        metrics = evaluate_mil(test, params, cfg.n_classes)
        metrics["seed"] = seed
        metrics["best_val_acc"] = fit_info["best_val_acc"]
        per_seed.append(metrics)
    keys = ("accuracy", "auc", "macro_f1")
    mean = {k: float(np.mean([m[k] for m in per_seed])) for k in keys}
    sd = {k: float(np.std([m[k] for m in per_seed])) for k in keys}
    return {
        "n_train_bags": len(train),
        "n_test_bags": len(test),
        "seeds": list(seeds),
        "per_seed": per_seed,
        "mean": mean,
        "sd": sd,
    }


def load_extractor(path) -> tuple[dict, EncoderConfig, EncoderParams]:
    _, run_cfg, arrays = load_checkpoint(path, expect_kind=KIND_EXTRACTOR)
    enc_cfg = encoder_config_from(run_cfg)
    params = encoder_params_from_arrays(enc_cfg, arrays, prefix="encoder")
    return run_cfg, enc_cfg, params


def extract_features(
    enc_cfg: EncoderConfig,
    params: EncoderParams,
    dataset: CropDataset,
    batch: int = 64,
) -> tuple[int, list[tuple[str, int, np.ndarray]]]:
    """Mean-pooled final tokens per crop, grouped into bags by bag id."""
    by_bag: dict[str, tuple[int, list]] = {}
    order: list[str] = []
    for rec in dataset.records:
        if rec.bag_id not in by_bag:
            by_bag[rec.bag_id] = (rec.label, [])
            order.append(rec.bag_id)
        by_bag[rec.bag_id][1].append(rec)

    bags = []
    for bag_id in order:
        label, recs = by_bag[bag_id]
        rows = np.zeros((len(recs), enc_cfg.d))
        for start in range(0, len(recs), batch):
            chunk = recs[start : start + batch]
            imgs = np.stack([dataset.load_crop(r)[0] for r in chunk])
            try:
                t, _ = encode(imgs, enc_cfg, params)
            except DimensionError as e:
                raise CheckpointError(f"dataset does not match checkpoint: {e}")
            rows[start : start + len(chunk)] = t.tokens.data.mean(axis=-2)
        bags.append((bag_id, label, rows))
    return enc_cfg.d, bags
