"""Momentum self-distillation pretraining loop.

One step runs both augmented views of every batch sample through the student
and the frozen teacher as a single stacked computation (leading axes batch
and view), pools the variant's representations with per-sample priors,
projects them through the head bank, and takes the weighted pair loss. The
student gets an Adam step with decoupled weight decay; the teacher follows by
exponential moving average; per-head centers follow the teacher's batch
statistics. Everything is float64 and single-threaded, so same-seed runs are
byte-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..cell_prior import CellPrior, build_cell_prior, build_cell_counts, build_class_priors
from ..checkpoint import KIND_EXTRACTOR, KIND_TRAIN_STATE, save_checkpoint
from ..disentangle import RepresentationSet, cell_back_pool, disentangle_block, disentangled_pool, region_pool
from ..encoder import (
    BlockParams,
    EncoderConfig,
    EncoderParams,
    TokenMatrix,
    encode,
    init_block,
    init_encoder_params,
    mean_pool,
    patch_embed,
    transformer_block,
)
from ..errors import ConfigError, MetricError
from ..numerics import Tensor, matmul, parameter
from ..synth_data import CropDataset
from .augment import AugmentConfig, make_views
from .distill import LossWeights, aux_cell_count_loss, center_update, ema_update, cross_entropy_term, term_weight
from .heads import DISENTANGLED_TERMS, HeadBank, build_head_bank, variant_terms
from .optim import AdamW, cosine_values


def clone_tensor(t: Tensor) -> Tensor:
    out = Tensor(t.data.copy(), requires_grad=False, name=t.name)
    return out


def clone_block(blk: BlockParams) -> BlockParams:
    return BlockParams(**{k: clone_tensor(getattr(blk, k)) for k in (
        "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv",
        "wo", "bo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2",
    )})


def clone_encoder(params: EncoderParams) -> EncoderParams:
    return EncoderParams(
        embed=clone_tensor(params.embed),
        pos=clone_tensor(params.pos),
        blocks=[clone_block(b) for b in params.blocks],
    )


def clone_bank(bank: HeadBank) -> HeadBank:
    from .heads import ProjectionHead

    heads = {}
    for term, head in bank.heads.items():
        heads[term] = ProjectionHead(**{
            k: clone_tensor(getattr(head, k))
            for k in ("w1", "b1", "w2", "b2", "w3", "b3", "protos")
        })
    return HeadBank(heads=heads)


@dataclass
class Branch:
    """One side of the distillation pair: encoder, masked block(s), heads."""

    encoder: EncoderParams
    dis_self: BlockParams | None
    dis_cross: BlockParams | None
    bank: HeadBank

    def named(self, prefix: str):
        yield from self.encoder.named(f"{prefix}.encoder")
        if self.dis_self is not None:
            yield from self.dis_self.named(f"{prefix}.dis_self")
        if self.dis_cross is not None:
            yield from self.dis_cross.named(f"{prefix}.dis_cross")
        yield from self.bank.named(f"{prefix}.heads")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named("x")]

    def cross_block(self) -> BlockParams | None:
        if self.dis_self is None:
            return None
        return self.dis_cross if self.dis_cross is not None else self.dis_self


@dataclass
class TrainState:
    cfg: dict
    variant: str
    enc_cfg: EncoderConfig
    weights: LossWeights
    student: Branch
    teacher: Branch
    aux_w: Tensor | None
    aux_b: Tensor | None
    centers: dict[str, np.ndarray]
    optimizer: AdamW
    lr_steps: np.ndarray
    momentum_steps: np.ndarray
    aug_cfg: AugmentConfig
    order_rng: np.random.Generator
    aug_rng: np.random.Generator
    step: int = 0
    skip_log: dict[str, int] = field(default_factory=dict)


def needs_disentangle(variant: str) -> bool:
    return variant == "dirl"


def init_train_state(
    cfg: dict, variant: str, seed: int, n_samples: int, aux_enabled: bool = False
) -> TrainState:
    from ..config import encoder_config_from

    enc_cfg = encoder_config_from(cfg)
    ss = np.random.SeedSequence(seed)
    param_rng, order_rng, aug_rng = (np.random.default_rng(s) for s in ss.spawn(3))

    encoder = init_encoder_params(enc_cfg, param_rng)
    J = int(cfg["synth.cell_types"])
    bank = build_head_bank(
        variant,
        enc_cfg.d,
        param_rng,
        k_region=int(cfg["ssl.k_region"]),
        k_dis=int(cfg["ssl.k_dis"]),
        hidden=int(cfg["ssl.head_hidden"]),
        bottleneck=int(cfg["ssl.head_bottleneck"]),
        cell_classes=J if variant == "cellback-v2" else 0,
    )
    dis_self = dis_cross = None
    if needs_disentangle(variant):
        dis_self = init_block(enc_cfg, param_rng, "dis_self")
        if not bool(cfg["disentangle.shared_params"]):
            dis_cross = init_block(enc_cfg, param_rng, "dis_cross")
    student = Branch(encoder=encoder, dis_self=dis_self, dis_cross=dis_cross, bank=bank)
    teacher = Branch(
        encoder=clone_encoder(encoder),
        dis_self=clone_block(dis_self) if dis_self is not None else None,
        dis_cross=clone_block(dis_cross) if dis_cross is not None else None,
        bank=clone_bank(bank),
    )

    aux_w = aux_b = None
    if aux_enabled:
        from ..encoder import trunc_normal

        aux_w = parameter(trunc_normal(param_rng, (enc_cfg.d, 1)), name="aux.w")
        aux_b = parameter(np.zeros(1), name="aux.b")

    centers = {}
    for term in bank.term_names():
        k = int(cfg["ssl.k_dis"]) if term in DISENTANGLED_TERMS else int(cfg["ssl.k_region"])
        centers[term] = np.zeros(k)

    batch = int(cfg["ssl.batch_size"])
    epochs = int(cfg["ssl.epochs"])
    steps_per_epoch = max(1, (n_samples + batch - 1) // batch)
    total_steps = epochs * steps_per_epoch
    lr_base = float(cfg["ssl.lr"]) * batch / 256.0
    lr_steps = cosine_values(
        lr_base, 0.0, total_steps,
        warmup_steps=int(cfg["ssl.warmup_epochs"]) * steps_per_epoch,
    )
    momentum_steps = cosine_values(
        float(cfg["ssl.momentum_base"]), float(cfg["ssl.momentum_final"]), total_steps
    )

    params = student.parameters() + ([aux_w, aux_b] if aux_enabled else [])
    optimizer = AdamW(params, lr=lr_base, weight_decay=float(cfg["ssl.weight_decay"]))

    weights = LossWeights(
        lam1=float(cfg["ssl.lambda1"]),
        lam2=float(cfg["ssl.lambda2"]),
        aux_weight=float(cfg["ssl.aux_weight"]) if aux_enabled else 0.0,
    )
    aug_cfg = AugmentConfig(
        crop_scale_min=float(cfg["aug.crop_scale_min"]),
        crop_scale_max=float(cfg["aug.crop_scale_max"]),
        flip_prob=float(cfg["aug.flip_prob"]),
        jitter=float(cfg["aug.jitter"]),
    )
    return TrainState(
        cfg=cfg, variant=variant, enc_cfg=enc_cfg, weights=weights,
        student=student, teacher=teacher, aux_w=aux_w, aux_b=aux_b,
        centers=centers, optimizer=optimizer, lr_steps=lr_steps,
        momentum_steps=momentum_steps, aug_cfg=aug_cfg,
        order_rng=order_rng, aug_rng=aug_rng,
    )


@dataclass
class StepBatch:
    """Stacked per-view arrays for one training step."""

    images: np.ndarray  # (B, 2, S, S, 3)
    prior_bits: np.ndarray  # (B, 2, n)
    class_bits: np.ndarray | None  # (B, 2, J, n)
    counts: np.ndarray | None  # (B, 2, n)
    sample_ids: list[int]


def assemble_batch(
    images: list[np.ndarray],
    maps: list,
    sample_ids: list[int],
    state: TrainState,
) -> StepBatch:
    p = state.enc_cfg.p
    J = int(state.cfg["synth.cell_types"])
    want_classes = state.variant == "cellback-v2"
    want_counts = state.aux_w is not None
    view_imgs, bits, cls_bits, counts = [], [], [], []
    for img, cm in zip(images, maps):
        pair = make_views(img, cm, state.aug_cfg, state.aug_rng)
        view_imgs.append(pair.images)
        bits.append([build_cell_prior(m, p).bits for m in pair.maps])
        if want_classes:
            cls_bits.append([
                np.stack([cp.bits for cp in build_class_priors(m, p, J).class_priors])
                for m in pair.maps
            ])
        if want_counts:
            counts.append([build_cell_counts(m, p).counts for m in pair.maps])
    return StepBatch(
        images=np.stack(view_imgs),
        prior_bits=np.asarray(bits, dtype=np.float64),
        class_bits=np.asarray(cls_bits, dtype=np.float64) if want_classes else None,
        counts=np.asarray(counts, dtype=np.float64) if want_counts else None,
        sample_ids=sample_ids,
    )


def _batched_masks(bits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    same = bits[..., :, None] == bits[..., None, :]
    eye = np.eye(bits.shape[-1], dtype=bool)
    m_self = np.where(same, 0.0, -np.inf)
    m_cross = np.where(~same | eye, 0.0, -np.inf)
    return m_self, m_cross


def _pool_bits(tokens: Tensor, bits: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Region means over the token axis for stacked (B, 2, n, d) tokens.

    Empty regions divide by 1 and come out as zero vectors; the matching
    `present` mask excludes them from every loss term downstream.
    """
    sums = bits.sum(axis=-1)
    safe = np.where(sums > 0, sums, 1.0)
    w = bits / safe[..., None]
    pooled = matmul(Tensor(w[..., None, :]), tokens)
    lead = tokens.shape[:-2]
    return pooled.reshape(*lead, tokens.shape[-1]), sums > 0


def branch_term_outputs(
    batch: StepBatch, branch: Branch, state: TrainState
) -> tuple[dict[str, tuple[Tensor, np.ndarray]], TokenMatrix]:
    """Pooled representation and presence mask per loss term, plus T_L."""
    cfg = state.enc_cfg
    t, _ = encode(batch.images, cfg, branch.encoder)
    bits = batch.prior_bits
    outs: dict[str, tuple[Tensor, np.ndarray]] = {}
    lead_present = np.ones(bits.shape[:-1], dtype=bool)
    terms = variant_terms(
        state.variant,
        cell_classes=batch.class_bits.shape[2] if batch.class_bits is not None else 0,
    )
    if "image" in terms:
        outs["image"] = (t.tokens.mean(axis=-2), lead_present)
    if "cell" in terms:
        outs["cell"] = _pool_bits(t.tokens, bits)
    if "back" in terms:
        outs["back"] = _pool_bits(t.tokens, 1.0 - bits)
    for term in terms:
        if term.startswith("class_"):
            j = int(term.split("_", 1)[1])
            outs[term] = _pool_bits(t.tokens, batch.class_bits[:, :, j])
    if needs_disentangle(state.variant):
        m_self, m_cross = _batched_masks(bits)
        t_self, _ = transformer_block(t, branch.dis_self, cfg, additive_mask=m_self)
        t_cross, _ = transformer_block(t, branch.cross_block(), cfg, additive_mask=m_cross)
        outs["cc"] = _pool_bits(t_self.tokens, bits)
        outs["bb"] = _pool_bits(t_self.tokens, 1.0 - bits)
        outs["cb"] = _pool_bits(t_cross.tokens, bits)
        outs["bc"] = _pool_bits(t_cross.tokens, 1.0 - bits)
    return outs, t


@dataclass
class StepMetrics:
    loss: float
    term_means: dict[str, float]
    term_skips: dict[str, int]
    n_valid: int
    n_skipped_samples: int
    lr: float
    momentum: float
    aux: float | None = None


def batch_loss(
    batch: StepBatch, state: TrainState
) -> tuple[Tensor, StepMetrics, dict[str, np.ndarray], TokenMatrix]:
    """Composite distillation loss over a stacked batch.

    Per sample, each term contributes weight * pair CE when its region is
    present in both views; missing terms are dropped without reweighting the
    rest, and samples with no surviving term are excluded from the batch mean
    (and counted).
    """
    temp_s = float(state.cfg["ssl.temp_student"])
    temp_t = float(state.cfg["ssl.temp_teacher"])
    student_outs, t_student = branch_term_outputs(batch, state.student, state)
    teacher_outs, _ = branch_term_outputs(batch, state.teacher, state)

    B = batch.images.shape[0]
    per_sample: Tensor | None = None
    any_present = np.zeros(B, dtype=bool)
    term_means: dict[str, float] = {}
    term_skips: dict[str, int] = {}
    center_rows: dict[str, np.ndarray] = {}
    terms = list(student_outs.keys())
    for term in terms:
        s_pool, s_present = student_outs[term]
        t_pool, _ = teacher_outs[term]
        s_logits = state.student.bank[term].forward(s_pool)
        t_logits = state.teacher.bank[term].forward(t_pool).data
        center = state.centers[term]
        ce_a = cross_entropy_term(s_logits[:, 1, :], t_logits[:, 0, :], temp_s, temp_t, center)
        ce_b = cross_entropy_term(s_logits[:, 0, :], t_logits[:, 1, :], temp_s, temp_t, center)
        pair = (ce_a + ce_b) * 0.5  # (B,)
        present = s_present[:, 0] & s_present[:, 1]
        weight = term_weight(state.variant, term, state.weights, len(terms))
        masked = pair * Tensor(present.astype(np.float64)) * weight
        per_sample = masked if per_sample is None else per_sample + masked
        any_present |= present
        n_present = int(present.sum())
        term_skips[term] = B - n_present
        term_means[term] = float(pair.data[present].mean()) if n_present else 0.0
        center_rows[term] = t_logits[s_present]

    n_valid = int(any_present.sum())
    if n_valid == 0:
        raise MetricError("no sample in the batch produced any loss term")
    total = per_sample.sum() * (1.0 / n_valid)

    aux_val = None
    if state.aux_w is not None and batch.counts is not None:
        aux = aux_cell_count_loss(t_student.tokens, batch.counts, state.aux_w, state.aux_b)
        total = total + aux * state.weights.aux_weight
        aux_val = float(aux.data)

    metrics = StepMetrics(
        loss=float(total.data),
        term_means=term_means,
        term_skips=term_skips,
        n_valid=n_valid,
        n_skipped_samples=B - n_valid,
        lr=0.0,
        momentum=0.0,
        aux=aux_val,
    )
    return total, metrics, center_rows, t_student


def train_step(batch: StepBatch, state: TrainState) -> StepMetrics:
    step = min(state.step, len(state.lr_steps) - 1)
    lr = float(state.lr_steps[step])
    momentum = float(state.momentum_steps[step])

    total, metrics, center_rows, _ = batch_loss(batch, state)
    if not np.isfinite(total.data):
        raise MetricError(
            f"non-finite loss at step {state.step} (samples {batch.sample_ids})"
        )
    state.optimizer.zero_grad()
    total.backward()
    state.optimizer.step(lr=lr)

    ema_update(state.teacher.parameters(), state.student.parameters(), momentum)
    c_m = float(state.cfg["ssl.center_momentum"])
    for term, rows in center_rows.items():
        state.centers[term] = center_update(state.centers[term], rows, c_m)

    state.step += 1
    metrics.lr = lr
    metrics.momentum = momentum
    for term, k in metrics.term_skips.items():
        state.skip_log[term] = state.skip_log.get(term, 0) + k
    return metrics


def sample_representation_set(
    image: np.ndarray,
    prior: CellPrior,
    branch: Branch,
    state: TrainState,
    class_priors: list[CellPrior] | None = None,
) -> RepresentationSet:
    """Single-view pooled representations (reference path, used by tests)."""
    t, _ = encode(image, state.enc_cfg, branch.encoder)
    from ..disentangle import PooledFeature

    reps = RepresentationSet(f=PooledFeature(mean_pool(t), True))
    f_c, f_b = cell_back_pool(t, prior)
    reps.f_c, reps.f_b = f_c, f_b
    if needs_disentangle(state.variant):
        t_self, t_cross, _, _ = disentangle_block(
            t, prior, state.enc_cfg, branch.dis_self, branch.cross_block()
        )
        reps.f_cc, reps.f_bb, reps.f_cb, reps.f_bc = disentangled_pool(t_self, t_cross, prior)
    if class_priors is not None:
        reps.class_region = [region_pool(t, cp.bits) for cp in class_priors]
    return reps


def extractor_arrays(branch: Branch) -> dict[str, np.ndarray]:
    """The parts kept for inference: projection, positions, encoder stack."""
    return {name: t.data.copy() for name, t in branch.encoder.named("encoder")}


def train_state_arrays(state: TrainState) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    for name, t in state.student.named("student"):
        arrays[name] = t.data.copy()
    for name, t in state.teacher.named("teacher"):
        arrays[name] = t.data.copy()
    if state.aux_w is not None:
        arrays["student.aux.w"] = state.aux_w.data.copy()
        arrays["student.aux.b"] = state.aux_b.data.copy()
    for term, center in state.centers.items():
        arrays[f"center.{term}"] = center.copy()
    arrays["meta.step"] = np.array([float(state.step)])
    arrays.update(state.optimizer.state_arrays())
    return arrays


def checkpoint_config(state: TrainState, seed: int) -> dict:
    cfg = {str(k): v for k, v in state.cfg.items()}
    cfg["run.variant"] = state.variant
    cfg["run.seed"] = seed
    cfg["run.aux"] = state.aux_w is not None
    return cfg


def train_epochs(
    images: list[np.ndarray],
    maps: list,
    state: TrainState,
    progress=None,
    on_epoch_end=None,
) -> list[dict]:
    """Run the configured number of epochs over in-memory crops."""
    n = len(images)
    if n == 0:
        raise ConfigError("pretraining dataset is empty")
    batch_size = int(state.cfg["ssl.batch_size"])
    epochs = int(state.cfg["ssl.epochs"])
    history = []
    for epoch in range(epochs):
        order = state.order_rng.permutation(n)
        losses, aux_losses = [], []
        epoch_terms: dict[str, list[float]] = {}
        for start in range(0, n, batch_size):
            ids = [int(i) for i in order[start : start + batch_size]]
            batch = assemble_batch([images[i] for i in ids], [maps[i] for i in ids], ids, state)
            metrics = train_step(batch, state)
            losses.append(metrics.loss)
            if metrics.aux is not None:
                aux_losses.append(metrics.aux)
            for term, v in metrics.term_means.items():
                epoch_terms.setdefault(term, []).append(v)
        entry = {
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "terms": {k: float(np.mean(v)) for k, v in sorted(epoch_terms.items())},
            "lr": float(state.lr_steps[min(state.step - 1, len(state.lr_steps) - 1)]),
        }
        if aux_losses:
            entry["aux"] = float(np.mean(aux_losses))
        history.append(entry)
        if progress is not None:
            progress(entry)
        if on_epoch_end is not None:
            on_epoch_end(epoch, state)
    return history


def pretrain(
    dataset: CropDataset,
    cfg: dict,
    variant: str,
    seed: int,
    out_dir,
    aux_enabled: bool = False,
    progress=None,
) -> dict:
    """Full pretraining run; writes extractor/train-state checkpoints and
    returns the metrics history."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    crops = [dataset.load_crop(r) for r in dataset.records]
    images = [c[0] for c in crops]
    maps = [c[1] for c in crops]

    state = init_train_state(cfg, variant, seed, len(images), aux_enabled=aux_enabled)
    epochs = int(cfg["ssl.epochs"])
    ckpt_every = int(cfg["ssl.checkpoint_every"])
    run_cfg = checkpoint_config(state, seed)

    def snapshot(epoch, st):
        if ckpt_every and (epoch + 1) % ckpt_every == 0 and (epoch + 1) < epochs:
            save_checkpoint(
                out / f"train_state_ep{epoch + 1:04d}.bin",
                KIND_TRAIN_STATE, run_cfg, train_state_arrays(st),
            )

    history = train_epochs(images, maps, state, progress=progress, on_epoch_end=snapshot)

    save_checkpoint(out / "extractor.bin", KIND_EXTRACTOR, run_cfg,
                    extractor_arrays(state.teacher))
    save_checkpoint(out / "train_state.bin", KIND_TRAIN_STATE, run_cfg,
                    train_state_arrays(state))
    return {
        "variant": variant,
        "seed": seed,
        "epochs": history,
        "skips": {k: int(v) for k, v in sorted(state.skip_log.items())},
        "final_loss": history[-1]["loss"] if history else None,
    }
