"""Three-part objective (confidence, level regression, slerp contrastive),
exact gradients, AdamW and the training loop.

Every loss is batch-averaged.  Gradients are derived by hand and verified
against central finite differences in the test suite.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .degrade import LEVEL_RANGES, TYPES, DatasetManifest, DegradationType, as_type, load_image
from .encoder import (
    Checkpoint,
    EncoderArch,
    EncoderParams,
    backward_batch,
    extract_features,
    fit_feature_scaling,
    forward_batch,
    init_params,
)
from .errors import EmptyDatasetError, KeyMismatchError, NonFiniteLossError, ShapeMismatchError, ZeroNormError
from .infer import cosine_backward, topk_level, topk_level_backward
from .numerics import normalize_rows, slerp_rows, slerp_rows_backward
from .ordspace import (
    DEFAULT_GAP,
    OrdinalEncoderSpec,
    ShiftTable,
    TypeAnchor,
    bin_level_norms,
    bracket,
    build_grids,
    make_anchors,
)

log = logging.getLogger(__name__)

# Table-3 style loss configurations: (use_level, use_scl)
ABLATIONS = {"A": (False, False), "B": (True, False), "C": (False, True), "D": (True, True)}


@dataclass
class TrainConfig:
    lr: float = 2e-4
    epochs: int = 200
    batch_size: int = 64
    weight_decay: float = 0.01
    seed: int = 0
    use_level: bool = True
    use_scl: bool = True
    top_k: int = 2
    gap: float = DEFAULT_GAP
    tau: float = 0.07
    tau_w: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    d: int = 512
    f: float = 10000.0
    hidden: tuple[int, ...] = (256, 256)

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.hidden = tuple(int(h) for h in self.hidden)
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 0 or self.batch_size < 1 or self.top_k < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and top_k >= 1 required")
        if not (self.tau > 0 and self.tau_w > 0):
            raise ValueError("temperatures must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        OrdinalEncoderSpec(self.d, self.f)
        bin_level_norms(self.gap)

    @classmethod
    def for_ablation(cls, name: str, **kwargs) -> "TrainConfig":
        use_level, use_scl = ABLATIONS[name.upper()]
        return cls(use_level=use_level, use_scl=use_scl, **kwargs)

    @property
    def spec(self) -> OrdinalEncoderSpec:
        return OrdinalEncoderSpec(self.d, self.f)

    def to_json(self) -> dict:
        out = asdict(self)
        out["betas"] = list(self.betas)
        out["hidden"] = list(self.hidden)
        return out


@dataclass
class LossBreakdown:
    conf: float = 0.0
    level: float = 0.0
    scl: float = 0.0

    @property
    def total(self) -> float:
        return self.conf + self.level + self.scl

    def as_row(self) -> dict:
        return {"conf": self.conf, "level": self.level, "scl": self.scl, "total": self.total}


# ----------------------------------------------------------------------------
# losses on plain arrays, each returning (value, partials)


def conf_loss_and_grad(conf, conf_gt) -> tuple[float, np.ndarray]:
    """Mean over samples of the Euclidean norm of the 4-vector confidence error."""
    diff = np.asarray(conf, dtype=np.float64) - np.asarray(conf_gt, dtype=np.float64)
    norms = np.linalg.norm(diff, axis=1)
    n = diff.shape[0]
    safe = np.where(norms > 0, norms, 1.0)
    # subgradient 0 where the error vector vanishes
    grad = np.where(norms[:, None] > 0, diff / safe[:, None], 0.0) / n
    return float(norms.mean()), grad


def level_loss_and_grad(pred, gt) -> tuple[float, np.ndarray]:
    err = np.asarray(pred) - np.asarray(gt)
    return float(np.mean(np.abs(err))), np.sign(err) / err.size


def ordinal_weights(levels) -> np.ndarray:
    """Negative weights |l_i - l_j| scaled by each anchor's largest distance."""
    lv = np.asarray(levels, dtype=np.float64)
    dist = np.abs(lv[:, None] - lv[None, :])
    np.fill_diagonal(dist, 0.0)
    peak = dist.max(axis=1, keepdims=True)
    return np.divide(dist, peak, out=np.zeros_like(dist), where=peak > 0)


def scl_loss_and_grad(z, w, levels, tau: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Slerp contrastive loss over one same-type batch and its partials w.r.t. z and w."""
    z = np.asarray(z, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    m = z.shape[0]
    if m <= 1:
        return 0.0, np.zeros_like(z), np.zeros_like(w)
    z_hat, z_norm = normalize_rows(z)
    w_hat, w_norm = normalize_rows(w)
    S = np.clip(z_hat @ w_hat.T, -1.0, 1.0)
    lam = ordinal_weights(levels)
    np.fill_diagonal(lam, 1.0)
    logits = S / tau
    peak = logits.max(axis=1, keepdims=True)
    e = lam * np.exp(logits - peak)
    den = e.sum(axis=1)
    per = -(np.diag(logits) - peak[:, 0] - np.log(den))
    P = e / den[:, None]
    gS = (P - np.eye(m)) / (tau * m)
    gz, gw = cosine_backward(z_hat, z_norm, w_hat, w_norm, S, gS)
    return float(per.mean()), gz, gw


def slerp_targets_and_backward(centers, level_norms_bins, levels) -> tuple[np.ndarray, Callable]:
    """Slerp targets between bracketing bin centers and a closure for their VJP."""
    lo, frac = bracket(level_norms_bins, levels)
    out, cache = slerp_rows(centers[lo], centers[lo + 1], frac)

    def backward(g_out):
        gp, gq = slerp_rows_backward(cache, g_out)
        gc = np.zeros_like(centers)
        np.add.at(gc, lo, gp)
        np.add.at(gc, lo + 1, gq)
        return gc

    return out, backward


# ----------------------------------------------------------------------------
# public loss surface on mappings / batches


def _as_type_map(m: Mapping) -> dict[DegradationType, np.ndarray]:
    return {as_type(k): np.atleast_1d(np.asarray(v, dtype=np.float64)) for k, v in m.items()}


def loss_conf(preds: Mapping, gts: Mapping) -> float:
    """Per-sample Euclidean confidence error over the types, averaged over samples."""
    p = _as_type_map(preds)
    g = _as_type_map(gts)
    if set(p) != set(g):
        raise KeyMismatchError("confidence predictions and targets cover different types")
    keys = sorted(p)
    value, _ = conf_loss_and_grad(np.stack([p[k] for k in keys], 1), np.stack([g[k] for k in keys], 1))
    return value


def loss_level(pred: Mapping, gt: Mapping, mask) -> float:
    """Sum over active types of the mean absolute normalized-level error."""
    p = _as_type_map(pred)
    g = _as_type_map(gt)
    if isinstance(mask, Mapping):
        active = {as_type(k): np.atleast_1d(np.asarray(v, dtype=bool)) for k, v in mask.items()}
    else:
        active = {as_type(k): None for k in mask}
    total = 0.0
    for t, sel in active.items():
        if t not in p or t not in g:
            raise KeyMismatchError(f"{t.value} is active but missing from predictions or targets")
        err = np.abs(p[t] - g[t])
        if sel is not None:
            if not sel.any():
                continue
            err = err[sel]
        total += float(err.mean())
    return total


@dataclass
class SclItem:
    z: np.ndarray
    w: np.ndarray
    level_gt: float
    type: DegradationType


@dataclass
class SclBatch:
    items: list[SclItem]
    tau: float = 0.07

    def __post_init__(self):
        if not self.items:
            raise ValueError("SCL batch needs at least one item")
        if len({as_type(i.type) for i in self.items}) != 1:
            raise ValueError("all items of an SCL batch must share one degradation type")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")

    @property
    def M(self) -> int:
        return len(self.items)


def loss_scl(batch: SclBatch) -> float:
    z = np.stack([i.z for i in batch.items])
    w = np.stack([i.w for i in batch.items])
    levels = [i.level_gt for i in batch.items]
    value, _, _ = scl_loss_and_grad(z, w, levels, batch.tau)
    return value


# ----------------------------------------------------------------------------
# full objective and gradient


@dataclass
class StepBatch:
    """Rows of features with targets; ``groups[t]`` indexes the rows of type t's batch.

    ``level_gt`` holds normalized levels, NaN where a type is absent.
    """

    X: np.ndarray
    conf_gt: np.ndarray
    level_gt: np.ndarray
    groups: dict[DegradationType, np.ndarray]

    def __post_init__(self):
        b = self.X.shape[0]
        if b == 0:
            raise ValueError("step batch is empty")
        if self.conf_gt.shape != (b, len(TYPES)) or self.level_gt.shape != (b, len(TYPES)):
            raise ShapeMismatchError("targets must be (B, 4)")
        for t, rows in self.groups.items():
            if rows.size and np.any(np.isnan(self.level_gt[rows, t.order])):
                raise ValueError(f"group {t.value} contains rows where the type is absent")

    def duplicated(self) -> "StepBatch":
        b = self.X.shape[0]
        return StepBatch(
            np.concatenate([self.X, self.X]),
            np.concatenate([self.conf_gt, self.conf_gt]),
            np.concatenate([self.level_gt, self.level_gt]),
            {t: np.concatenate([r, r + b]) for t, r in self.groups.items()},
        )


@dataclass
class Model:
    """Trainable state: encoder params, bin shifts and the frozen grid context."""

    params: EncoderParams
    shifts: ShiftTable
    anchors: dict[DegradationType, TypeAnchor]
    spec: OrdinalEncoderSpec
    gap: float

    def grids(self):
        return build_grids(self.spec, self.anchors, self.shifts, self.gap)

    def checkpoint(self, extra: dict | None = None) -> Checkpoint:
        return Checkpoint(self.params.copy(), self.shifts.copy(), dict(self.anchors), self.spec, self.gap, extra or {})

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "Model":
        return cls(ckpt.params.copy(), ckpt.shifts.copy(), dict(ckpt.anchors), ckpt.spec, ckpt.gap)


@dataclass
class Gradients:
    params: dict[str, np.ndarray]
    shifts: dict[DegradationType, np.ndarray]

    def flat(self) -> dict[str, np.ndarray]:
        out = dict(self.params)
        out.update({f"shift.{t.value}": g for t, g in self.shifts.items()})
        return out

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.flat().values())


def grad(model: Model, batch: StepBatch, config: TrainConfig) -> tuple[LossBreakdown, Gradients]:
    """Loss breakdown and exact gradients w.r.t. every weight and every shift vector."""
    out = forward_batch(model.params, batch.X)
    conf_value, g_conf = conf_loss_and_grad(out.conf, batch.conf_gt)
    breakdown = LossBreakdown(conf=conf_value)
    g_emb = np.zeros_like(out.emb)
    g_shift = {t: np.zeros_like(model.shifts[t]) for t in TYPES}

    if config.use_level or config.use_scl:
        grids = model.grids()
        for t, rows in batch.groups.items():
            if rows.size == 0:
                continue
            ti = t.order
            z = out.emb[ti, rows]
            gt = batch.level_gt[rows, ti]
            grid = grids[t]
            gz = np.zeros_like(z)
            gc = np.zeros_like(grid.centers)
            if config.use_level:
                pred, cache = topk_level(z, grid.centers, grid.level_norms, config.top_k, config.tau_w)
                value, g_pred = level_loss_and_grad(pred, gt)
                breakdown.level += value
                a, b = topk_level_backward(cache, g_pred, config.tau_w)
                gz += a
                gc += b
            if config.use_scl:
                targets, back = slerp_targets_and_backward(grid.centers, grid.level_norms, gt)
                value, a, g_targets = scl_loss_and_grad(z, targets, gt, config.tau)
                if value < -1e-12:
                    raise NonFiniteLossError(f"negative SCL value {value} for {t.value}")
                breakdown.scl += value
                gz += a
                gc += back(g_targets)
            np.add.at(g_emb[ti], rows, gz)
            # centers = anchor + ordinal + shift, so d/dshift = d/dcenter
            g_shift[t] = gc

    g_params = backward_batch(model.params, out, g_emb, g_conf)
    return breakdown, Gradients(g_params, g_shift)


def total_loss(model: Model, batch: StepBatch, config: TrainConfig) -> float:
    return grad(model, batch, config)[0].total


# ----------------------------------------------------------------------------
# AdamW


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def step(
    state: AdamState, params: EncoderParams, shifts: ShiftTable, grads: Gradients, config: TrainConfig
) -> tuple[AdamState, EncoderParams, ShiftTable]:
    """One AdamW update with bias correction and decoupled weight decay; inputs untouched."""
    b1, b2 = config.betas
    t = state.t + 1
    new_params = params.copy()
    new_shifts = shifts.copy()
    current = dict(new_params.weights)
    current.update({f"shift.{k.value}": v for k, v in new_shifts.tables.items()})
    flat = grads.flat()
    if set(flat) != set(current):
        raise ShapeMismatchError("gradient names do not match the trainable tensors")
    m_new, v_new = {}, {}
    for name, p in current.items():
        g = flat[name]
        if g.shape != p.shape:
            raise ShapeMismatchError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p *= 1.0 - config.lr * config.weight_decay
        p -= config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
        m_new[name], v_new[name] = m, v
    return AdamState(m_new, v_new, t), new_params, new_shifts


# ----------------------------------------------------------------------------
# data and loop


@dataclass
class TrainingData:
    X: np.ndarray
    conf_gt: np.ndarray
    level_gt: np.ndarray

    def __len__(self) -> int:
        return self.X.shape[0]

    def batch(self, groups: Mapping[DegradationType, np.ndarray]) -> StepBatch:
        rows = [np.asarray(groups[t], dtype=int) for t in TYPES if t in groups]
        allrows = np.concatenate(rows) if rows else np.zeros(0, dtype=int)
        local, offset = {}, 0
        for t in TYPES:
            if t in groups:
                n = len(groups[t])
                local[t] = np.arange(offset, offset + n)
                offset += n
        return StepBatch(self.X[allrows], self.conf_gt[allrows], self.level_gt[allrows], local)


def targets_from_manifest(manifest: DatasetManifest) -> tuple[np.ndarray, np.ndarray]:
    n = len(manifest.records)
    conf = np.zeros((n, len(TYPES)))
    level = np.full((n, len(TYPES)), np.nan)
    for i, r in enumerate(manifest.records):
        for t in TYPES:
            if r.conf_gt[t.value]:
                conf[i, t.order] = 1.0
                level[i, t.order] = float(np.clip(LEVEL_RANGES[t].normalize(r.level_gt[t.value]), 0.0, 1.0))
    return conf, level


def manifest_features(manifest: DatasetManifest) -> np.ndarray:
    return np.stack([extract_features(load_image(manifest.resolve(r.lq_path))) for r in manifest.records])


def training_data(manifest: DatasetManifest, features: np.ndarray | None = None) -> TrainingData:
    if not manifest.records:
        raise EmptyDatasetError("cannot train on an empty manifest")
    X = manifest_features(manifest) if features is None else np.asarray(features, dtype=np.float64)
    conf, level = targets_from_manifest(manifest)
    if X.shape[0] != conf.shape[0]:
        raise ShapeMismatchError("one feature row per manifest record required")
    return TrainingData(X, conf, level)


def init_model(config: TrainConfig, n_features: int) -> Model:
    arch = EncoderArch(n_features=n_features, hidden=config.hidden, d=config.d)
    params = init_params(config.seed, arch)
    anchors = make_anchors(config.d, config.seed)
    return Model(params, ShiftTable.zeros(config.spec, config.gap), anchors, config.spec, config.gap)


def epoch_groups(data: TrainingData, config: TrainConfig, epoch: int) -> list[dict[DegradationType, np.ndarray]]:
    """Per-step, per-type row batches for one epoch (seeded shuffle)."""
    rng = np.random.default_rng([config.seed, epoch, 0x5EED])
    pools = {}
    for t in TYPES:
        rows = np.flatnonzero(data.conf_gt[:, t.order] > 0)
        if rows.size:
            pools[t] = rows[rng.permutation(rows.size)]
    if not pools:
        raise EmptyDatasetError("no record has an active degradation type")
    m = config.batch_size
    n_steps = max(math.ceil(p.size / m) for p in pools.values())
    steps = []
    for s in range(n_steps):
        groups = {}
        for t, pool in pools.items():
            take = min(m, pool.size)
            groups[t] = np.take(pool, np.arange(s * m, s * m + take), mode="wrap")
        steps.append(groups)
    return steps


def train(
    config: TrainConfig,
    manifest: DatasetManifest | None = None,
    *,
    data: TrainingData | None = None,
    log_path=None,
    on_epoch: Callable[[int, LossBreakdown], None] | None = None,
) -> tuple[Checkpoint, list[LossBreakdown]]:
    """Train from a manifest (features are extracted) or from precomputed data."""
    if data is None:
        if manifest is None:
            raise EmptyDatasetError("train needs a manifest or precomputed data")
        data = training_data(manifest)
    if len(data) == 0:
        raise EmptyDatasetError("cannot train on an empty dataset")

    model = init_model(config, data.X.shape[1])
    fit_feature_scaling(model.params, data.X)
    state = AdamState()
    history: list[LossBreakdown] = []

    for epoch in range(config.epochs):
        sums = LossBreakdown()
        steps = epoch_groups(data, config, epoch)
        for s, groups in enumerate(steps):
            batch = data.batch(groups)
            try:
                breakdown, g = grad(model, batch, config)
            except ZeroNormError as exc:
                # a diverged model can collapse an embedding to zero
                raise NonFiniteLossError(f"degenerate embedding at epoch {epoch} step {s}: {exc}", batch_id=f"{epoch}:{s}") from exc
            if not (math.isfinite(breakdown.total) and g.all_finite()):
                raise NonFiniteLossError(
                    f"non-finite loss or gradient at epoch {epoch} step {s}", batch_id=f"{epoch}:{s}"
                )
            state, model.params, model.shifts = step(state, model.params, model.shifts, g, config)
            sums.conf += breakdown.conf
            sums.level += breakdown.level
            sums.scl += breakdown.scl
        n = len(steps)
        avg = LossBreakdown(sums.conf / n, sums.level / n, sums.scl / n)
        history.append(avg)
        log.debug("epoch %d conf=%.4f level=%.4f scl=%.4f", epoch, avg.conf, avg.level, avg.scl)
        if on_epoch is not None:
            on_epoch(epoch, avg)

    if log_path is not None:
        write_loss_log(history, log_path)
    return model.checkpoint({"train_config": config.to_json()}), history


def write_loss_log(history: Sequence[LossBreakdown], path) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "conf", "level", "scl", "total"])
        for i, b in enumerate(history):
            w.writerow([i + 1, repr(b.conf), repr(b.level), repr(b.scl), repr(b.total)])
