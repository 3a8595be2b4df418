"""Toy degradation encoder: feature standardization, ReLU trunk, four affine heads.

Each head maps the shared embedding to ``d + 1`` outputs: a ``d``-dim per-type
embedding and a confidence logit squashed with the logistic function.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .degrade import TYPES, DegradationType, as_type
from .errors import InvalidCheckpointError, IOFailure, ShapeMismatchError
from .features import N_FEATURES, extract_features  # noqa: F401
from .ordspace import OrdinalEncoderSpec, ShiftTable, TypeAnchor, n_bins

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class EncoderArch:
    n_features: int = N_FEATURES
    hidden: tuple[int, ...] = (256, 256)
    d: int = 512

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.n_features < 1 or self.d < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("all layer widths must be positive")

    @property
    def trunk_dims(self) -> list[int]:
        return [self.n_features, *self.hidden, self.d]

    def shapes(self) -> dict[str, tuple[int, ...]]:
        out: dict[str, tuple[int, ...]] = {}
        dims = self.trunk_dims
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            out[f"trunk.{i}.W"] = (a, b)
            out[f"trunk.{i}.b"] = (b,)
        for t in TYPES:
            out[f"head.{t.value}.W"] = (self.d, self.d + 1)
            out[f"head.{t.value}.b"] = (self.d + 1,)
        return out

    def param_count(self) -> int:
        return int(sum(np.prod(s) for s in self.shapes().values()))

    def to_json(self) -> dict:
        return {"n_features": self.n_features, "hidden": list(self.hidden), "d": self.d}

    @classmethod
    def from_json(cls, obj) -> "EncoderArch":
        return cls(int(obj["n_features"]), tuple(obj["hidden"]), int(obj["d"]))


@dataclass
class EncoderParams:
    arch: EncoderArch
    weights: dict[str, np.ndarray]
    feat_mean: np.ndarray
    feat_std: np.ndarray
    seed: int = 0

    def __post_init__(self):
        shapes = self.arch.shapes()
        if set(shapes) != set(self.weights):
            raise ShapeMismatchError("parameter names do not match the architecture")
        for name, shape in shapes.items():
            if self.weights[name].shape != shape:
                raise ShapeMismatchError(f"{name}: expected {shape}, got {self.weights[name].shape}")
        f = self.arch.n_features
        if self.feat_mean.shape != (f,) or self.feat_std.shape != (f,):
            raise ShapeMismatchError("feature normalization must have one entry per feature")

    @property
    def n_trunk(self) -> int:
        return len(self.arch.trunk_dims) - 1

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            self.arch,
            {k: v.copy() for k, v in self.weights.items()},
            self.feat_mean.copy(),
            self.feat_std.copy(),
            self.seed,
        )

    def param_count(self) -> int:
        return int(sum(v.size for v in self.weights.values()))


def init_params(seed: int = 0, arch: EncoderArch | None = None, zero_heads: bool = False) -> EncoderParams:
    """Fan-in scaled uniform weights, zero biases, identity feature scaling."""
    arch = arch or EncoderArch()
    rng = np.random.default_rng([seed, 0xE1C])
    weights = {}
    n_trunk = len(arch.trunk_dims) - 1
    for name, shape in arch.shapes().items():
        if name.endswith(".b"):
            weights[name] = np.zeros(shape)
            continue
        fan_in = shape[0]
        is_head = name.startswith("head.")
        if is_head and zero_heads:
            weights[name] = np.zeros(shape)
            continue
        # He bound for layers followed by ReLU, variance-preserving otherwise
        relu_next = not is_head and int(name.split(".")[1]) < n_trunk - 1
        bound = np.sqrt((6.0 if relu_next else 3.0) / fan_in)
        weights[name] = rng.uniform(-bound, bound, size=shape)
    f = arch.n_features
    return EncoderParams(arch, weights, np.zeros(f), np.ones(f), seed)


@dataclass
class EncoderOutput:
    shared: np.ndarray
    per_type: dict[DegradationType, dict]


@dataclass
class BatchOutput:
    shared: np.ndarray  # (B, d)
    emb: np.ndarray  # (4, B, d) in TYPES order
    conf: np.ndarray  # (B, 4)
    cache: dict = field(default_factory=dict, repr=False)


def forward_batch(params: EncoderParams, X) -> BatchOutput:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.arch.n_features:
        raise ShapeMismatchError(f"expected (B, {params.arch.n_features}) features, got {X.shape}")
    w = params.weights
    h = (X - params.feat_mean) / params.feat_std
    acts = [h]
    n = params.n_trunk
    for i in range(n):
        h = h @ w[f"trunk.{i}.W"] + w[f"trunk.{i}.b"]
        if i < n - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    shared = h
    d = params.arch.d
    outs = np.stack([shared @ w[f"head.{t.value}.W"] + w[f"head.{t.value}.b"] for t in TYPES])
    emb = outs[:, :, :d]
    conf = expit(outs[:, :, d]).T
    return BatchOutput(shared, emb, conf, {"acts": acts})


def forward(params: EncoderParams, feat) -> EncoderOutput:
    out = forward_batch(params, np.asarray(feat, dtype=np.float64)[None, :])
    per_type = {t: {"emb": out.emb[i, 0], "conf": float(out.conf[0, i])} for i, t in enumerate(TYPES)}
    return EncoderOutput(out.shared[0], per_type)


def backward_batch(params: EncoderParams, out: BatchOutput, g_emb, g_conf) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given its partials w.r.t. ``emb`` and ``conf``."""
    w = params.weights
    d = params.arch.d
    acts = out.cache["acts"]
    shared = out.shared
    g_emb = np.asarray(g_emb, dtype=np.float64)
    g_conf = np.asarray(g_conf, dtype=np.float64)
    grads: dict[str, np.ndarray] = {}
    g_shared = np.zeros_like(shared)
    for i, t in enumerate(TYPES):
        c = out.conf[:, i]
        g_out = np.empty((shared.shape[0], d + 1))
        g_out[:, :d] = g_emb[i]
        g_out[:, d] = g_conf[:, i] * c * (1.0 - c)
        grads[f"head.{t.value}.W"] = shared.T @ g_out
        grads[f"head.{t.value}.b"] = g_out.sum(axis=0)
        g_shared += g_out @ w[f"head.{t.value}.W"].T
    g = g_shared
    for i in reversed(range(params.n_trunk)):
        if i < params.n_trunk - 1:
            g = g * (acts[i + 1] > 0.0)
        grads[f"trunk.{i}.W"] = acts[i].T @ g
        grads[f"trunk.{i}.b"] = g.sum(axis=0)
        g = g @ w[f"trunk.{i}.W"].T
    return grads


def fit_feature_scaling(params: EncoderParams, X) -> None:
    """Set the fixed input standardization from a feature matrix."""
    X = np.asarray(X, dtype=np.float64)
    params.feat_mean = X.mean(axis=0)
    std = X.std(axis=0)
    params.feat_std = np.where(std > 1e-12, std, 1.0)


# ----------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    """Everything inference needs: encoder, bin shifts, anchors and grid spec."""

    params: EncoderParams
    shifts: ShiftTable
    anchors: dict[DegradationType, TypeAnchor]
    spec: OrdinalEncoderSpec
    gap: float
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        p = self.params
        return {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "arch": p.arch.to_json(),
            "seed": p.seed,
            "param_count": p.param_count(),
            "weights": {k: v.ravel().tolist() for k, v in p.weights.items()},
            "feature_scaling": {"mean": p.feat_mean.tolist(), "std": p.feat_std.tolist()},
            "shifts": {t.value: a.ravel().tolist() for t, a in self.shifts.tables.items()},
            "anchors": {t.value: a.vector.tolist() for t, a in self.anchors.items()},
            "spec": {"d": self.spec.d, "f": self.spec.f, "gap": self.gap},
            "extra": self.extra,
        }

    @classmethod
    def from_json(cls, obj) -> "Checkpoint":
        try:
            if obj.get("format_version") != CHECKPOINT_FORMAT_VERSION:
                raise InvalidCheckpointError(f"unsupported checkpoint version {obj.get('format_version')!r}")
            arch = EncoderArch.from_json(obj["arch"])
            if obj["param_count"] != arch.param_count():
                raise InvalidCheckpointError("stored parameter count disagrees with the architecture")
            shapes = arch.shapes()
            weights = {k: np.asarray(obj["weights"][k], dtype=np.float64).reshape(s) for k, s in shapes.items()}
            params = EncoderParams(
                arch,
                weights,
                np.asarray(obj["feature_scaling"]["mean"], dtype=np.float64),
                np.asarray(obj["feature_scaling"]["std"], dtype=np.float64),
                int(obj["seed"]),
            )
            if params.param_count() != arch.param_count():
                raise InvalidCheckpointError("parameter count mismatch after load")
            spec = OrdinalEncoderSpec(int(obj["spec"]["d"]), float(obj["spec"]["f"]))
            gap = float(obj["spec"]["gap"])
            if spec.d != arch.d:
                raise InvalidCheckpointError("ordinal dimension differs from encoder dimension")
            nb = n_bins(gap)
            shifts = ShiftTable(
                {as_type(k): np.asarray(v, dtype=np.float64).reshape(nb, spec.d) for k, v in obj["shifts"].items()}
            )
            anchors = {as_type(k): TypeAnchor(as_type(k), np.asarray(v)) for k, v in obj["anchors"].items()}
            if set(shifts.tables) != set(TYPES) or set(anchors) != set(TYPES):
                raise InvalidCheckpointError("checkpoint must cover all four degradation types")
            for arr in [*weights.values(), *shifts.tables.values()]:
                if not np.all(np.isfinite(arr)):
                    raise InvalidCheckpointError("checkpoint contains non-finite values")
            return cls(params, shifts, anchors, spec, gap, dict(obj.get("extra", {})))
        except InvalidCheckpointError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidCheckpointError(f"malformed checkpoint: {exc}") from exc

    def save(self, path) -> None:
        try:
            Path(path).write_text(json.dumps(self.to_json()), encoding="utf-8")
        except OSError as exc:
            raise IOFailure(f"cannot write checkpoint {path}: {exc}") from exc

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise IOFailure(f"cannot read checkpoint {path}: {exc}") from exc
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidCheckpointError(f"checkpoint is not valid JSON: {exc}") from exc
        if not isinstance(obj, dict):
            raise InvalidCheckpointError("checkpoint root must be an object")
        return cls.from_json(obj)
