"""Type detection, top-k local interpolation level regression, metrics and the
predict-then-resynthesize round trip."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .degrade import (
    LEVEL_RANGES,
    TYPES,
    DatasetManifest,
    DegradationRecipe,
    DegradationType,
    load_image,
    synthesize,
)
from .encoder import Checkpoint, extract_features, forward_batch
from .errors import ConstantInputError, EmptyDatasetError, IOFailure
from .features import luminance, radial_spectrum
from .numerics import normalize_rows, pearson, spearman
from .ordspace import build_grids


@dataclass(frozen=True)
class RegressionConfig:
    """``k`` is a bin count or ``"all"``; weights are softmax(cos / tau_w)."""

    k: int | str = 2
    conf_threshold: float = 0.5
    tau_w: float = 0.05

    def __post_init__(self):
        if isinstance(self.k, str):
            if self.k != "all":
                raise ValueError(f"k must be a positive integer or 'all', got {self.k!r}")
        elif int(self.k) != self.k or self.k < 1:
            raise ValueError(f"k must be a positive integer or 'all', got {self.k!r}")
        if not 0.0 < self.conf_threshold < 1.0:
            raise ValueError("conf_threshold must lie in (0, 1)")
        if not self.tau_w > 0:
            raise ValueError("tau_w must be > 0")

    def resolve_k(self, n_bins: int) -> int:
        if self.k == "all":
            return n_bins
        if self.k > n_bins:
            raise ValueError(f"k={self.k} exceeds the {n_bins} bins of the grid")
        return int(self.k)

    def to_json(self) -> dict:
        return {"k": self.k, "conf_threshold": self.conf_threshold, "tau_w": self.tau_w}


# ----------------------------------------------------------------------------
# top-k regression and its backward pass (shared with training)


def cosine_backward(a_hat, a_norm, b_hat, b_norm, S, gS):
    """Partials of sum(gS * cos(a_i, b_j)) w.r.t. the raw rows of a and b."""
    ga = (gS @ b_hat - np.sum(gS * S, axis=1)[:, None] * a_hat) / a_norm
    gb = (gS.T @ a_hat - np.sum(gS * S, axis=0)[:, None] * b_hat) / b_norm
    return ga, gb


@dataclass
class LevelCache:
    z_hat: np.ndarray
    z_norm: np.ndarray
    c_hat: np.ndarray
    c_norm: np.ndarray
    sims: np.ndarray
    top: np.ndarray
    weights: np.ndarray
    pred: np.ndarray
    level_norms: np.ndarray


def topk_level(z, centers, level_norms, k: int, tau_w: float) -> tuple[np.ndarray, LevelCache]:
    """Similarity-weighted mean of the levels of the ``k`` most similar bins."""
    z_hat, z_norm = normalize_rows(np.atleast_2d(z))
    c_hat, c_norm = normalize_rows(centers)
    level_norms = np.asarray(level_norms, dtype=np.float64)
    sims = np.clip(z_hat @ c_hat.T, -1.0, 1.0)
    k = min(int(k), c_hat.shape[0])
    top = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    sel = np.take_along_axis(sims, top, axis=1) / tau_w
    sel = sel - sel.max(axis=1, keepdims=True)
    w = np.exp(sel)
    w /= w.sum(axis=1, keepdims=True)
    pred = np.sum(w * level_norms[top], axis=1)
    return pred, LevelCache(z_hat, z_norm, c_hat, c_norm, sims, top, w, pred, level_norms)


def topk_level_backward(cache: LevelCache, g_pred, tau_w: float) -> tuple[np.ndarray, np.ndarray]:
    lv = cache.level_norms[cache.top]
    g_sel = np.asarray(g_pred)[:, None] * cache.weights * (lv - cache.pred[:, None]) / tau_w
    gS = np.zeros_like(cache.sims)
    np.put_along_axis(gS, cache.top, g_sel, axis=1)
    return cosine_backward(cache.z_hat, cache.z_norm, cache.c_hat, cache.c_norm, cache.sims, gS)


# ----------------------------------------------------------------------------
# prediction


@dataclass(frozen=True)
class TypePrediction:
    present: bool
    conf: float
    level_norm: float | None = None
    level_raw: float | None = None

    def to_json(self) -> dict:
        return {"present": self.present, "conf": self.conf, "level_norm": self.level_norm, "level_raw": self.level_raw}


@dataclass(frozen=True)
class LevelPrediction:
    types: dict[DegradationType, TypePrediction]

    def __getitem__(self, t) -> TypePrediction:
        return self.types[DegradationType(t) if not isinstance(t, DegradationType) else t]

    def present(self) -> tuple[DegradationType, ...]:
        return tuple(t for t in TYPES if self.types[t].present)

    def to_json(self) -> dict:
        return {t.value: self.types[t].to_json() for t in TYPES}

    def recipe(self, seed: int = 0) -> DegradationRecipe | None:
        entries = {t: self.types[t].level_raw for t in self.present()}
        return DegradationRecipe(entries, seed) if entries else None


@dataclass
class BatchPrediction:
    """Confidences and normalized levels for every type, whether detected or not."""

    conf: np.ndarray  # (B, 4)
    level_norm: np.ndarray  # (B, 4)

    def present(self, threshold: float) -> np.ndarray:
        return self.conf >= threshold

    def level_raw(self) -> np.ndarray:
        out = np.empty_like(self.level_norm)
        for t in TYPES:
            out[:, t.order] = [LEVEL_RANGES[t].denormalize(u) for u in self.level_norm[:, t.order]]
        return out

    def item(self, i: int, threshold: float) -> LevelPrediction:
        raw = self.level_raw()
        types = {}
        for t in TYPES:
            c = float(self.conf[i, t.order])
            if c >= threshold:
                types[t] = TypePrediction(True, c, float(self.level_norm[i, t.order]), float(raw[i, t.order]))
            else:
                types[t] = TypePrediction(False, c)
        return LevelPrediction(types)


def predict_batch(ckpt: Checkpoint, X, cfg: RegressionConfig) -> BatchPrediction:
    out = forward_batch(ckpt.params, X)
    grids = build_grids(ckpt.spec, ckpt.anchors, ckpt.shifts, ckpt.gap)
    level = np.empty_like(out.conf)
    for t in TYPES:
        g = grids[t]
        k = cfg.resolve_k(g.n_bins)
        level[:, t.order], _ = topk_level(out.emb[t.order], g.centers, g.level_norms, k, cfg.tau_w)
    return BatchPrediction(out.conf, np.clip(level, 0.0, 1.0))


def predict_features(ckpt: Checkpoint, feat, cfg: RegressionConfig | None = None) -> LevelPrediction:
    cfg = cfg or RegressionConfig()
    return predict_batch(ckpt, np.asarray(feat, dtype=np.float64)[None, :], cfg).item(0, cfg.conf_threshold)


def predict(ckpt: Checkpoint, img, cfg: RegressionConfig | None = None) -> LevelPrediction:
    return predict_features(ckpt, extract_features(img), cfg)


# ----------------------------------------------------------------------------
# metrics


@dataclass
class TypeMetrics:
    n: int
    mae: float | None
    mae_norm: float | None
    srocc: float | None
    pcc: float | None

    def to_json(self) -> dict:
        return {"n": self.n, "mae": self.mae, "mae_norm": self.mae_norm, "srocc": self.srocc, "pcc": self.pcc}


@dataclass
class MetricsReport:
    """Type accuracy in percent; level metrics per type and macro-averaged over types."""

    type_acc: float
    mae: float | None
    mae_norm: float | None
    srocc: float | None
    pcc: float | None
    per_type: dict[DegradationType, TypeMetrics]
    n_records: int
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "type_acc": self.type_acc,
            "mae": self.mae,
            "mae_norm": self.mae_norm,
            "srocc": self.srocc,
            "pcc": self.pcc,
            "n_records": self.n_records,
            "per_type": {t.value: m.to_json() for t, m in self.per_type.items()},
            "config": self.config,
        }

    def csv_rows(self) -> list[list]:
        rows = [["type", "n", "mae", "mae_norm", "srocc", "pcc"]]
        for t, m in self.per_type.items():
            rows.append([t.value, m.n, m.mae, m.mae_norm, m.srocc, m.pcc])
        rows.append(["macro", self.n_records, self.mae, self.mae_norm, self.srocc, self.pcc])
        rows.append(["type_acc", self.n_records, self.type_acc, None, None, None])
        return rows

    def save(self, json_path, csv_path=None) -> None:
        try:
            Path(json_path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True), encoding="utf-8")
            if csv_path is not None:
                with open(csv_path, "w", newline="", encoding="utf-8") as fh:
                    w = csv.writer(fh)
                    for row in self.csv_rows():
                        w.writerow(["" if v is None else v for v in row])
        except OSError as exc:
            raise IOFailure(f"cannot write report: {exc}") from exc


def _correlation(fn, xs, ys) -> float | None:
    # undefined for fewer than two pairs or constant input
    if len(xs) < 2:
        return None
    try:
        return fn(xs, ys)
    except ConstantInputError:
        return None


def _mean_defined(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def metrics_from_arrays(present_pred, level_pred_norm, conf_gt, level_gt_norm, config: dict | None = None) -> MetricsReport:
    """Metrics from (B, 4) arrays; gt levels are NaN where a type is absent.

    Levels are scored for every gt-active type, detected or not.
    """
    present_pred = np.asarray(present_pred, dtype=bool)
    conf_gt = np.asarray(conf_gt) > 0
    n = conf_gt.shape[0]
    if n == 0:
        raise EmptyDatasetError("cannot evaluate an empty set")
    type_acc = 100.0 * float(np.mean(np.all(present_pred == conf_gt, axis=1)))
    per_type = {}
    for t in TYPES:
        rows = conf_gt[:, t.order]
        r = LEVEL_RANGES[t]
        pn = np.asarray(level_pred_norm)[rows, t.order]
        gn = np.asarray(level_gt_norm)[rows, t.order]
        if pn.size == 0:
            per_type[t] = TypeMetrics(0, None, None, None, None)
            continue
        pr = np.array([r.denormalize(u) for u in pn])
        gr = np.array([r.denormalize(u) for u in gn])
        per_type[t] = TypeMetrics(
            int(pn.size),
            float(np.mean(np.abs(pr - gr))),
            float(np.mean(np.abs(pn - gn))),
            _correlation(spearman, pn, gn),
            _correlation(pearson, pn, gn),
        )
    ms = per_type.values()
    return MetricsReport(
        type_acc,
        _mean_defined(m.mae for m in ms),
        _mean_defined(m.mae_norm for m in ms),
        _mean_defined(m.srocc for m in ms),
        _mean_defined(m.pcc for m in ms),
        per_type,
        n,
        dict(config or {}),
    )


def evaluate(
    ckpt: Checkpoint, manifest: DatasetManifest, cfg: RegressionConfig | None = None, features=None
) -> MetricsReport:
    """Score a checkpoint on a manifest; pass ``features`` to skip re-extraction."""
    from .train import manifest_features, targets_from_manifest

    cfg = cfg or RegressionConfig()
    if not manifest.records:
        raise EmptyDatasetError("cannot evaluate an empty manifest")
    X = manifest_features(manifest) if features is None else np.asarray(features, dtype=np.float64)
    conf_gt, level_gt = targets_from_manifest(manifest)
    pred = predict_batch(ckpt, X, cfg)
    return metrics_from_arrays(
        pred.present(cfg.conf_threshold), pred.level_norm, conf_gt, level_gt, {"regression": cfg.to_json(), "gap": ckpt.gap}
    )


# ----------------------------------------------------------------------------
# round trip


@dataclass
class RoundTrip:
    prediction: LevelPrediction
    recipe: DegradationRecipe | None
    resynth_img: np.ndarray
    spectral_distance: float


def spectral_distance(a, b) -> float:
    """L2 distance between the 16-bin radial log spectra of two images."""
    return float(np.linalg.norm(radial_spectrum(luminance(a)) - radial_spectrum(luminance(b))))


def resynthesize(clean_img, recipe: DegradationRecipe | None) -> np.ndarray:
    return np.asarray(clean_img).copy() if recipe is None else synthesize(clean_img, recipe)


def roundtrip(ckpt: Checkpoint, lq_img, clean_img, cfg: RegressionConfig | None = None, seed: int = 0) -> RoundTrip:
    """Predict a recipe from ``lq_img``, apply it to ``clean_img`` and compare spectra."""
    pred = predict(ckpt, lq_img, cfg)
    recipe = pred.recipe(seed)
    out = resynthesize(clean_img, recipe)
    return RoundTrip(pred, recipe, out, spectral_distance(lq_img, out))


def load_and_roundtrip(ckpt: Checkpoint, lq_path, clean_path, cfg=None, seed: int = 0) -> RoundTrip:
    return roundtrip(ckpt, load_image(lq_path), load_image(clean_path), cfg, seed)


def report_schema() -> dict:
    """JSON schema that every serialized MetricsReport satisfies."""
    from importlib.resources import files

    return json.loads(files("ordegrade").joinpath("schemas/metrics_report.schema.json").read_text(encoding="utf-8"))
