from __future__ import annotations

import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ordegrade.degrade import TYPES, DatasetConfig, DatasetManifest, generate_dataset
from ordegrade.encoder import init_params
from ordegrade.errors import EmptyDatasetError, KeyMismatchError, NonFiniteLossError, ShapeMismatchError, ZeroNormError
from ordegrade.ordspace import bin_level_norms
from ordegrade.train import (
    ABLATIONS,
    AdamState,
    Gradients,
    Model,
    SclBatch,
    SclItem,
    StepBatch,
    TrainConfig,
    TrainingData,
    grad,
    init_model,
    loss_conf,
    loss_level,
    loss_scl,
    ordinal_weights,
    scl_loss_and_grad,
    step,
    total_loss,
    train,
)

B, D, N, J = TYPES


def small_config(**kw):
    base = dict(d=8, hidden=(6, 5), gap=25.0, tau=0.5, tau_w=0.3, top_k=2, batch_size=3)
    base.update(kw)
    return TrainConfig(**base)


def random_instance(seed, m=3, n_features=4, **cfg_kw):
    """Small model with perturbed weights/shifts and a batch giving every type m rows."""
    rng = np.random.default_rng(seed)
    cfg = small_config(**cfg_kw)
    b = 2 * m
    X = rng.normal(size=(b, n_features))
    conf = (rng.random((b, 4)) < 0.5).astype(float)
    for t in TYPES:
        rows = rng.choice(b, size=m, replace=False)
        conf[rows, t.order] = 1.0
    level = np.where(conf > 0, rng.random((b, 4)), np.nan)
    groups = {t: rng.permutation(np.flatnonzero(conf[:, t.order] > 0))[:m] for t in TYPES}
    batch = StepBatch(X, conf, level, groups)
    model = init_model(cfg, n_features)
    for t in TYPES:
        model.shifts.tables[t][:] = 0.3 * rng.normal(size=model.shifts[t].shape)
    for k in model.params.weights:
        model.params.weights[k] += 0.1 * rng.normal(size=model.params.weights[k].shape)
    return model, batch, cfg


def numeric_gradients(model: Model, batch, cfg, h=1e-5, max_coords=None, seed=0):
    """Central differences; with ``max_coords`` only a seeded sample of entries
    per tensor is probed and the rest are left NaN."""
    out = {}
    rng = np.random.default_rng(seed)
    tensors = dict(model.params.weights)
    tensors.update({f"shift.{t.value}": model.shifts.tables[t] for t in TYPES})
    for name, arr in tensors.items():
        num = np.full_like(arr, np.nan)
        coords = list(np.ndindex(arr.shape))
        if max_coords is not None and len(coords) > max_coords:
            coords = [coords[i] for i in rng.choice(len(coords), max_coords, replace=False)]
        for idx in coords:
            old = arr[idx]
            arr[idx] = old + h
            fp = total_loss(model, batch, cfg)
            arr[idx] = old - h
            fm = total_loss(model, batch, cfg)
            arr[idx] = old
            num[idx] = (fp - fm) / (2 * h)
        out[name] = num
    return out


def max_relative_error(analytic: Gradients, numeric: dict) -> float:
    a = analytic.flat()
    worst = 0.0
    for name, num in numeric.items():
        probed = ~np.isnan(num)
        scale = max(np.abs(num[probed]).max(), np.abs(a[name][probed]).max(), 1e-8)
        worst = max(worst, np.abs(a[name][probed] - num[probed]).max() / scale)
    return worst


class TestConfidenceLoss:
    def test_zero(self):
        g = {"Blur": 1, "Downsample": 0, "Noisy": 1, "JPEG": 0}
        assert loss_conf(g, g) == 0.0

    def test_half_predictions(self):
        preds = {t: 0.5 for t in TYPES}
        gts = {B: 1, D: 0, N: 0, J: 0}
        assert loss_conf(preds, gts) == pytest.approx(1.0, abs=1e-15)

    def test_type_permutation(self, rng):
        p = {t: rng.random(5) for t in TYPES}
        g = {t: (rng.random(5) < 0.5).astype(float) for t in TYPES}
        perm = dict(zip(TYPES, TYPES[::-1]))
        assert loss_conf({perm[t]: v for t, v in p.items()}, {perm[t]: v for t, v in g.items()}) == pytest.approx(loss_conf(p, g))

    def test_batch_average(self):
        p = {t: [0.5, 0.0] for t in TYPES}
        g = {t: [0.0, 0.0] for t in TYPES}
        assert loss_conf(p, g) == pytest.approx(0.5)

    def test_key_mismatch(self):
        with pytest.raises(KeyMismatchError):
            loss_conf({B: 0.5}, {D: 1})


class TestLevelLoss:
    def test_zero(self):
        assert loss_level({B: 0.4}, {B: 0.4}, [B]) == 0.0

    def test_single(self):
        assert loss_level({B: 0.8}, {B: 0.5}, [B]) == pytest.approx(0.3)

    def test_two_types(self):
        assert loss_level({B: 0.5, J: 0.1}, {B: 0.4, J: 0.3}, [B, J]) == pytest.approx(0.3)

    def test_inactive_ignored(self):
        assert loss_level({B: 0.5, J: 0.9}, {B: 0.5, J: 0.0}, [B]) == 0.0

    def test_key_mismatch(self):
        with pytest.raises(KeyMismatchError):
            loss_level({B: 0.5}, {B: 0.5}, [B, N])


class TestSclLoss:
    def test_single_item(self):
        item = SclItem(np.array([1.0, 2.0]), np.array([0.3, 1.0]), 0.5, B)
        assert loss_scl(SclBatch([item], tau=0.07)) == 0.0

    def test_two_orthogonal_pairs(self):
        e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        batch = SclBatch([SclItem(e1, e1, 0.2, N), SclItem(e2, e2, 0.8, N)], tau=1.0)
        assert loss_scl(batch) == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-15)

    def test_equal_levels_collapse(self, rng):
        items = [SclItem(rng.normal(size=6), rng.normal(size=6), 0.4, J) for _ in range(5)]
        assert loss_scl(SclBatch(items, tau=0.1)) == pytest.approx(0.0, abs=1e-15)

    def test_zero_embedding(self):
        items = [SclItem(np.zeros(3), np.ones(3), 0.1, B), SclItem(np.ones(3), np.ones(3), 0.9, B)]
        with pytest.raises(ZeroNormError):
            loss_scl(SclBatch(items))

    def test_mixed_types_rejected(self):
        with pytest.raises(ValueError):
            SclBatch([SclItem(np.ones(2), np.ones(2), 0.1, B), SclItem(np.ones(2), np.ones(2), 0.2, J)])

    def test_max_normalized_weights(self):
        lam = ordinal_weights([0.0, 0.25, 1.0])
        np.testing.assert_allclose(lam, [[0, 0.25, 1], [1 / 3, 0, 1], [1, 0.75, 0]])

    @given(st.integers(2, 8), st.integers(0, 2**31 - 1), st.floats(0.02, 2.0))
    @settings(max_examples=60)
    def test_nonnegative(self, m, seed, tau):
        rng = np.random.default_rng(seed)
        value, _, _ = scl_loss_and_grad(rng.normal(size=(m, 5)), rng.normal(size=(m, 5)), rng.random(m), tau)
        assert value >= -1e-12


class TestGradient:
    @pytest.mark.parametrize("seed", range(3))
    def test_finite_differences(self, seed):
        model, batch, cfg = random_instance(seed)
        _, g = grad(model, batch, cfg)
        assert max_relative_error(g, numeric_gradients(model, batch, cfg)) < 1e-4

    def test_every_tensor_receives_gradient(self):
        model, batch, cfg = random_instance(11)
        _, g = grad(model, batch, cfg)
        for name, arr in g.flat().items():
            assert np.abs(arr).max() > 0, name

    def test_stationary_at_zero_loss(self):
        cfg = small_config(top_k=1, use_scl=False)
        model = init_model(cfg, 4)
        model.params = init_params(0, model.params.arch, zero_heads=True)
        grid = model.grids()
        u = bin_level_norms(cfg.gap)
        conf = np.tile([1.0, 0.0, 1.0, 0.0], (4, 1))
        level = np.tile([u[1], np.nan, u[3], np.nan], (4, 1))
        for t, sign in zip(TYPES, (1, -1, 1, -1)):
            w = model.params.weights
            idx = {B: 1, N: 3}.get(t, 0)
            w[f"head.{t.value}.b"][:-1] = grid[t].centers[idx]
            w[f"head.{t.value}.b"][-1] = 60.0 * sign
        rows = np.arange(4)
        batch = StepBatch(np.random.default_rng(0).normal(size=(4, 4)), conf, level, {B: rows, N: rows})
        breakdown, g = grad(model, batch, cfg)
        assert breakdown.total < 1e-20
        assert math.sqrt(sum(float(np.sum(v * v)) for v in g.flat().values())) < 1e-8

    def test_duplication_invariance(self):
        model, batch, cfg = random_instance(4, use_scl=False)
        l1, g1 = grad(model, batch, cfg)
        l2, g2 = grad(model, batch.duplicated(), cfg)
        assert l2.total == pytest.approx(l1.total, abs=1e-12)
        for name, v in g1.flat().items():
            np.testing.assert_allclose(g2.flat()[name], v, rtol=0, atol=1e-12)

    def test_additivity_and_toggles(self):
        for name, (use_level, use_scl) in ABLATIONS.items():
            model, batch, cfg = random_instance(5, use_level=use_level, use_scl=use_scl)
            b, _ = grad(model, batch, cfg)
            assert b.total == b.conf + b.level + b.scl
            assert (b.level > 0) == use_level and (b.scl > 0) == use_scl


class TestAdamW:
    def _zero_grads(self, model):
        return Gradients(
            {k: np.zeros_like(v) for k, v in model.params.weights.items()},
            {t: np.zeros_like(model.shifts[t]) for t in TYPES},
        )

    def test_zero_gradient_zero_decay(self):
        model, _, _ = random_instance(0)
        cfg = small_config(weight_decay=0.0)
        _, p, s = step(AdamState(), model.params, model.shifts, self._zero_grads(model), cfg)
        for k, v in model.params.weights.items():
            np.testing.assert_array_equal(p.weights[k], v)
        for t in TYPES:
            np.testing.assert_array_equal(s[t], model.shifts[t])

    def test_first_step_is_sign_like(self):
        model, batch, _ = random_instance(1)
        cfg = small_config(weight_decay=0.0, lr=1e-3)
        _, g = grad(model, batch, cfg)
        state, p, s = step(AdamState(), model.params, model.shifts, g, cfg)
        assert state.t == 1
        for k, v in model.params.weights.items():
            gk = g.params[k]
            np.testing.assert_allclose(p.weights[k] - v, -cfg.lr * gk / (np.abs(gk) + cfg.eps), rtol=1e-9, atol=1e-15)

    def test_decoupled_decay(self):
        model, _, _ = random_instance(2)
        cfg = small_config(weight_decay=0.5, lr=0.1)
        _, p, _ = step(AdamState(), model.params, model.shifts, self._zero_grads(model), cfg)
        for k, v in model.params.weights.items():
            np.testing.assert_allclose(p.weights[k], v * (1 - 0.05), rtol=1e-15)

    def test_deterministic_and_pure(self):
        model, batch, cfg = random_instance(3)
        _, g = grad(model, batch, cfg)
        before = {k: v.copy() for k, v in model.params.weights.items()}
        a = step(AdamState(), model.params, model.shifts, g, cfg)
        b = step(AdamState(), model.params, model.shifts, g, cfg)
        for k in before:
            np.testing.assert_array_equal(model.params.weights[k], before[k])
            np.testing.assert_array_equal(a[1].weights[k], b[1].weights[k])

    def test_shape_mismatch(self):
        model, batch, cfg = random_instance(3)
        _, g = grad(model, batch, cfg)
        g.params["trunk.0.W"] = np.zeros((1, 1))
        with pytest.raises(ShapeMismatchError):
            step(AdamState(), model.params, model.shifts, g, cfg)


def toy_data(seed=0, n=24, n_features=4):
    rng = np.random.default_rng(seed)
    conf = np.zeros((n, 4))
    conf[np.arange(n), np.arange(n) % 4] = 1.0
    level = np.where(conf > 0, rng.random((n, 4)), np.nan)
    X = np.concatenate([conf, np.nan_to_num(level)], axis=1)[:, :n_features] + 0.01 * rng.normal(size=(n, n_features))
    return TrainingData(X, conf, level)


class TestTrainLoop:
    def test_zero_epochs_is_initialization(self):
        data = toy_data()
        cfg = small_config(epochs=0)
        ck, history = train(cfg, data=data)
        ref = init_model(cfg, 4)
        assert history == []
        for k, v in ref.params.weights.items():
            np.testing.assert_array_equal(ck.params.weights[k], v)
        for t in TYPES:
            assert not ck.shifts[t].any()
        np.testing.assert_allclose(ck.params.feat_mean, data.X.mean(axis=0))

    def test_ablation_a_is_confidence_only(self):
        cfg = small_config(epochs=2, **dict(zip(("use_level", "use_scl"), ABLATIONS["A"])))
        _, history = train(cfg, data=toy_data())
        assert all(b.level == 0.0 and b.scl == 0.0 and b.total == b.conf for b in history)

    def test_for_ablation(self):
        assert (TrainConfig.for_ablation("A").use_level, TrainConfig.for_ablation("A").use_scl) == (False, False)
        assert (TrainConfig.for_ablation("d").use_level, TrainConfig.for_ablation("d").use_scl) == (True, True)

    def test_reproducible(self):
        cfg = small_config(epochs=3, seed=7)
        a, ha = train(cfg, data=toy_data())
        b, hb = train(cfg, data=toy_data())
        assert a.to_json() == b.to_json()
        assert [x.total for x in ha] == [x.total for x in hb]

    def test_loss_log(self, tmp_path):
        train(small_config(epochs=3), data=toy_data(), log_path=tmp_path / "loss.csv")
        rows = list(csv.DictReader(open(tmp_path / "loss.csv")))
        assert [r["epoch"] for r in rows] == ["1", "2", "3"]
        for r in rows:
            assert float(r["total"]) == pytest.approx(float(r["conf"]) + float(r["level"]) + float(r["scl"]))

    def test_empty(self, tmp_path):
        with pytest.raises(EmptyDatasetError):
            train(small_config(), DatasetManifest([], 1, tmp_path))

    def test_non_finite_reports_batch(self):
        data = toy_data()
        data.X[3, 0] = np.nan
        with pytest.raises(NonFiniteLossError) as info:
            train(small_config(epochs=1), data=data)
        assert info.value.batch_id == "0:0"

    def test_loss_decreases_on_four_image_set(self, clean_dir, tmp_path):
        manifest = generate_dataset(clean_dir, tmp_path, DatasetConfig(count=32, seed=1, patch_size=96))
        _, history = train(TrainConfig(epochs=50, seed=0), manifest)
        assert history[-1].total < history[0].total


def test_invalid_config():
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(tau=-1.0)
