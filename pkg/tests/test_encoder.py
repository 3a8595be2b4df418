from __future__ import annotations

import json

import numpy as np
import pytest

from ordegrade.degrade import TYPES
from ordegrade.encoder import (
    Checkpoint,
    EncoderArch,
    backward_batch,
    fit_feature_scaling,
    forward,
    forward_batch,
    init_params,
)
from ordegrade.errors import InvalidCheckpointError, IOFailure, ShapeMismatchError
from ordegrade.ordspace import OrdinalEncoderSpec, ShiftTable, make_anchors


def small_arch():
    return EncoderArch(n_features=4, hidden=(6, 5), d=8)


def make_checkpoint(arch=None, seed=0, gap=25.0):
    arch = arch or small_arch()
    spec = OrdinalEncoderSpec(arch.d)
    params = init_params(seed, arch)
    shifts = ShiftTable.zeros(spec, gap)
    rng = np.random.default_rng(seed)
    for t in TYPES:
        shifts.tables[t][:] = rng.normal(size=shifts.tables[t].shape)
    return Checkpoint(params, shifts, make_anchors(arch.d, seed), spec, gap, {"note": "x"})


class TestArch:
    def test_default_param_count(self):
        # trunk 28->256->256->512, four heads 512->513
        expected = (28 * 256 + 256) + (256 * 256 + 256) + (256 * 512 + 512) + 4 * (512 * 513 + 513)
        assert EncoderArch().param_count() == expected == 1_257_476
        assert init_params(0).param_count() == expected

    def test_invalid_width(self):
        with pytest.raises(ValueError):
            EncoderArch(hidden=(0,))


class TestInit:
    def test_same_seed(self):
        a, b = init_params(3, small_arch()), init_params(3, small_arch())
        for k in a.weights:
            np.testing.assert_array_equal(a.weights[k], b.weights[k])

    def test_different_seed(self):
        a, b = init_params(3, small_arch()), init_params(4, small_arch())
        assert any(not np.array_equal(a.weights[k], b.weights[k]) for k in a.weights if k.endswith(".W"))

    def test_biases_zero_and_fan_in_bound(self):
        p = init_params(0)
        for k, v in p.weights.items():
            if k.endswith(".b"):
                assert not v.any()
            else:
                assert np.abs(v).max() <= np.sqrt(6.0 / v.shape[0])

    def test_zero_heads_give_half_confidence(self):
        out = forward(init_params(1, zero_heads=True), np.zeros(28))
        for t in TYPES:
            assert out.per_type[t]["conf"] == 0.5
            assert not out.per_type[t]["emb"].any()


class TestForward:
    def test_deterministic(self, rng):
        p = init_params(0)
        x = rng.normal(size=28)
        a, b = forward(p, x), forward(p, x)
        np.testing.assert_array_equal(a.shared, b.shared)
        for t in TYPES:
            np.testing.assert_array_equal(a.per_type[t]["emb"], b.per_type[t]["emb"])

    def test_heads_differ(self, rng):
        out = forward(init_params(0), rng.normal(size=28))
        embs = [out.per_type[t]["emb"] for t in TYPES]
        for i in range(4):
            for j in range(i + 1, 4):
                assert not np.allclose(embs[i], embs[j])

    def test_extreme_features_finite(self):
        out = forward(init_params(0), np.full(28, 1e6))
        assert np.all(np.isfinite(out.shared))
        for t in TYPES:
            assert np.all(np.isfinite(out.per_type[t]["emb"]))
            assert 0.0 <= out.per_type[t]["conf"] <= 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            forward(init_params(0), np.zeros(27))

    def test_batch_matches_single(self, rng):
        p = init_params(2)
        X = rng.normal(size=(5, 28))
        batch = forward_batch(p, X)
        for i in range(5):
            one = forward(p, X[i])
            np.testing.assert_allclose(batch.shared[i], one.shared, rtol=1e-12, atol=1e-12)

    def test_feature_scaling(self, rng):
        p = init_params(0, small_arch())
        X = rng.normal(loc=5.0, scale=3.0, size=(50, 4))
        X[:, 2] = 1.0
        fit_feature_scaling(p, X)
        np.testing.assert_allclose(p.feat_mean, X.mean(axis=0))
        assert p.feat_std[2] == 1.0


def test_backward_matches_finite_differences(rng):
    p = init_params(5, small_arch())
    for k in p.weights:
        p.weights[k] += 0.1 * rng.normal(size=p.weights[k].shape)
    X = rng.normal(size=(3, 4))
    a = rng.normal(size=(4, 3, 8))
    c = rng.normal(size=(3, 4))

    def loss():
        out = forward_batch(p, X)
        return float(np.sum(a * out.emb) + np.sum(c * out.conf))

    grads = backward_batch(p, forward_batch(p, X), a, c)
    h = 1e-6
    for name, w in p.weights.items():
        num = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            old = w[idx]
            w[idx] = old + h
            fp = loss()
            w[idx] = old - h
            fm = loss()
            w[idx] = old
            num[idx] = (fp - fm) / (2 * h)
        np.testing.assert_allclose(grads[name], num, rtol=1e-6, atol=1e-7)


class TestCheckpoint:
    def test_roundtrip_bit_identical(self, tmp_path, rng):
        ck = make_checkpoint()
        ck.save(tmp_path / "c.json")
        back = Checkpoint.load(tmp_path / "c.json")
        X = rng.normal(size=(4, 4))
        a, b = forward_batch(ck.params, X), forward_batch(back.params, X)
        assert a.emb.tobytes() == b.emb.tobytes() and a.conf.tobytes() == b.conf.tobytes()
        for t in TYPES:
            assert ck.shifts[t].tobytes() == back.shifts[t].tobytes()
            assert ck.anchors[t].vector.tobytes() == back.anchors[t].vector.tobytes()
        assert (back.spec, back.gap, back.extra) == (ck.spec, ck.gap, ck.extra)

    def _corrupt(self, tmp_path, mutate):
        obj = make_checkpoint().to_json()
        mutate(obj)
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(obj))
        return path

    @pytest.mark.parametrize(
        "mutate",
        [
            lambda o: o.update(format_version=99),
            lambda o: o.update(param_count=o["param_count"] + 1),
            lambda o: o["weights"].pop("trunk.0.W"),
            lambda o: o["weights"].update({"trunk.0.b": [1.0]}),
            lambda o: o["shifts"].pop("JPEG"),
            lambda o: o["weights"]["trunk.0.b"].__setitem__(0, float("nan")),
        ],
        ids=["version", "count", "missing-layer", "bad-shape", "missing-type", "nan"],
    )
    def test_corrupt_rejected(self, tmp_path, mutate):
        with pytest.raises(InvalidCheckpointError):
            Checkpoint.load(self._corrupt(tmp_path, mutate))

    def test_not_json(self, tmp_path):
        (tmp_path / "x.json").write_text("{not json")
        with pytest.raises(InvalidCheckpointError):
            Checkpoint.load(tmp_path / "x.json")

    def test_missing_file(self, tmp_path):
        with pytest.raises(IOFailure):
            Checkpoint.load(tmp_path / "none.json")
