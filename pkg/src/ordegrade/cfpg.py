"""Projection-based guidance: split each visual-textual noise deviation into
components parallel and orthogonal to the textual estimate, re-weight them and
combine the two branches as in classifier-free guidance.

A closed-form Gaussian diffusion in R^2 drives the rectifier through a real
ancestral sampling loop so trajectories can be compared exactly.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import IndexOutOfRangeError, LengthMismatchError, NonFiniteInputError
from .numerics import project_decompose


@dataclass(frozen=True)
class GuidanceBundle:
    """Four flattened noise estimates: positive/negative text, semantic, degradation."""

    eps_txt_pos: np.ndarray
    eps_txt_neg: np.ndarray
    eps_sem: np.ndarray
    eps_deg: np.ndarray

    def __post_init__(self):
        arrays = []
        for name in ("eps_txt_pos", "eps_txt_neg", "eps_sem", "eps_deg"):
            a = np.asarray(getattr(self, name), dtype=np.float64).ravel()
            if not np.all(np.isfinite(a)):
                raise NonFiniteInputError(f"{name} contains NaN or Inf")
            object.__setattr__(self, name, a)
            arrays.append(a)
        if len({a.size for a in arrays}) != 1:
            raise LengthMismatchError("all four noise estimates must have the same length")

    def scaled(self, a: float) -> "GuidanceBundle":
        return GuidanceBundle(a * self.eps_txt_pos, a * self.eps_txt_neg, a * self.eps_sem, a * self.eps_deg)


@dataclass(frozen=True)
class CfpgParams:
    eta_par: float = 1.0
    eta_perp: float = 0.6
    w: float = 5.5

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.eta_par, self.eta_perp, self.w)):
            raise ValueError("guidance parameters must be finite")


def rectify_branch(baseline, deviation, eta_par: float, eta_perp: float) -> np.ndarray:
    """baseline + eta_par * d_par + eta_perp * d_perp, with d split against the baseline."""
    d_par, d_perp = project_decompose(deviation, baseline)
    return baseline + eta_par * d_par + eta_perp * d_perp


def rectify(bundle: GuidanceBundle, params: CfpgParams = CfpgParams()) -> np.ndarray:
    """Guided noise estimate from the four conditional predictions."""
    pos = rectify_branch(bundle.eps_txt_pos, bundle.eps_sem - bundle.eps_txt_pos, params.eta_par, params.eta_perp)
    neg = rectify_branch(bundle.eps_txt_neg, bundle.eps_deg - bundle.eps_txt_neg, params.eta_par, params.eta_perp)
    return neg + params.w * (pos - neg)


def linear_guidance(bundle: GuidanceBundle, gamma: float, w: float) -> np.ndarray:
    """Plain CFG on per-branch linear blends txt + gamma * (visual - txt)."""
    pos = bundle.eps_txt_pos + gamma * (bundle.eps_sem - bundle.eps_txt_pos)
    neg = bundle.eps_txt_neg + gamma * (bundle.eps_deg - bundle.eps_txt_neg)
    return neg + w * (pos - neg)


# ----------------------------------------------------------------------------
# toy diffusion


class Condition(str, enum.Enum):
    TXT_POS = "txt_pos"
    TXT_NEG = "txt_neg"
    SEM = "sem"
    DEG = "deg"


DEFAULT_MEANS = {
    Condition.TXT_POS: (1.0, 0.5),
    Condition.TXT_NEG: (-0.5, 0.2),
    Condition.SEM: (1.2, 0.8),
    Condition.DEG: (-0.8, -0.3),
}


def cosine_schedule(steps: int, offset: float = 0.008, alpha_min: float = 0.02) -> list[tuple[float, float]]:
    """(alpha_t, sigma_t) for t = 0..steps; alpha = cos(phi) falls from ~1 to alpha_min.

    phi grows linearly, so alpha is strictly decreasing for any step count.
    """
    lo = 0.5 * math.pi * offset / (1.0 + offset)
    hi = math.acos(alpha_min)
    out = []
    for t in range(steps + 1):
        u = t / steps if steps else 0.0
        phi = lo + u * (hi - lo)
        out.append((math.cos(phi), math.sin(phi)))
    return out


@dataclass(frozen=True)
class ToyDiffusionSpec:
    """Gaussian targets N(mu_c, I) in R^2 under a variance-preserving schedule.

    ``schedule[t]`` is (alpha_t, sigma_t); index 0 is the cleanest, index
    ``steps`` the noisiest, where sampling starts.
    """

    means: Mapping[Condition, tuple[float, float]] = field(default_factory=lambda: dict(DEFAULT_MEANS))
    steps: int = 50
    seed: int = 0
    schedule: Sequence[tuple[float, float]] | None = None

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        means = {Condition(k): np.asarray(v, dtype=np.float64) for k, v in self.means.items()}
        if set(means) != set(Condition) or any(m.shape != (2,) for m in means.values()):
            raise ValueError("one 2-D mean per condition required")
        object.__setattr__(self, "means", means)
        sched = cosine_schedule(self.steps) if self.schedule is None else [tuple(map(float, p)) for p in self.schedule]
        if len(sched) != self.steps + 1:
            raise ValueError("schedule needs steps + 1 entries")
        alphas = np.array([a for a, _ in sched])
        sigmas = np.array([s for _, s in sched])
        if np.any(np.abs(alphas**2 + sigmas**2 - 1.0) > 1e-9):
            raise ValueError("schedule must be variance-preserving")
        if np.any(np.diff(alphas) >= 0) or np.any(alphas <= 0) or np.any(sigmas <= 0):
            raise ValueError("alpha must decrease strictly and stay positive; sigma must be positive")
        object.__setattr__(self, "schedule", tuple(sched))


def analytic_eps(spec: ToyDiffusionSpec, z_t, t_index: int, condition) -> np.ndarray:
    """Optimal noise prediction E[eps | z_t] for target N(mu_c, I).

    With z_t = alpha_t x0 + sigma_t eps and alpha_t^2 + sigma_t^2 = 1 the
    marginal is N(alpha_t mu_c, I), so the regression of eps on z_t gives
    eps* = sigma_t (z_t - alpha_t mu_c) = -sigma_t * score.
    """
    if not 0 <= t_index <= spec.steps:
        raise IndexOutOfRangeError(f"time index {t_index} outside [0, {spec.steps}]")
    a, s = spec.schedule[t_index]
    mu = spec.means[Condition(condition)]
    return s * (np.asarray(z_t, dtype=np.float64) - a * mu)


def toy_bundle(spec: ToyDiffusionSpec, z_t, t_index: int) -> GuidanceBundle:
    e = {c: analytic_eps(spec, z_t, t_index, c) for c in Condition}
    return GuidanceBundle(e[Condition.TXT_POS], e[Condition.TXT_NEG], e[Condition.SEM], e[Condition.DEG])


def guided_eps(bundle: GuidanceBundle, params: CfpgParams, mode: str) -> np.ndarray:
    if mode == "cfpg":
        return rectify(bundle, params)
    if mode == "linear_cfg":
        return linear_guidance(bundle, params.eta_par, params.w)
    raise ValueError(f"unknown guidance mode {mode!r}")


def sample(spec: ToyDiffusionSpec, params: CfpgParams = CfpgParams(), mode: str = "cfpg") -> np.ndarray:
    """Ancestral sampling trajectory, shape (steps + 1, 2), noisiest state first."""
    if mode not in ("cfpg", "linear_cfg"):
        raise ValueError(f"unknown guidance mode {mode!r}")
    rng = np.random.default_rng(spec.seed)
    z = rng.standard_normal(2)
    traj = [z.copy()]
    for t in range(spec.steps, 0, -1):
        a_t, s_t = spec.schedule[t]
        a_p, s_p = spec.schedule[t - 1]
        eps = guided_eps(toy_bundle(spec, z, t), params, mode)
        x0 = (z - s_t * eps) / a_t
        var = (s_p**2 / s_t**2) * (1.0 - a_t**2 / a_p**2)
        var = min(max(var, 0.0), s_p**2)
        z = a_p * x0 + math.sqrt(s_p**2 - var) * eps + math.sqrt(var) * rng.standard_normal(2)
        traj.append(z.copy())
    return np.stack(traj)


def max_mode_deviation(spec: ToyDiffusionSpec, gamma: float, w: float) -> float:
    """Largest per-step gap between cfpg (eta_par = eta_perp = gamma) and linear CFG."""
    p = CfpgParams(eta_par=gamma, eta_perp=gamma, w=w)
    return float(np.max(np.abs(sample(spec, p, "cfpg") - sample(spec, p, "linear_cfg"))))


def eta_sweep(spec: ToyDiffusionSpec, etas_par: Iterable[float], etas_perp: Iterable[float], w: float = 5.5) -> list[dict]:
    """Final sample for every (eta_par, eta_perp) pair."""
    rows = []
    perps = list(etas_perp)
    for ep in etas_par:
        for eo in perps:
            final = sample(spec, CfpgParams(ep, eo, w), "cfpg")[-1]
            rows.append({"eta_par": ep, "eta_perp": eo, "x": float(final[0]), "y": float(final[1])})
    return rows


def write_trajectories(path, trajectories: Mapping[str, np.ndarray]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "x", "y", "mode"])
        for mode, traj in trajectories.items():
            for i, (x, y) in enumerate(traj):
                w.writerow([i, repr(float(x)), repr(float(y)), mode])
