"""Deterministic vector math: similarity, slerp, projection, softmax, rank statistics.

All functions take array-likes, work in float64 and never mutate their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    AntipodalInputsError,
    ConstantInputError,
    EmptyInputError,
    LengthMismatchError,
    NonFiniteInputError,
    NonPositiveTemperatureError,
    ZeroNormError,
)

# theta below this uses lerp-then-normalize instead of dividing by sin(theta)
SLERP_SMALL_ANGLE = 1e-6
# dot products at or below -1 + ANTIPODAL_EPS have no unique great circle
ANTIPODAL_EPS = 1e-6


def as_vector(x, name: str = "vector") -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise EmptyInputError(f"{name} must be a non-empty 1-D sequence")
    if not np.all(np.isfinite(v)):
        raise NonFiniteInputError(f"{name} contains NaN or Inf")
    return v


def _same_length(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise LengthMismatchError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")


def cosine_similarity(a, b) -> float:
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    _same_length(a, b)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroNormError("cosine similarity of a zero vector is undefined")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (x / ||x||, ||x||) row-wise; raises on any zero row."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ZeroNormError("cannot normalize a zero vector")
    return x / norms, norms


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities between the rows of ``a`` and ``b``."""
    an, _ = normalize_rows(a)
    bn, _ = normalize_rows(b)
    return np.clip(an @ bn.T, -1.0, 1.0)


@dataclass
class SlerpCache:
    p_hat: np.ndarray
    q_hat: np.ndarray
    p_norm: np.ndarray
    q_norm: np.ndarray
    t: np.ndarray
    theta: np.ndarray
    small: np.ndarray
    lerp_norm: np.ndarray
    out: np.ndarray


def slerp_rows(p: np.ndarray, q: np.ndarray, t) -> tuple[np.ndarray, SlerpCache]:
    """Row-wise slerp between normalized ``p`` and ``q``.

    ``p`` and ``q`` have shape (n, d); ``t`` is a scalar or shape (n,).
    Returns the interpolated unit rows and a cache for :func:`slerp_rows_backward`.
    """
    p_hat, p_norm = normalize_rows(np.atleast_2d(p))
    q_hat, q_norm = normalize_rows(np.atleast_2d(q))
    if p_hat.shape != q_hat.shape:
        raise LengthMismatchError(f"shape mismatch: {p_hat.shape} vs {q_hat.shape}")
    n = p_hat.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)).copy()

    dot = np.einsum("ij,ij->i", p_hat, q_hat)
    if np.any(dot <= -1.0 + ANTIPODAL_EPS):
        raise AntipodalInputsError("slerp endpoints are (nearly) antipodal")
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    small = theta < SLERP_SMALL_ANGLE

    out = np.empty_like(p_hat)
    lerp_norm = np.ones(n)
    big = ~small
    if np.any(big):
        th = theta[big]
        s = np.sin(th)
        a = np.sin((1.0 - t[big]) * th) / s
        b = np.sin(t[big] * th) / s
        out[big] = a[:, None] * p_hat[big] + b[:, None] * q_hat[big]
    if np.any(small):
        v = (1.0 - t[small])[:, None] * p_hat[small] + t[small][:, None] * q_hat[small]
        nv = np.linalg.norm(v, axis=1)
        lerp_norm[small] = nv
        out[small] = v / nv[:, None]
    cache = SlerpCache(p_hat, q_hat, p_norm, q_norm, t, theta, small, lerp_norm, out)
    return out, cache


def _normalize_backward(x_hat: np.ndarray, norm: np.ndarray, g: np.ndarray) -> np.ndarray:
    # d(x/|x|)^T g = (g - (g.x_hat) x_hat) / |x|
    return (g - np.einsum("ij,ij->i", g, x_hat)[:, None] * x_hat) / norm


def slerp_rows_backward(cache: SlerpCache, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vector-Jacobian product of :func:`slerp_rows` w.r.t. the raw endpoints."""
    g = np.atleast_2d(np.asarray(g, dtype=np.float64))
    p_hat, q_hat, t, theta = cache.p_hat, cache.q_hat, cache.t, cache.theta
    gp_hat = np.zeros_like(p_hat)
    gq_hat = np.zeros_like(q_hat)

    big = ~cache.small
    if np.any(big):
        th, tb, gb = theta[big], t[big], g[big]
        ph, qh = p_hat[big], q_hat[big]
        s, c = np.sin(th), np.cos(th)
        a = np.sin((1.0 - tb) * th) / s
        b = np.sin(tb * th) / s
        da = ((1.0 - tb) * np.cos((1.0 - tb) * th) * s - np.sin((1.0 - tb) * th) * c) / s**2
        db = (tb * np.cos(tb * th) * s - np.sin(tb * th) * c) / s**2
        g_a = np.einsum("ij,ij->i", gb, ph)
        g_b = np.einsum("ij,ij->i", gb, qh)
        # theta = arccos(p_hat . q_hat)
        g_dot = (g_a * da + g_b * db) * (-1.0 / s)
        gp_hat[big] = a[:, None] * gb + g_dot[:, None] * qh
        gq_hat[big] = b[:, None] * gb + g_dot[:, None] * ph
    if np.any(cache.small):
        sm = cache.small
        out, nv, ts = cache.out[sm], cache.lerp_norm[sm], t[sm]
        gv = _normalize_backward(out, nv[:, None], g[sm])
        gp_hat[sm] = (1.0 - ts)[:, None] * gv
        gq_hat[sm] = ts[:, None] * gv

    gp = _normalize_backward(p_hat, cache.p_norm, gp_hat)
    gq = _normalize_backward(q_hat, cache.q_norm, gq_hat)
    return gp, gq


def slerp(p, q, t: float) -> np.ndarray:
    """Spherical interpolation between the directions of ``p`` and ``q``.

    Both inputs are normalized first; ``t=0`` gives p/|p| and ``t=1`` gives q/|q|.
    Raises AntipodalInputsError when the endpoints point in opposite directions.
    """
    p = as_vector(p, "p")
    q = as_vector(q, "q")
    _same_length(p, q)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    out, _ = slerp_rows(p[None, :], q[None, :], t)
    return out[0]


def project_decompose(d, b) -> tuple[np.ndarray, np.ndarray]:
    """Split ``d`` into components parallel and orthogonal to ``b``."""
    d = np.asarray(d, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if d.shape != b.shape:
        raise LengthMismatchError(f"shape mismatch: {d.shape} vs {b.shape}")
    bb = float(np.dot(b.ravel(), b.ravel()))
    if bb == 0.0:
        raise ZeroNormError("projection baseline has zero norm")
    d_par = (float(np.dot(d.ravel(), b.ravel())) / bb) * b
    d_perp = d - d_par
    return d_par, d_perp


def softmax(xs, temperature: float = 1.0) -> np.ndarray:
    x = np.asarray(xs, dtype=np.float64)
    if x.size == 0:
        raise EmptyInputError("softmax of an empty sequence")
    if not temperature > 0:
        raise NonPositiveTemperatureError(f"temperature must be > 0, got {temperature}")
    z = (x - np.max(x, axis=-1, keepdims=True)) / temperature
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def rankdata(x) -> np.ndarray:
    """1-based ranks with ties replaced by their average rank."""
    a = np.asarray(x, dtype=np.float64).ravel()
    n = a.size
    order = np.argsort(a, kind="mergesort")
    ranks = np.empty(n, dtype=np.float64)
    sorted_a = a[order]
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sorted_a[j + 1] == sorted_a[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _paired(xs, ys) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(xs, dtype=np.float64).ravel()
    y = np.asarray(ys, dtype=np.float64).ravel()
    if x.size != y.size:
        raise LengthMismatchError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise EmptyInputError("correlation needs at least two pairs")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise NonFiniteInputError("correlation inputs contain NaN or Inf")
    return x, y


def pearson(xs, ys) -> float:
    x, y = _paired(xs, ys)
    x = x - x.mean()
    y = y - y.mean()
    sxx = float(np.dot(x, x))
    syy = float(np.dot(y, y))
    if sxx == 0.0 or syy == 0.0:
        raise ConstantInputError("pearson correlation is undefined for constant input")
    return float(np.clip(np.dot(x, y) / np.sqrt(sxx * syy), -1.0, 1.0))


def spearman(xs, ys) -> float:
    x, y = _paired(xs, ys)
    return pearson(rankdata(x), rankdata(y))
