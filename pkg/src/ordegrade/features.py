"""Handcrafted degradation-sensitive image features (28 values per image).

Layout: 16 radial log-power bins, blockiness, noise proxy, 8 gradient-magnitude
histogram bins, luminance mean and std.  Everything is computed on luma.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate

from .errors import ImageTooSmallError

N_SPECTRAL = 16
N_GRAD = 8
N_FEATURES = N_SPECTRAL + 1 + 1 + N_GRAD + 2
MIN_SIZE = 64

SPECTRAL = slice(0, N_SPECTRAL)
BLOCKINESS = N_SPECTRAL
NOISE = N_SPECTRAL + 1
GRADIENT = slice(N_SPECTRAL + 2, N_SPECTRAL + 2 + N_GRAD)
LUMA_MEAN = N_FEATURES - 2
LUMA_STD = N_FEATURES - 1

# geometric radial bin edges in cycles/pixel; power above the last edge is
# dropped since 8-bit rounding noise swamps it once an image is mildly blurred
_EDGES = np.geomspace(0.01, 0.3, N_SPECTRAL + 1)
_EDGES[0] = 0.0
_EDGES[-1] = np.inf
_GRAD_EDGES = np.array([0.0, 0.5, 1.5, 3.0, 6.0, 12.0, 24.0, 48.0, np.inf])
_LOG_FLOOR = 1e-10
# Immerkaer's noise kernel: zero response to locally linear intensity
_NOISE_KERNEL = np.array([[1.0, -2.0, 1.0], [-2.0, 4.0, -2.0], [1.0, -2.0, 1.0]])


def luminance(img) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        return a
    return a[..., 0] * 0.299 + a[..., 1] * 0.587 + a[..., 2] * 0.114


def radial_spectrum(y: np.ndarray) -> np.ndarray:
    """Log10 mean power of the Hann-windowed luma in 16 radial frequency bins."""
    h, w = y.shape
    win = np.outer(np.hanning(h), np.hanning(w))
    f = np.fft.fft2((y - y.mean()) * win)
    power = (f.real**2 + f.imag**2) / (h * w)
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    r = np.sqrt(fy**2 + fx**2)
    idx = np.digitize(r, _EDGES) - 1
    # DC excluded: it only carries the (removed) mean
    idx[0, 0] = -1
    sums = np.bincount(idx[idx >= 0], weights=power[idx >= 0], minlength=N_SPECTRAL)
    counts = np.bincount(idx[idx >= 0], minlength=N_SPECTRAL)
    mean = sums[:N_SPECTRAL] / np.maximum(counts[:N_SPECTRAL], 1)
    return np.log10(mean + _LOG_FLOOR)


def blockiness(y: np.ndarray) -> np.ndarray | float:
    """Log ratio of squared steps across 8x8 block boundaries vs inside blocks.

    Boundary positions are fixed relative to the image origin, so the score is
    unchanged by translations that are multiples of 8 pixels.
    """
    dx = np.diff(y, axis=1) ** 2
    dy = np.diff(y, axis=0) ** 2
    bx = (np.arange(dx.shape[1]) % 8) == 7
    by = (np.arange(dy.shape[0]) % 8) == 7
    boundary = np.concatenate([dx[:, bx].ravel(), dy[by, :].ravel()]).mean()
    interior = np.concatenate([dx[:, ~bx].ravel(), dy[~by, :].ravel()]).mean()
    return float(np.log((boundary + 1e-3) / (interior + 1e-3)))


def noise_proxy(y: np.ndarray) -> float:
    """Noise std estimate: scaled median absolute deviation of a Laplacian response."""
    resp = correlate(y, _NOISE_KERNEL, mode="reflect")[1:-1, 1:-1]
    mad = np.median(np.abs(resp - np.median(resp)))
    # 1.4826 converts MAD to std; the kernel has L2 norm 6
    return float(1.4826 * mad / 6.0)


def gradient_histogram(y: np.ndarray) -> np.ndarray:
    gx = np.zeros_like(y)
    gy = np.zeros_like(y)
    gx[:, 1:-1] = 0.5 * (y[:, 2:] - y[:, :-2])
    gy[1:-1, :] = 0.5 * (y[2:, :] - y[:-2, :])
    mag = np.hypot(gx, gy)[1:-1, 1:-1]
    hist, _ = np.histogram(mag, bins=_GRAD_EDGES)
    return hist / mag.size


def extract_features(img) -> np.ndarray:
    """28-vector of degradation cues for an image of at least 64x64 pixels."""
    y = luminance(img)
    if min(y.shape[:2]) < MIN_SIZE:
        raise ImageTooSmallError(f"features need at least {MIN_SIZE}x{MIN_SIZE} pixels")
    out = np.empty(N_FEATURES)
    out[SPECTRAL] = radial_spectrum(y)
    out[BLOCKINESS] = blockiness(y)
    out[NOISE] = noise_proxy(y)
    out[GRADIENT] = gradient_histogram(y)
    out[LUMA_MEAN] = y.mean() / 255.0
    out[LUMA_STD] = y.std() / 255.0
    return out
