"""Gaussian-windowed SSIM and its gradient.

Windows are 11x11 separable Gaussians (sigma 1.5); borders use mirror
padding without edge repetition (numpy ``reflect``). The blur is written as
pad + valid correlation so its exact adjoint is available for gradients.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

C1 = 0.01**2
C2 = 0.03**2
WINDOW = 11
SIGMA = 1.5
_R = WINDOW // 2


def window_1d(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    return g / g.sum()


_K = window_1d()


def _valid_corr(x: np.ndarray, axis: int, k: np.ndarray) -> np.ndarray:
    r = len(k) // 2
    full = correlate1d(x, k.astype(x.dtype), axis=axis, mode="constant")
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(r, x.shape[axis] - r)
    return full[tuple(sl)]


def _pad_adjoint(g: np.ndarray, n: int, axis: int) -> np.ndarray:
    idx = np.pad(np.arange(n), _R, mode="reflect")
    g = np.moveaxis(g, axis, 0)
    out = g[_R : _R + n].copy()
    for p in list(range(_R)) + list(range(n + _R, n + 2 * _R)):
        out[idx[p]] += g[p]
    return np.moveaxis(out, 0, axis)


def blur(x: np.ndarray) -> np.ndarray:
    """Separable Gaussian blur over the first two axes with reflect padding."""
    pad = [(_R, _R), (_R, _R)] + [(0, 0)] * (x.ndim - 2)
    xp = np.pad(x, pad, mode="reflect")
    return _valid_corr(_valid_corr(xp, 0, _K), 1, _K)


def blur_adjoint(g: np.ndarray) -> np.ndarray:
    h, w = g.shape[:2]
    pad = [(2 * _R, 2 * _R), (0, 0)] + [(0, 0)] * (g.ndim - 2)
    t = _valid_corr(np.pad(g, pad), 0, _K)  # (h + 2R, w)
    pad = [(0, 0), (2 * _R, 2 * _R)] + [(0, 0)] * (g.ndim - 2)
    t = _valid_corr(np.pad(t, pad), 1, _K)  # (h + 2R, w + 2R)
    t = _pad_adjoint(t, h, 0)
    return _pad_adjoint(t, w, 1)


def ssim_map(x: np.ndarray, y: np.ndarray):
    """Per-pixel SSIM plus the intermediates needed for the gradient."""
    mx = blur(x)
    my = blur(y)
    sxx = blur(x * x)
    syy = blur(y * y)
    sxy = blur(x * y)
    vx = sxx - mx * mx
    vy = syy - my * my
    cxy = sxy - mx * my
    a1 = 2 * mx * my + C1
    a2 = 2 * cxy + C2
    b1 = mx * mx + my * my + C1
    b2 = vx + vy + C2
    s = (a1 * a2) / (b1 * b2)
    return s, (mx, my, a1, a2, b1, b2)


def ssim(x: np.ndarray, y: np.ndarray, weights: np.ndarray | None = None) -> float:
    s, _ = ssim_map(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))
    if weights is None:
        return float(s.mean())
    return float((s * weights).sum())


def ssim_and_grad(x: np.ndarray, y: np.ndarray, weights: np.ndarray):
    """Weighted SSIM sum and its gradient with respect to ``x``.

    ``weights`` has the shape of ``x`` (broadcastable) and typically holds
    ``mask / (mask.sum() * channels)``.
    """
    s, (mx, my, a1, a2, b1, b2) = ssim_map(x, y)
    value = float((s * weights).sum())
    d_mx = s * (2 * my / a1 - 2 * my / a2 - 2 * mx / b1 + 2 * mx / b2)
    d_sxx = -s / b2
    d_sxy = 2 * s / a2
    grad = blur_adjoint(weights * d_mx) + 2 * x * blur_adjoint(weights * d_sxx) + y * blur_adjoint(weights * d_sxy)
    return value, grad
