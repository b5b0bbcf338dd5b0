"""Reference implementations written independently of the package.

Nothing here imports ``stereogen``; each function is the most literal
transcription of its formula, in float64 numpy, with explicit loops where
that keeps the correspondence obvious.
"""

from __future__ import annotations

import math

import numpy as np


def pearson_direct(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.var() < 1e-8 or b.var() < 1e-8:
        return 0.0
    da, db = a - a.mean(), b - b.mean()
    return float((da * db).sum() / math.sqrt((da * da).sum() * (db * db).sum()))


def convergence_direct(d) -> float:
    d = np.asarray(d, dtype=np.float64).ravel()
    neg = [max(-v, 0.0) for v in d]
    return -float(sum(neg) / len(neg)) / max(float(max(-v for v in d)), 1.0)


def ssd_volume(left: np.ndarray, right: np.ndarray, disparities, patch: int):
    """Nested-loop SSD. Images are (C, H, W); returns (costs[D, H, W], valid[D, W])."""
    c, h, w = left.shape
    r = patch // 2
    lp = np.pad(left, ((0, 0), (r, r), (r, r)), mode="edge")
    rp = np.pad(right, ((0, 0), (r, r), (r, r)), mode="edge")
    costs = np.zeros((len(disparities), h, w))
    valid = np.zeros((len(disparities), w), dtype=bool)
    for k, d in enumerate(disparities):
        for x in range(w):
            xr = x - d
            valid[k, x] = 0 <= xr < w
            xr_c = min(max(xr, 0), w - 1)
            for y in range(h):
                pl = lp[:, y : y + patch, x : x + patch]
                pr = rp[:, y : y + patch, xr_c : xr_c + patch]
                costs[k, y, x] = ((pl - pr) ** 2).sum()
    return costs, valid


def exhaustive_argmin(costs: np.ndarray, valid: np.ndarray, disparities) -> np.ndarray:
    """Per-pixel search over valid candidates; first (smallest) disparity wins ties."""
    _, h, w = costs.shape
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            best, best_d = math.inf, None
            for k, d in enumerate(disparities):
                if valid[k, x] and costs[k, y, x] < best:
                    best, best_d = costs[k, y, x], d
            out[y, x] = best_d
    return out


def alpha_bars_direct(betas) -> list[float]:
    out, prod = [], 1.0
    for b in betas:
        prod *= 1.0 - b
        out.append(prod)
    return out


def ddim_toy_gradient(x_T: np.ndarray, a: float, b: float, alpha_bars, steps, tail: int):
    """Exact truncated gradient of ``sum(x_0)`` for the denoiser ``eps = a*x + b``.

    Implements the unclipped deterministic update
    ``x' = sqrt(ab') * (x - sqrt(1-ab) eps) / sqrt(ab) + sqrt(1-ab') eps``
    and forward-mode sensitivities that start at zero when the tail begins.
    Returns ``(x_0, d sum(x_0)/da, d sum(x_0)/db)``.
    """
    x = np.asarray(x_T, dtype=np.float64).copy()
    n = len(steps)
    dxa = np.zeros_like(x)
    dxb = np.zeros_like(x)
    for i, t in enumerate(steps):
        ab = alpha_bars[t]
        ab_prev = alpha_bars[steps[i + 1]] if i + 1 < n else 1.0
        c1 = math.sqrt(ab_prev / ab)
        c2 = math.sqrt(1 - ab_prev) - math.sqrt(ab_prev * (1 - ab) / ab)
        if i >= n - tail:
            dxa = (c1 + c2 * a) * dxa + c2 * x
            dxb = (c1 + c2 * a) * dxb + c2
        x = c1 * x + c2 * (a * x + b)
    return x, float(dxa.sum()), float(dxb.sum())


def central_difference(f, x: np.ndarray, idx, h: float) -> float:
    xp, xm = x.copy(), x.copy()
    xp[idx] += h
    xm[idx] -= h
    return (f(xp) - f(xm)) / (2 * h)


def shiftable_min(costs: np.ndarray, valid: np.ndarray, window: int) -> np.ndarray:
    """Minimum of valid costs over a window x window neighbourhood, per candidate."""
    k, h, w = costs.shape
    r = window // 2
    out = np.full_like(costs, np.inf)
    for d in range(k):
        for y in range(h):
            for x in range(w):
                for yy in range(max(0, y - r), min(h, y + r + 1)):
                    for xx in range(max(0, x - r), min(w, x + r + 1)):
                        if valid[d, xx]:
                            out[d, y, x] = min(out[d, y, x], costs[d, yy, xx])
    return out
