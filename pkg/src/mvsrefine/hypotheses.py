"""Initial (perturbed) and spatial (first-order propagated) hypothesis sets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

INITIAL = "initial"
SPATIAL = "spatial"
PREVIOUS = "previous-estimate"

DEFAULT_DILATIONS = (1, 3)


@dataclass
class HypothesisSet:
    """``values`` has shape ``(H, W, K)``; ``provenance`` tags each candidate slot."""

    values: np.ndarray
    provenance: tuple
    flagged: np.ndarray | None = None

    @property
    def k(self) -> int:
        return self.values.shape[-1]


def make_offsets(dilations=DEFAULT_DILATIONS) -> np.ndarray:
    """Integer ``(dx, dy)`` offsets: dilated 3x3 rings, centre listed once, last.

    Rings are listed per dilation in row-major order.
    """
    dilations = list(dilations)
    if not dilations or len(set(dilations)) != len(dilations) or min(dilations) < 1:
        raise ValueError("dilations must be distinct positive integers")
    out = []
    for r in dilations:
        for dy in (-r, 0, r):
            for dx in (-r, 0, r):
                if dx or dy:
                    out.append((dx, dy))
    out.append((0, 0))
    return np.array(out, dtype=np.int64)


ONE_RING = make_offsets([1])[:-1]


def depth_gradient(d: np.ndarray) -> np.ndarray:
    """Per-pixel ``(d/dx, d/dy)`` of a pseudo-disparity map, shape ``(H, W, 2)``.

    Central differences where both neighbours are valid, one-sided where only
    one is (image borders count as invalid neighbours), zero otherwise.
    """
    d = np.asarray(d, dtype=np.float64)
    if d.shape[0] < 3 or d.shape[1] < 3:
        raise ValueError("gradient needs at least a 3x3 map")
    grad = np.zeros(d.shape + (2,))
    for axis in (1, 0):
        p = np.pad(d, [(1, 1) if a == axis else (0, 0) for a in (0, 1)], constant_values=np.nan)
        lo = np.take(p, np.arange(0, d.shape[axis]), axis=axis)
        hi = np.take(p, np.arange(2, d.shape[axis] + 2), axis=axis)
        ok_c = np.isfinite(d)
        ok_lo = np.isfinite(lo) & ok_c
        ok_hi = np.isfinite(hi) & ok_c
        g = np.where(ok_lo & ok_hi, (hi - lo) / 2,
                     np.where(ok_hi, hi - d, np.where(ok_lo, d - lo, 0.0)))
        grad[..., 0 if axis == 1 else 1] = np.nan_to_num(g, nan=0.0)
    return grad


def initial_set(d_hat: np.ndarray, m: int, rng, jitter: bool = True,
                last_valid: np.ndarray | None = None) -> HypothesisSet:
    """``d_hat + k + u_k`` for ``k = -m..m`` with ``u_k ~ U[-0.5, 0.5]``."""
    if m < 1:
        raise ValueError("M must be at least 1")
    d_hat = np.asarray(d_hat, dtype=np.float64)
    bad = ~np.isfinite(d_hat)
    if bad.any():
        fill = last_valid if last_valid is not None else np.nanmedian(d_hat)
        d_hat = np.where(bad, fill, d_hat)
    k = np.arange(-m, m + 1, dtype=np.float64)
    u = rng.uniform(-0.5, 0.5, d_hat.shape + (2 * m + 1,)) if jitter else 0.0
    return HypothesisSet(d_hat[..., None] + k + u, (INITIAL,) * (2 * m + 1), bad)


def _neighbour_index(h, w, offsets):
    """Clamped source indices and the effective offsets, shape ``(H, W, K)``."""
    ys, xs = np.mgrid[0:h, 0:w]
    sx = np.clip(xs[..., None] + offsets[:, 0], 0, w - 1)
    sy = np.clip(ys[..., None] + offsets[:, 1], 0, h - 1)
    return sy, sx, sx - xs[..., None], sy - ys[..., None]


def propagate(d_hat: np.ndarray, grad: np.ndarray, offsets=None) -> HypothesisSet:
    """First-order propagation ``d[p'] - grad[p'] . (p' - p)`` from each neighbour ``p'``.

    Neighbours are clamped to the image, and the actual displacement to the
    clamped neighbour is used.  The ``(0, 0)`` offset reproduces ``d_hat``.
    """
    offsets = make_offsets() if offsets is None else np.asarray(offsets)
    d_hat = np.asarray(d_hat, dtype=np.float64)
    h, w = d_hat.shape
    sy, sx, dx, dy = _neighbour_index(h, w, offsets)
    vals = d_hat[sy, sx] - grad[sy, sx, 0] * dx - grad[sy, sx, 1] * dy
    centre = np.broadcast_to(d_hat[..., None], vals.shape)
    vals = np.where(np.isfinite(vals), vals, centre)
    tags = tuple(PREVIOUS if not (ox or oy) else SPATIAL for ox, oy in offsets)
    return HypothesisSet(vals, tags)


def second_order_error(d_hat: np.ndarray, grad: np.ndarray, d) -> np.ndarray:
    """``tanh(d[p'] - grad[p'] . (p' - p) - d_i)`` over the one-ring, shape ``d.shape + (8,)``."""
    d = np.asarray(d, dtype=np.float64)
    h, w = d_hat.shape
    sy, sx, dx, dy = _neighbour_index(h, w, ONE_RING)
    pred = d_hat[sy, sx] - grad[sy, sx, 0] * dx - grad[sy, sx, 1] * dy  # (H, W, 8)
    if d.ndim == 2:
        return np.tanh(pred - d[..., None])
    return np.tanh(pred[:, :, None, :] - d[..., None])
