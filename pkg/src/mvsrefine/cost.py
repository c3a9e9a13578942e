"""Matching costs, multi-view aggregation and cost volumes.

All hypotheses are pseudo disparities in the pixel units of the level they
belong to.  A volume stores ``N`` slices per pixel; slice ``i`` at pixel ``p``
sits at ``d0[p] + i * step + offsets[p, i]`` with ``|offsets| <= step / 2``.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.special import expit

from .geometry import Camera, CameraRig, scale_camera, to_metric_depth, warp_points
from .learn.autodiff import bilinear_taps

ALPHA = 8.0
DELTA = 0.0
WORST_COST = 1.0


class CostError(ValueError):
    pass


def correlation_cost(f_ref, f_warped) -> np.ndarray:
    """Negative inner product along the last axis."""
    f_ref = np.asarray(f_ref, dtype=np.float64)
    f_warped = np.asarray(f_warped, dtype=np.float64)
    if f_ref.shape[-1] != f_warped.shape[-1]:
        raise CostError(f"feature length mismatch: {f_ref.shape[-1]} vs {f_warped.shape[-1]}")
    return -np.einsum("...c,...c->...", f_ref, f_warped)


def view_weight(c, alpha: float = ALPHA, delta: float = DELTA):
    """Per-view weight ``sigmoid(alpha * (delta - c)**3)``."""
    c = np.asarray(c, dtype=np.float64)
    return expit(alpha * (delta - c) ** 3)


def aggregate(costs, valid=None, alpha: float = ALPHA, delta: float = DELTA):
    """Weighted mean of per-view costs over the last axis.

    Views with ``valid == False`` are ignored; if no view is valid the result
    is the worst cost ``+1``.
    """
    costs = np.asarray(costs, dtype=np.float64)
    valid = np.ones(costs.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    w = np.where(valid, view_weight(np.where(valid, costs, 0.0), alpha, delta), 0.0)
    num = (w * np.where(valid, costs, 0.0)).sum(axis=-1)
    den = w.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(den > 0, num / np.where(den > 0, den, 1.0), WORST_COST)
    return out


def sample_features(feat: np.ndarray, xs, ys) -> np.ndarray:
    """Bilinear lookup in an ``(H, W, C)`` map at pixel coordinates (edge clamped)."""
    h, w, c = feat.shape
    idx, wts = bilinear_taps(xs, ys, h, w)
    flat = feat.reshape(-1, c)
    out = wts[0][..., None] * flat[idx[0]]
    for k in range(1, 4):
        out += wts[k][..., None] * flat[idx[k]]
    return out


@dataclass
class MatchingLevel:
    """Cameras and features of one resolution level.

    ``scale_fb`` converts pseudo disparity at this level to metric depth.
    """

    ref: Camera
    sources: tuple
    ref_features: np.ndarray
    src_features: list
    scale_fb: float
    scale: Fraction = Fraction(1)
    alpha: float = ALPHA
    delta: float = DELTA

    @classmethod
    def from_pyramids(cls, rig: CameraRig, ref_pyr, src_pyrs, scale, b: float | None = None,
                      alpha: float = ALPHA, delta: float = DELTA) -> "MatchingLevel":
        scale = Fraction(scale)
        ref = scale_camera(rig.reference, scale)
        b = rig.baseline_b if b is None else b
        return cls(ref, tuple(scale_camera(c, scale) for c in rig.sources),
                   ref_pyr.array(scale), [p.array(scale) for p in src_pyrs],
                   ref.intrinsics.fx * b, scale, alpha, delta)

    @property
    def shape(self):
        return self.ref_features.shape[:2]

    def pixel_grid(self, shape=None, ratio=1):
        """Coordinates at this level of the pixel centres of a grid of ``shape``.

        ``ratio`` is this level's scale divided by the grid's scale.
        """
        shape = self.shape if shape is None else shape
        ys, xs = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
        r = float(ratio)
        if r != 1:
            xs = (xs + 0.5) * r - 0.5
            ys = (ys + 0.5) * r - 0.5
        return xs, ys

    def view_costs(self, xs, ys, pd):
        """Per-view costs and validity, shape ``pd.shape + (V,)``.

        ``xs``/``ys`` have the grid shape ``(H, W)``; ``pd`` is ``(H, W, N)``.
        """
        pd = np.asarray(pd, dtype=np.float64)
        depth = to_metric_depth(pd, self.scale_fb)
        xs3 = np.broadcast_to(xs[..., None], pd.shape)
        ys3 = np.broadcast_to(ys[..., None], pd.shape)
        if np.all(np.mod(xs, 1) == 0) and np.all(np.mod(ys, 1) == 0):
            f_ref = self.ref_features[ys.astype(int), xs.astype(int)]
        else:
            f_ref = sample_features(self.ref_features, xs, ys)
        costs = np.empty(pd.shape + (len(self.sources),))
        valid = np.empty(pd.shape + (len(self.sources),), dtype=bool)
        for v, (cam, feat) in enumerate(zip(self.sources, self.src_features)):
            u, w, ok = warp_points(self.ref, cam, xs3, ys3, np.nan_to_num(depth, nan=-1.0))
            u = np.where(ok, u, 0.0)
            w = np.where(ok, w, 0.0)
            warped = sample_features(feat, u, w)
            costs[..., v] = -np.einsum("hwc,hwnc->hwn", f_ref, warped)
            valid[..., v] = ok
        return costs, valid

    def costs(self, xs, ys, pd):
        c, ok = self.view_costs(xs, ys, pd)
        return aggregate(c, ok, self.alpha, self.delta), ok.sum(axis=-1)


@dataclass
class CostVolume:
    values: np.ndarray
    d0: np.ndarray
    step: float
    offsets: np.ndarray
    nvalid: np.ndarray | None = None
    low_confidence: np.ndarray | None = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def hypotheses(self) -> np.ndarray:
        n = self.values.shape[-1]
        return self.d0[..., None] + np.arange(n) * self.step + self.offsets


@dataclass
class CostVolumePyramid:
    coarse: CostVolume
    fine: CostVolume | None = None
    ratio: float = 1.0

    @property
    def triplet_size(self) -> int:
        return 3 if self.fine is None else 6


def _jitter(rng, shape, step, enabled):
    if not enabled:
        return np.zeros(shape)
    return rng.uniform(-0.5, 0.5, shape) * step


def _build(level: MatchingLevel, xs, ys, d0, step, n, rng, jitter) -> CostVolume:
    offsets = _jitter(rng, xs.shape + (n,), step, jitter)
    hyps = d0[..., None] + np.arange(n) * step + offsets
    values, nvalid = level.costs(xs, ys, hyps)
    return CostVolume(values, d0, float(step), offsets, nvalid)


def build_full_volume(level: MatchingLevel, dmin_pd: float, dmax_pd: float, n: int,
                      rng=None, jitter: bool = True, chunk: int = 32) -> CostVolume:
    """Uniform slices over ``[dmin_pd, dmax_pd]`` at every pixel of ``level``."""
    if not dmax_pd > dmin_pd:
        raise CostError(f"degenerate range [{dmin_pd}, {dmax_pd}]")
    if n < 2:
        raise CostError("a full volume needs at least 2 slices")
    if jitter and rng is None:
        raise CostError("jitter needs an rng")
    step = (dmax_pd - dmin_pd) / (n - 1)
    xs, ys = level.pixel_grid()
    d0 = np.full(xs.shape, float(dmin_pd))
    offsets = _jitter(rng, xs.shape + (n,), step, jitter)
    hyps = d0[..., None] + np.arange(n) * step + offsets
    values = np.empty(hyps.shape)
    nvalid = np.empty(hyps.shape, dtype=np.int64)
    for s in range(0, n, chunk):
        values[..., s:s + chunk], nvalid[..., s:s + chunk] = level.costs(xs, ys, hyps[..., s:s + chunk])
    return CostVolume(values, d0, float(step), offsets, nvalid)


def build_local_volume(level: MatchingLevel, d_hat, m: int, rng=None, jitter: bool = True,
                       grid=None, fallback: float | None = None):
    """``2m+1`` unit-spaced slices centred per pixel on ``d_hat``.

    Returns ``(volume, argmin)`` where ``argmin`` is the lowest-cost
    hypothesis per pixel.  Pixels with an invalid centre use ``fallback``
    (e.g. the range midpoint) and are flagged in ``volume.low_confidence``.
    """
    if m < 1:
        raise CostError("M must be at least 1")
    if jitter and rng is None:
        raise CostError("jitter needs an rng")
    xs, ys = level.pixel_grid() if grid is None else grid
    d_hat = np.asarray(d_hat, dtype=np.float64)
    bad = ~np.isfinite(d_hat)
    if bad.any():
        if fallback is None:
            raise CostError("invalid centre pixels need a fallback value")
        d_hat = np.where(bad, fallback, d_hat)
    vol = _build(level, xs, ys, d_hat - m, 1.0, 2 * m + 1, rng, jitter)
    vol.low_confidence = bad
    return vol, winner_take_all(vol)


def build_pyramid(d_hat, coarse: MatchingLevel, fine: MatchingLevel | None, m: int, rng=None,
                  jitter: bool = True, fallback: float | None = None):
    """Coarse local volume at output resolution plus a fine one on the same grid.

    The fine volume evaluates costs with the fine level's cameras and
    features, with unit spacing in fine pseudo-disparity units, centred on
    the coarse argmin.  Returns ``(pyramid, coarse_argmin)``.
    """
    cvol, best = build_local_volume(coarse, d_hat, m, rng, jitter, fallback=fallback)
    if fine is None:
        return CostVolumePyramid(cvol), best
    ratio = fine.scale / coarse.scale
    if ratio < 1:
        raise CostError("the fine level must not be coarser than the output level")
    grid = fine.pixel_grid(coarse.shape, ratio)
    fvol, _ = build_local_volume(fine, best * float(ratio), m, rng, jitter, grid=grid)
    return CostVolumePyramid(cvol, fvol, float(ratio)), best


def sample_cost(vol: CostVolume, d) -> np.ndarray:
    """Piecewise-linear cost at pseudo disparity ``d`` (per pixel, clamped).

    ``d`` has shape ``(H, W)`` or ``(H, W, K)``; interpolation uses each
    pixel's own (jittered) slice positions.
    """
    d = np.asarray(d, dtype=np.float64)
    squeeze = d.ndim == 2
    if squeeze:
        d = d[..., None]
    h = vol.hypotheses
    c = vol.values
    n = h.shape[-1]
    i = (h[:, :, None, :] <= d[..., None]).sum(axis=-1) - 1
    i = np.clip(i, 0, n - 2)
    h0 = np.take_along_axis(h, i, axis=-1)
    h1 = np.take_along_axis(h, i + 1, axis=-1)
    c0 = np.take_along_axis(c, i, axis=-1)
    c1 = np.take_along_axis(c, i + 1, axis=-1)
    gap = h1 - h0
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(gap > 0, (d - h0) / np.where(gap > 0, gap, 1.0), 0.0)
    out = c0 + np.clip(t, 0.0, 1.0) * (c1 - c0)
    return out[..., 0] if squeeze else out


def cost_triplet(pyr: CostVolumePyramid, d) -> np.ndarray:
    """Costs at ``d + eps`` for ``eps`` in ``(-1, 0, 1)`` from each pyramid level.

    Shape ``d.shape + (3,)`` or ``d.shape + (6,)`` with a fine volume; the fine
    triplet converts ``d`` to fine units before applying ``eps``.
    """
    d = np.asarray(d, dtype=np.float64)
    parts = [sample_cost(pyr.coarse, d + e) for e in (-1.0, 0.0, 1.0)]
    if pyr.fine is not None:
        df = d * pyr.ratio
        parts += [sample_cost(pyr.fine, df + e) for e in (-1.0, 0.0, 1.0)]
    return np.stack(parts, axis=-1)


def winner_take_all(vol: CostVolume) -> np.ndarray:
    """Hypothesis of the lowest-cost slice per pixel (ties go to the lowest index)."""
    i = np.argmin(vol.values, axis=-1)
    return np.take_along_axis(vol.hypotheses, i[..., None], axis=-1)[..., 0]
