"""Contrastive ranking loss and the feature-matching loss.

The ranking loss only sees scores, so its gradient reaches the context and
ranker parameters.  The matching loss is evaluated on costs recomputed on the
tape from the matching features alone, so it never touches the ranker.
"""

from __future__ import annotations

import warnings

import numpy as np

from ..cost import ALPHA, DELTA, CostVolume, sample_cost
from ..geometry import Camera, to_metric_depth, warp_points
from . import autodiff as ad
from .autodiff import Tensor

POSITIVE_RADIUS = 1.0
NEG_FILL = -1e9
FM_ALPHA = 0.0
FM_BETA = 1.0
FM_BETA_FINEST = 0.8


def positives(values, d_gt, radius: float = POSITIVE_RADIUS):
    """Mask of candidates within ``radius`` of the ground truth (inclusive)."""
    d_gt = np.asarray(d_gt, dtype=np.float64)
    return np.abs(np.asarray(values) - d_gt[..., None]) <= radius


def loss_cl(scores, values, d_gt, radius: float = POSITIVE_RADIUS) -> Tensor:
    """Masked mean over pixels of ``-log`` of the softmax mass on positive candidates.

    Pixels without ground truth or without any positive candidate are left
    out.  With no supervisable pixel the loss is zero (and a warning is issued).
    """
    scores = ad.as_tensor(scores)
    k = scores.shape[-1]
    pos = positives(values, d_gt, radius) & np.isfinite(np.asarray(d_gt))[..., None]
    pos = pos.reshape(-1, k)
    rows = np.flatnonzero(pos.any(axis=1))
    if rows.size == 0:
        warnings.warn("no supervisable pixel for the ranking loss", RuntimeWarning, stacklevel=2)
        return Tensor(np.zeros((), dtype=scores.dtype))
    s = ad.take(ad.reshape(scores, (-1, k)), rows)
    fill = np.where(pos[rows], 0.0, NEG_FILL).astype(scores.dtype)
    per_pixel = ad.sub(ad.logsumexp(s, axis=-1), ad.logsumexp(ad.add(s, fill), axis=-1))
    return ad.mean(per_pixel)


def loss_expectation(estimate, d_gt, beta: float = 1.0) -> Tensor:
    """Smooth-L1 regression loss for the expectation ablation (masked mean)."""
    estimate = ad.as_tensor(estimate)
    d_gt = np.asarray(d_gt, dtype=np.float64)
    idx = np.flatnonzero(np.isfinite(d_gt).ravel())
    if idx.size == 0:
        return Tensor(np.zeros((), dtype=estimate.dtype))
    diff = ad.sub(ad.take(ad.reshape(estimate, (-1,)), idx), d_gt.ravel()[idx].astype(estimate.dtype))
    return ad.mean(ad.smooth_l1(diff, beta))


def hard_negative(vol: CostVolume, d_gt, radius: float = POSITIVE_RADIUS):
    """Lowest-cost slice at least ``radius`` away from the ground truth.

    Returns ``(d_neg, c_neg, ok)``; ``ok`` is False where no slice qualifies
    or the ground truth is invalid.
    """
    d_gt = np.asarray(d_gt, dtype=np.float64)
    h = vol.hypotheses
    far = np.abs(h - d_gt[..., None]) > radius
    masked = np.where(far, vol.values, np.inf)
    i = np.argmin(masked, axis=-1)
    ok = far.any(axis=-1) & np.isfinite(d_gt)
    d_neg = np.take_along_axis(h, i[..., None], axis=-1)[..., 0]
    c_neg = np.take_along_axis(vol.values, i[..., None], axis=-1)[..., 0]
    return d_neg, c_neg, ok


def loss_fm(vol: CostVolume, d_gt, alpha_clip: float = FM_ALPHA, beta_clip: float = FM_BETA) -> float:
    """``mean(c(d_gt) - clip(c(d_neg), alpha, beta))`` on a stored volume (no gradient)."""
    if not alpha_clip < beta_clip:
        raise ValueError("alpha_clip must be below beta_clip")
    d_gt = np.asarray(d_gt, dtype=np.float64)
    d_neg, c_neg, ok = hard_negative(vol, d_gt)
    if not ok.any():
        return 0.0
    c_gt = sample_cost(vol, np.where(ok, d_gt, 0.0))
    return float(np.mean(c_gt[ok] - np.clip(c_neg[ok], alpha_clip, beta_clip)))


# -- differentiable costs for the matching loss -----------------------------------------------

def tape_costs(ref_feat: Tensor, src_feats, ref: Camera, sources, scale_fb: float, xs, ys, pd,
               alpha: float = ALPHA, delta: float = DELTA):
    """Aggregated cost at integer pixels ``(xs, ys)`` and pseudo disparities ``pd`` (all 1-D).

    The cost is differentiable w.r.t. the feature maps; warps are constants.
    Returns ``(cost, any_valid)``.
    """
    depth = to_metric_depth(pd, scale_fb)
    f_ref = ad.take(ad.transpose(ref_feat, (1, 2, 0)), (ys, xs))   # (n, C)
    num = den = None
    any_valid = np.zeros(len(xs), dtype=bool)
    for cam, feat in zip(sources, src_feats):
        u, v, ok = warp_points(ref, cam, xs, ys, np.nan_to_num(depth, nan=-1.0))
        any_valid |= ok
        warped = ad.grid_sample(feat, np.where(ok, u, 0.0), np.where(ok, v, 0.0))
        c = ad.neg(ad.sum(ad.mul(f_ref, warped), axis=-1))
        x = ad.sub(delta, c)
        w = ad.mul(ad.sigmoid(ad.mul(ad.mul(ad.mul(x, x), x), alpha)), ok.astype(ref_feat.dtype))
        num = ad.mul(w, c) if num is None else ad.add(num, ad.mul(w, c))
        den = w if den is None else ad.add(den, w)
    safe = np.where(any_valid, 0.0, 1.0).astype(ref_feat.dtype)
    return ad.div(num, ad.add(den, safe)), any_valid


def fm_term(c_gt: Tensor, c_neg: Tensor, alpha_clip: float, beta_clip: float) -> Tensor:
    return ad.mean(ad.sub(c_gt, ad.clip(c_neg, alpha_clip, beta_clip)))
