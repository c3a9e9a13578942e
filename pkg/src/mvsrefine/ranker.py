"""Hypothesis scoring, selection and the recurrent context state.

A hypothesis ``d_i`` at pixel ``p`` is described by the concatenation of

* its cost triplet(s) from the cost-volume pyramid,
* the tanh-squashed second-order error against the current estimate over the
  one-ring neighbourhood, and
* the per-pixel context feature, which does not depend on ``d_i``.

A four-layer per-pixel perceptron maps this vector to a score and the best
scored candidate becomes the new estimate.  Each candidate is scored on its
own, so the ranking is equivariant to the order of the candidate list.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cost import CostVolumePyramid, cost_triplet
from .hypotheses import ONE_RING, second_order_error
from .learn import autodiff as ad
from .learn import nn
from .learn.autodiff import Tensor

HIDDEN = 64
GEOM_SIZE = len(ONE_RING)


class RankerError(ValueError):
    pass


@dataclass
class ContextState:
    feature: Tensor   # (C, H, W)
    h_full: Tensor    # (C, H, W)
    h_half: Tensor    # (C, H/2, W/2)


def feature_size(triplet: int, channels: int, use_geometry: bool = True) -> int:
    return triplet + (GEOM_SIZE if use_geometry else 0) + channels


def init_ranker(rng, triplet: int, channels: int, appearance: int, use_geometry: bool = True,
                hidden: int = HIDDEN, prefix: str = "ranker") -> dict:
    """Scoring MLP, context initialiser and two ConvGRUs for one stage."""
    p: dict = {}
    hyp = triplet + (GEOM_SIZE if use_geometry else 0)
    nn.init_linear(p, f"{prefix}.score0", rng, hyp + channels, hidden)
    nn.init_linear(p, f"{prefix}.score1", rng, hidden, hidden)
    nn.init_linear(p, f"{prefix}.score2", rng, hidden, hidden)
    nn.init_linear(p, f"{prefix}.score3", rng, hidden, 1, gain=1.0)
    nn.init_conv(p, f"{prefix}.ctx0", rng, hyp + appearance, channels, 3)
    nn.init_conv(p, f"{prefix}.ctx1", rng, channels, channels, 3, gain=1.0)
    nn.init_gru(p, f"{prefix}.gru_full", rng, channels, hyp + channels)
    nn.init_gru(p, f"{prefix}.gru_half", rng, channels, hyp + channels)
    return p


def assemble_feature(pyr: CostVolumePyramid, d_hat, grad, ctx: ContextState | None, d,
                     use_geometry: bool = True) -> np.ndarray:
    """Full hypothesis feature ``[costs, geometry, context]`` for candidates ``d``.

    ``d`` has shape ``(H, W)`` or ``(H, W, K)``; the result appends the
    feature axis.
    """
    d = np.asarray(d, dtype=np.float64)
    parts = [cost_triplet(pyr, d)]
    if use_geometry:
        parts.append(second_order_error(d_hat, grad, d))
    if ctx is not None:
        c = ctx.feature.data.transpose(1, 2, 0)
        if d.ndim == 3:
            c = np.broadcast_to(c[:, :, None, :], d.shape + (c.shape[-1],))
        parts.append(c)
    return np.concatenate(parts, axis=-1)


def hypothesis_part(pyr, d_hat, grad, d, use_geometry: bool = True) -> np.ndarray:
    """The candidate-dependent part of the feature (no context)."""
    return assemble_feature(pyr, d_hat, grad, None, d, use_geometry)


def _mlp_tail(params, prefix, x):
    x = ad.relu(nn.linear(params, f"{prefix}.score1", x))
    x = ad.relu(nn.linear(params, f"{prefix}.score2", x))
    return nn.linear(params, f"{prefix}.score3", x)


def score(feat, params: dict, prefix: str = "ranker") -> Tensor:
    """Scores of full feature vectors ``(..., F)`` -> ``(...)``."""
    feat = ad.as_tensor(feat)
    w0 = params[f"{prefix}.score0.w"]
    if feat.shape[-1] != w0.shape[0]:
        raise RankerError(f"feature width {feat.shape[-1]} does not match the MLP input {w0.shape[0]}")
    lead = feat.shape[:-1]
    x = ad.reshape(feat, (-1, feat.shape[-1]))
    x = ad.relu(nn.linear(params, f"{prefix}.score0", x))
    return ad.reshape(_mlp_tail(params, prefix, x), lead)


def score_candidates(hyp: np.ndarray, ctx: ContextState, params: dict,
                     prefix: str = "ranker") -> Tensor:
    """Scores ``(H, W, K)`` from candidate features ``(H, W, K, F_h)`` and the context.

    Equivalent to :func:`score` on the concatenated feature; the context's
    first-layer projection is computed once per pixel instead of per candidate.
    """
    h, w, k, fh = hyp.shape
    w0 = params[f"{prefix}.score0.w"]
    c = ctx.feature.shape[0]
    if fh + c != w0.shape[0]:
        raise RankerError(f"feature width {fh + c} does not match the MLP input {w0.shape[0]}")
    a = ad.matmul(Tensor(hyp.reshape(-1, fh).astype(w0.dtype)), ad.take(w0, slice(0, fh)))
    ctx_rows = ad.reshape(ad.transpose(ctx.feature, (1, 2, 0)), (h * w, c))
    b = ad.add(ad.matmul(ctx_rows, ad.take(w0, slice(fh, fh + c))), params[f"{prefix}.score0.b"])
    x = ad.add(ad.reshape(a, (h * w, k, -1)), ad.reshape(b, (h * w, 1, -1)))
    x = ad.reshape(ad.relu(x), (h * w * k, -1))
    return ad.reshape(_mlp_tail(params, prefix, x), (h, w, k))


def select_best(values: np.ndarray, scores) -> np.ndarray:
    """Per-pixel candidate with the highest score; ties go to the lowest index."""
    s = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    i = np.argmax(s, axis=-1)
    return np.take_along_axis(np.asarray(values), i[..., None], axis=-1)[..., 0]


def expectation_refine(values, scores):
    """Softmax-weighted mean of the candidates (ablation of selection).

    Accepts numpy scores or a tape tensor (then returns a tensor).
    """
    if isinstance(scores, Tensor):
        wts = ad.exp(ad.sub(scores, ad.logsumexp(scores, axis=-1, keepdims=True)))
        return ad.sum(ad.mul(wts, np.asarray(values, dtype=scores.dtype)), axis=-1)
    s = np.asarray(scores, dtype=np.float64)
    s = s - s.max(axis=-1, keepdims=True)
    wts = np.exp(s)
    return (wts * values).sum(axis=-1) / wts.sum(axis=-1)


def _hwc_to_chw(a: np.ndarray, dtype) -> Tensor:
    return Tensor(np.ascontiguousarray(a.transpose(2, 0, 1), dtype=dtype))


def _downsample(x: Tensor) -> Tensor:
    _, h, w = x.shape
    if h % 2 == 0 and w % 2 == 0:
        return ad.area_downsample(x, 2)
    return ad.bilinear_resize(x, max(h // 2, 1), max(w // 2, 1))


def _estimate_inputs(pyr, d_hat, grad, use_geometry, dtype) -> Tensor:
    return _hwc_to_chw(hypothesis_part(pyr, d_hat, grad, d_hat, use_geometry), dtype)


def init_context(pyr: CostVolumePyramid, d_hat, grad, appearance: Tensor, params: dict,
                 use_geometry: bool = True, prefix: str = "ranker") -> ContextState:
    """Two 3x3 convolutions over ``[c(d_hat), e(d_hat), appearance]``; GRU states start at zero."""
    w = params[f"{prefix}.ctx0.w"]
    x = ad.concat([_estimate_inputs(pyr, d_hat, grad, use_geometry, w.dtype), appearance], axis=0)
    if x.shape[0] != w.shape[1]:
        raise RankerError(f"context input has {x.shape[0]} channels, expected {w.shape[1]}")
    f = ad.relu(nn.conv(params, f"{prefix}.ctx0", x))
    f = ad.tanh(nn.conv(params, f"{prefix}.ctx1", f))
    c, h, wd = f.shape
    zeros_half = np.zeros((c,) + _downsample(Tensor(np.zeros((1, h, wd)))).shape[1:], dtype=w.dtype)
    return ContextState(f, Tensor(np.zeros((c, h, wd), dtype=w.dtype)), Tensor(zeros_half))


def update_context(ctx: ContextState, pyr: CostVolumePyramid, d_hat, grad, params: dict,
                   use_geometry: bool = True, prefix: str = "ranker") -> ContextState:
    """Advance both GRUs with ``[c(d_hat), e(d_hat), feature]``; new feature is their sum."""
    dtype = ctx.feature.dtype
    x = ad.concat([_estimate_inputs(pyr, d_hat, grad, use_geometry, dtype), ctx.feature], axis=0)
    expect = params[f"{prefix}.gru_full.z.w"].shape[1] - ctx.h_full.shape[0]
    if x.shape[0] != expect:
        raise RankerError(f"GRU input has {x.shape[0]} channels, expected {expect}")
    h_full = nn.conv_gru(params, f"{prefix}.gru_full", ctx.h_full, x)
    h_half = nn.conv_gru(params, f"{prefix}.gru_half", ctx.h_half, _downsample(x))
    _, h, w = h_full.shape
    feature = ad.add(h_full, ad.bilinear_resize(h_half, h, w))
    return ContextState(feature, h_full, h_half)
