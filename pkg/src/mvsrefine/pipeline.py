"""End-to-end refinement: WTA initialisation, staged rank-and-select, upsampling.

The carried quantity between stages is metric depth; each stage converts it
to pseudo disparity with its own focal length, so one unit of the local
volume is always one pixel of the stage's resolution.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import ranker as rk
from .config import INITIAL, RefineConfig
from .cost import MatchingLevel, build_full_volume, build_pyramid, cost_triplet, winner_take_all
from .features import (DESK_WIDTHS, PAPER_WIDTHS, extract_context, extract_handcrafted,
                       extract_learned, init_context_net, init_unet)
from .geometry import CameraRig, to_metric_depth, to_pseudo_disparity
from .hypotheses import depth_gradient, initial_set, make_offsets, propagate
from .learn import nn
from .learn.autodiff import Tensor
from .metrics import nn_downsample


class PipelineError(ValueError):
    pass


# -- weights -------------------------------------------------------------------------

def match_widths(config: RefineConfig) -> dict:
    return dict(PAPER_WIDTHS if config.match_widths == "paper" else DESK_WIDTHS)


def init_model(config: RefineConfig, rng=None, parts=("match", "context", "stages")) -> dict:
    """Freshly initialised parameters for every trainable part of ``config``."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    params: dict = {}
    widths = match_widths(config)
    if "match" in parts and config.features == "learned":
        params.update(init_unet(rng, widths, widths, prefix="match"))
    if "context" in parts:
        params.update(init_context_net(rng, config.context_channels, DESK_WIDTHS, prefix="context"))
    if "stages" in parts:
        for i, st in enumerate(config.stages):
            c = config.context_channels[st.base_scale]
            params.update(rk.init_ranker(rng, 6 if st.has_fine else 3, c, c, config.use_geometry,
                                         config.hidden, prefix=f"stage{i}"))
    return params


_TEMPLATES: dict = {}


def check_model(params: dict, config: RefineConfig, parts=("match", "context", "stages")):
    """Raise :class:`PipelineError` unless ``params`` has every tensor ``config`` needs."""
    key = (config.to_json(), tuple(parts))
    if key not in _TEMPLATES:
        _TEMPLATES[key] = {k: v.shape for k, v in init_model(config, np.random.default_rng(0), parts).items()}
    template = _TEMPLATES[key]
    missing = sorted(set(template) - set(params))
    if missing:
        raise PipelineError(f"weights are missing {len(missing)} tensors, e.g. {missing[:3]}")
    for k, t in template.items():
        shape = tuple(np.shape(getattr(params[k], "data", params[k])))
        if shape != t:
            raise PipelineError(f"weight {k} has shape {shape}, config expects {t}")


# -- helpers ---------------------------------------------------------------------------

def nn_upsample(depth: np.ndarray, factor) -> np.ndarray:
    """Nearest-neighbour block replication by an integral factor (NaN propagates)."""
    f = Fraction(factor)
    if f.denominator != 1 or f < 1:
        raise PipelineError(f"upsampling factor must be a positive integer, got {factor}")
    k = int(f)
    if k == 1:
        return np.array(depth, copy=True)
    return np.repeat(np.repeat(np.asarray(depth), k, axis=0), k, axis=1)


def pct_within(pd, gt_pd, thresh: float = 1.0) -> float:
    ok = np.isfinite(gt_pd)
    if not ok.any():
        return float("nan")
    return 100.0 * float(np.mean(np.abs(pd[ok] - gt_pd[ok]) < thresh))


def gt_at_scale(gt_depth, full_shape, scale) -> np.ndarray:
    k = Fraction(1) / Fraction(scale)
    if k.denominator != 1:
        raise PipelineError(f"scale {scale} is not a unit fraction")
    g = nn_downsample(gt_depth, int(k))
    expect = (int(full_shape[0] * scale), int(full_shape[1] * scale))
    if g.shape != expect:
        raise PipelineError(f"ground truth shape {np.shape(gt_depth)} does not match the images")
    return g


@dataclass
class StageSnapshot:
    scale: Fraction
    depth: np.ndarray
    pd: np.ndarray
    scale_fb: float
    seconds: float


@dataclass
class RefineResult:
    depth: np.ndarray          # metric depth at the final scale
    pd: np.ndarray             # pseudo disparity at the final scale
    scale: Fraction
    scale_fb: float
    wta_depth: np.ndarray      # initialisation at the coarsest scale
    wta_pd: np.ndarray
    wta_scale_fb: float
    snapshots: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)
    terms: list = field(default_factory=list)   # training records when collecting
    pyramids: list | None = None                # matching features, kept when collecting


@dataclass
class TrainTerm:
    """Scores of one iteration and what the contrastive loss needs."""

    stage: int
    iteration: int
    scores: Tensor
    values: np.ndarray
    gt_pd: np.ndarray
    estimate: Tensor | None = None   # expectation-mode output


# -- feature setup ---------------------------------------------------------------------

def _pyramids(images, params, config: RefineConfig, scales):
    if config.features == "handcrafted":
        return [extract_handcrafted(im, scales) for im in images]
    return [extract_learned(im, params, scales, prefix="match") for im in images]


def matching_levels(rig: CameraRig, pyramids, config: RefineConfig, scales=None) -> dict:
    scales = config.feature_scales if scales is None else scales
    b = rig.baseline_b
    return {s: MatchingLevel.from_pyramids(rig, pyramids[0], pyramids[1:], s, b, config.alpha, config.delta)
            for s in scales}


def _check_inputs(rig: CameraRig, images, depth_range):
    if len(images) != 1 + len(rig.sources):
        raise PipelineError(f"expected {1 + len(rig.sources)} images, got {len(images)}")
    for im, cam in zip(images, [rig.reference, *rig.sources]):
        if np.shape(im) != (cam.height, cam.width):
            raise PipelineError(f"image shape {np.shape(im)} does not match camera {cam.height}x{cam.width}")
    dmin, dmax = depth_range
    if not 0 < dmin < dmax:
        raise PipelineError(f"invalid depth range {depth_range}")


# -- the refinement ------------------------------------------------------------------------

def full_volume_init(level: MatchingLevel, depth_range, config: RefineConfig, rng):
    """WTA pseudo disparity from the full volume over the scene's depth range."""
    dmin, dmax = depth_range
    lo, hi = level.scale_fb / dmax, level.scale_fb / dmin
    vol = build_full_volume(level, lo, hi, config.n_full, rng, config.jitter)
    return vol, winner_take_all(vol)


def stage_refine(stage_idx: int, pd, levels: dict, appearance, params: dict, config: RefineConfig,
                 rng, scorer=None, gt_pd=None, collect: bool = False, trace: list | None = None,
                 bounds=None):
    """Run one stage's iteration schedule; returns ``(pd, terms)``.

    ``bounds`` (pseudo disparity at the stage scale) clips every candidate to
    the scene's depth range.
    """
    st = config.stages[stage_idx]
    prefix = f"stage{stage_idx}"
    coarse = levels[st.base_scale]
    fine = levels[st.fine_scale] if st.has_fine else None
    if not np.isfinite(pd).any():
        raise PipelineError("no valid depth to refine")
    mid = float(np.nanmedian(pd))
    offsets = make_offsets(config.dilations)

    def rebuild(d):
        return build_pyramid(d, coarse, fine, st.m, rng, config.jitter, fallback=mid)

    terms = []
    if not st.iterations:
        return np.array(pd, copy=True), terms
    pyr, best = rebuild(pd)
    d_hat = best if config.recenter_on_local_wta else np.where(np.isfinite(pd), pd, mid)
    grad = depth_gradient(d_hat)
    ctx = None
    if scorer is None:
        ctx = rk.init_context(pyr, d_hat, grad, appearance, params, config.use_geometry, prefix)
    last = len(st.schedule) - 1
    for it, kind in enumerate(st.schedule):
        hyps = initial_set(d_hat, st.m, rng, config.jitter) if kind == INITIAL else propagate(d_hat, grad, offsets)
        if bounds is not None:
            hyps.values = np.clip(hyps.values, *bounds)
        if scorer is not None:
            scores = scorer(hyps.values, d_hat, gt_pd, pyr)
            d_new = rk.select_best(hyps.values, scores)
        else:
            feat = rk.hypothesis_part(pyr, d_hat, grad, hyps.values, config.use_geometry)
            scores = rk.score_candidates(feat, ctx, params, prefix)
            if config.mode == "expectation":
                est = rk.expectation_refine(hyps.values, scores)
                d_new = np.asarray(est.data, dtype=np.float64)
            else:
                est = None
                d_new = rk.select_best(hyps.values, scores)
            if collect:
                terms.append(TrainTerm(stage_idx, it, scores, hyps.values, gt_pd, est))
        if trace is not None:
            row = {"stage": stage_idx, "iteration": it, "kind": kind, "candidates": hyps.k}
            if gt_pd is not None:
                ok = np.isfinite(gt_pd)
                row["pct_lt1"] = pct_within(d_new, gt_pd)
                row["mae_pd"] = float(np.mean(np.abs(d_new[ok] - gt_pd[ok]))) if ok.any() else float("nan")
            trace.append(row)
        d_hat = d_new
        if it == last:
            break
        pyr, _ = rebuild(d_hat)
        grad = depth_gradient(d_hat)
        if ctx is not None:
            ctx = rk.update_context(ctx, pyr, d_hat, grad, params, config.use_geometry, prefix)
    return d_hat, terms


def oracle_scorer(values, d_hat, gt_pd, pyr=None):
    """Score ``-|d_i - d_gt|``; without ground truth, prefer staying near ``d_hat``."""
    target = np.where(np.isfinite(gt_pd), gt_pd, d_hat)
    return -np.abs(values - target[..., None])


def min_cost_scorer(values, d_hat, gt_pd, pyr):
    """Untrained reference ranker: prefer the lowest interpolated cost (finest level)."""
    trip = cost_triplet(pyr, values)
    return -trip[..., 4] if trip.shape[-1] == 6 else -trip[..., 1]


def refine(rig: CameraRig, images, params: dict | None, config: RefineConfig, depth_range,
           gt_depth=None, scorer=None, collect: bool = False, stages=None) -> RefineResult:
    """Refine the reference depth of ``rig`` from ``images`` (reference first).

    ``scorer`` replaces the learned ranker (e.g. :func:`oracle_scorer`, which
    needs ``gt_depth``).  ``collect`` keeps the score tensors on the tape for
    training; ``stages`` limits how many stages run.
    """
    _check_inputs(rig, images, depth_range)
    if scorer is not None and gt_depth is None and scorer is oracle_scorer:
        raise PipelineError("the oracle scorer needs ground-truth depth")
    params = {} if params is None else params
    check_model(params, config, ("match", "context", "stages") if scorer is None else ("match",))
    if not collect:
        params = nn.frozen(params)
    n_stages = len(config.stages) if stages is None else stages
    rng = np.random.default_rng(config.seed)
    timing, snapshots, rows, terms = {}, [], [], []
    full_shape = images[0].shape

    t0 = time.perf_counter()
    scales = config.feature_scales
    pyrs = _pyramids(images, params, config, scales)
    levels = matching_levels(rig, pyrs, config, scales)
    appearance = None
    if scorer is None:
        ctx_pyr = extract_context(images[0], params, prefix="context")
    timing["features"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    first = levels[config.coarsest]
    _, wta = full_volume_init(first, depth_range, config, rng)
    timing["wta"] = time.perf_counter() - t0
    wta_depth = to_metric_depth(wta, first.scale_fb)
    depth, scale = wta_depth, config.coarsest
    pd = wta

    for i, st in enumerate(config.stages[:n_stages]):
        t0 = time.perf_counter()
        level = levels[st.base_scale]
        depth = nn_upsample(depth, st.base_scale / scale)
        scale = st.base_scale
        pd = to_pseudo_disparity(depth, level.scale_fb, 1.0)
        gt_pd = None
        if gt_depth is not None:
            gt_pd = to_pseudo_disparity(gt_at_scale(gt_depth, full_shape, scale), level.scale_fb, 1.0)
        if scorer is None:
            appearance = ctx_pyr[scale]
        bounds = (level.scale_fb / depth_range[1], level.scale_fb / depth_range[0])
        pd, t = stage_refine(i, pd, levels, appearance, params, config, rng, scorer, gt_pd, collect, rows, bounds)
        terms += t
        depth = to_metric_depth(pd, level.scale_fb)
        dt = time.perf_counter() - t0
        timing[f"stage{i}"] = dt
        snapshots.append(StageSnapshot(scale, depth, pd, level.scale_fb, dt))

    fb = levels[scale].scale_fb
    return RefineResult(depth, pd, scale, fb, wta_depth, wta,
                        first.scale_fb, snapshots, rows, timing, terms, pyrs if collect else None)
