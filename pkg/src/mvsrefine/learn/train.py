"""Training loop: random crops, source-view sampling, both losses, Adam."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .. import io
from ..config import RefineConfig
from ..cost import MatchingLevel, _build
from ..geometry import CameraRig, crop_camera, scale_camera, to_pseudo_disparity
from ..metrics import nn_downsample
from ..pipeline import init_model, refine
from . import autodiff as ad
from . import nn
from .losses import FM_ALPHA, FM_BETA, FM_BETA_FINEST, fm_term, hard_negative, loss_cl, loss_expectation, tape_costs
from .optim import AdamState, adam_step, zero_grad

log = logging.getLogger(__name__)

ALL_PARTS = ("match", "context", "stages")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-3
    crop: tuple = (96, 128)          # (height, width), multiples of 8
    extra_sources: int = 2           # random views added to the closest one
    fm_pixels: int = 1024            # matching-loss pixels per level (all if fewer)
    fm_alpha: float = -1.0           # lower clip on hard-negative costs; FM_ALPHA (0) collapses features at desk scale
    parts: tuple = ALL_PARTS         # which parameter groups are updated
    checkpoint_every: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.crop[0] % 8 or self.crop[1] % 8:
            raise ValueError("crop size must be a multiple of 8")
        unknown = set(self.parts) - set(ALL_PARTS)
        if unknown:
            raise ValueError(f"unknown parameter groups {sorted(unknown)}")


@dataclass
class TrainResult:
    params: dict
    log: list = field(default_factory=list)     # (step, loss_fm, loss_cl)
    skipped: int = 0


def _group(name: str) -> str:
    return "stages" if name.startswith("stage") else name.split(".", 1)[0]


def sample_views(rng, rig: CameraRig, extra: int):
    """The closest source plus ``extra`` others drawn without replacement."""
    closest = rig.closest_source
    others = [i for i in range(len(rig.sources)) if i != closest]
    pick = sorted(rng.choice(others, size=min(extra, len(others)), replace=False).tolist()) if others else []
    return [closest] + pick


def sample_crop(rng, scene, crop, views):
    """Reference crop (offsets on the 8-pixel grid) with the selected full source views."""
    ch, cw = crop
    ref = scene.rig.reference
    if ch > ref.height or cw > ref.width:
        raise ValueError(f"crop {cw}x{ch} larger than the {ref.width}x{ref.height} image")
    y0 = 8 * int(rng.integers((ref.height - ch) // 8 + 1))
    x0 = 8 * int(rng.integers((ref.width - cw) // 8 + 1))
    rig = CameraRig(crop_camera(ref, x0, y0, cw, ch), [scene.rig.sources[i] for i in views])
    images = [scene.images[0][y0:y0 + ch, x0:x0 + cw]] + [scene.images[i + 1] for i in views]
    return rig, images, scene.depths[0][y0:y0 + ch, x0:x0 + cw]


def matching_loss(rng, rig, pyramids, gt_depth, depth_range, config: RefineConfig, n_pixels: int,
                  alpha_clip: float = FM_ALPHA):
    """Mean over feature scales of the clipped hard-negative matching loss."""
    terms = []
    b = rig.baseline_b
    finest = max(config.feature_scales)
    for s in config.feature_scales:
        k = int(Fraction(1) / s)
        ref = scale_camera(rig.reference, s)
        srcs = [scale_camera(c, s) for c in rig.sources]
        fb = ref.intrinsics.fx * b
        gt = to_pseudo_disparity(nn_downsample(gt_depth, k), fb, 1.0)
        ys, xs = np.nonzero(np.isfinite(gt))
        if xs.size == 0:
            continue
        if xs.size > n_pixels:
            sel = np.sort(rng.choice(xs.size, n_pixels, replace=False))
            xs, ys = xs[sel], ys[sel]
        level = MatchingLevel(ref, tuple(srcs), pyramids[0].array(s), [p.array(s) for p in pyramids[1:]],
                              fb, s, config.alpha, config.delta)
        lo, hi = fb / depth_range[1], fb / depth_range[0]
        n = int(math.ceil(hi - lo)) + 1
        gx, gy = xs[:, None].astype(np.float64), ys[:, None].astype(np.float64)
        vol = _build(level, gx, gy, np.full(gx.shape, lo), 1.0, n, rng, config.jitter)
        d_gt = gt[ys, xs]
        d_neg, _, ok = hard_negative(vol, d_gt[:, None])
        ok = ok[:, 0]
        if not ok.any():
            continue
        xs, ys, d_gt, d_neg = xs[ok], ys[ok], d_gt[ok], d_neg[ok, 0]
        feats = [pyramids[0][s]] + [p[s] for p in pyramids[1:]]
        c_gt, v1 = tape_costs(feats[0], feats[1:], ref, srcs, fb, xs, ys, d_gt, config.alpha, config.delta)
        c_neg, v2 = tape_costs(feats[0], feats[1:], ref, srcs, fb, xs, ys, d_neg, config.alpha, config.delta)
        both = np.flatnonzero(v1 & v2)
        if both.size == 0:
            continue
        beta = FM_BETA_FINEST if s == finest else FM_BETA
        terms.append(fm_term(ad.take(c_gt, both), ad.take(c_neg, both), alpha_clip, beta))
    if not terms:
        return None
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.div(total, float(len(terms)))


def ranking_loss(terms, config: RefineConfig):
    parts = []
    for t in terms:
        if config.mode == "expectation":
            parts.append(loss_expectation(t.estimate, t.gt_pd))
        else:
            parts.append(loss_cl(t.scores, t.values, t.gt_pd))
    if not parts:
        return None
    total = parts[0]
    for p in parts[1:]:
        total = ad.add(total, p)
    return ad.div(total, float(len(parts)))


def _write_log(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss_fm", "loss_cl"])
        for step, fm, cl in rows:
            w.writerow([step, repr(fm), repr(cl)])


def train_loop(scenes, config: RefineConfig, tcfg: TrainConfig, params: dict | None = None,
               out_dir=None, progress=None) -> TrainResult:
    """Train on ``scenes`` (a list of :class:`~mvsrefine.synth.Scene`).

    ``params`` seeds the weights (missing groups are initialised from
    ``tcfg.seed``).  Only groups listed in ``tcfg.parts`` are updated; the
    others are used frozen.  Writes ``loss.csv`` and checkpoints to
    ``out_dir`` when given.
    """
    if not scenes:
        raise ValueError("training needs at least one scene")
    rng = np.random.default_rng(tcfg.seed)
    init = init_model(config, np.random.default_rng(tcfg.seed))
    base = {**init, **(params or {})}
    train = {k: nn.param(getattr(v, "data", v)) for k, v in base.items() if _group(k) in tcfg.parts}
    fixed = nn.frozen({k: v for k, v in base.items() if _group(k) not in tcfg.parts})
    state = AdamState(lr=tcfg.lr)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rows = []
    use_fm = "match" in tcfg.parts and config.features == "learned"

    def snapshot():
        return {k: np.array(v.data) for k, v in {**fixed, **train}.items()}

    for step in range(tcfg.steps):
        scene = scenes[int(rng.integers(len(scenes)))]
        views = sample_views(rng, scene.rig, tcfg.extra_sources)
        rig, images, gt = sample_crop(rng, scene, tcfg.crop, views)
        cfg = config.replace(seed=int(rng.integers(2 ** 31)))
        res = refine(rig, images, {**fixed, **train}, cfg, scene.depth_range, gt_depth=gt, collect=True)
        l_cl = ranking_loss(res.terms, cfg)
        l_fm = (matching_loss(rng, rig, res.pyramids, gt, scene.depth_range, cfg, tcfg.fm_pixels, tcfg.fm_alpha)
                if use_fm else None)
        parts = [t for t in (l_fm, l_cl) if t is not None]
        fm_val = float(l_fm.data) if l_fm is not None else 0.0
        cl_val = float(l_cl.data) if l_cl is not None else 0.0
        rows.append((step, fm_val, cl_val))
        if not np.isfinite(fm_val + cl_val):
            if out is not None:
                io.save_weights(out / f"diverged_{step}.chsn", snapshot())
                _write_log(out / "loss.csv", rows)
            raise TrainingDiverged(f"non-finite loss at step {step}")
        if parts:
            total = parts[0] if len(parts) == 1 else ad.add(parts[0], parts[1])
            zero_grad(train)
            if total.requires_grad:
                total.backward()
            adam_step(train, state)
        if progress is not None:
            progress(step, fm_val, cl_val)
        if out is not None and tcfg.checkpoint_every and (step + 1) % tcfg.checkpoint_every == 0:
            io.save_weights(out / f"checkpoint_{step + 1}.chsn", snapshot())
            _write_log(out / "loss.csv", rows)
    result = TrainResult(snapshot(), rows, state.skipped)
    if out is not None:
        io.save_weights(out / "weights.chsn", result.params)
        _write_log(out / "loss.csv", rows)
    return result
