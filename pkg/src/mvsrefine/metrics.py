"""Depth and normal accuracy metrics over valid ground-truth pixels.

Depths are metric (metres); millimetre thresholds are converted internally.
Pixels with a missing prediction count as errors, never as hits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera, normals_from_depth

MM_PER_M = 1000.0
DEFAULT_MM = (1.0, 2.0, 4.0)
DEFAULT_NORMAL = ((5.0, 1.0), (10.0, 1.0))


class MetricError(ValueError):
    pass


def nn_downsample(depth, k: int) -> np.ndarray:
    """Nearest-neighbour resize by ``1/k``: output ``(y, x)`` takes input ``(y*k + k//2, x*k + k//2)``."""
    depth = np.asarray(depth)
    if k < 1:
        raise MetricError("downsampling factor must be >= 1")
    h, w = depth.shape[0] // k, depth.shape[1] // k
    return depth[k // 2::k, k // 2::k][:h, :w]


def _valid(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise MetricError(f"shape mismatch: prediction {pred.shape} vs ground truth {gt.shape}")
    ok = np.isfinite(gt) & (gt > 0)
    return pred, gt, ok


def abs_error_mm(pred, gt) -> tuple:
    pred, gt, ok = _valid(pred, gt)
    err = np.abs(pred - gt) * MM_PER_M
    return np.where(np.isfinite(err), err, np.inf), ok


def pct_below(pred, gt, x_mm: float) -> float:
    """Percentage of valid pixels with absolute error below ``x_mm``."""
    err, ok = abs_error_mm(pred, gt)
    if not ok.any():
        raise MetricError("no valid ground-truth pixels")
    return 100.0 * float(np.count_nonzero(err[ok] < x_mm)) / float(np.count_nonzero(ok))


def mae_at(pred, gt, x_mm: float):
    """Mean absolute error (mm) over valid pixels with error below ``x_mm``; ``None`` if there are none."""
    err, ok = abs_error_mm(pred, gt)
    sel = err[ok & (err < x_mm)]
    if sel.size == 0:
        return None
    return float(np.mean(sel, dtype=np.float64))


def pct_below_pd(pred_pd, gt_pd, thresh: float = 1.0) -> float:
    """Percentage of valid pixels whose pseudo-disparity error is below ``thresh``."""
    pred, gt, ok = _valid(pred_pd, gt_pd)
    if not ok.any():
        raise MetricError("no valid ground-truth pixels")
    err = np.abs(pred - gt)
    return 100.0 * float(np.count_nonzero(np.where(np.isfinite(err), err, np.inf)[ok] < thresh)) / float(ok.sum())


def angular_error_deg(n1, n2) -> np.ndarray:
    dot = np.clip(np.einsum("...i,...i->...", n1, n2), -1.0, 1.0)
    return np.degrees(np.arccos(dot))


def normal_pct(pred_depth, gt_depth, cam: Camera, deg: float, dsp_gate: float, scale_fb: float):
    """Percentage of gated pixels whose normal is within ``deg`` degrees.

    The gate keeps valid pixels whose pseudo-disparity error (with ``scale_fb``)
    is below ``dsp_gate``; returns ``None`` when the gate is empty.
    """
    pred, gt, ok = _valid(pred_depth, gt_depth)
    with np.errstate(divide="ignore", invalid="ignore"):
        dsp = np.abs(scale_fb / pred - scale_fb / gt)
    n_pred = normals_from_depth(np.where(pred > 0, pred, np.nan), cam)
    n_gt = normals_from_depth(np.where(ok, gt, np.nan), cam)
    gate = ok & np.isfinite(dsp) & (dsp < dsp_gate) & np.isfinite(n_gt).all(-1)
    if not gate.any():
        return None
    ang = angular_error_deg(np.nan_to_num(n_pred[gate]), n_gt[gate])
    hit = np.isfinite(n_pred[gate]).all(-1) & (ang < deg)
    return 100.0 * float(hit.sum()) / float(gate.sum())


@dataclass
class MetricReport:
    pct_below_mm: dict = field(default_factory=dict)
    mae_at_mm: dict = field(default_factory=dict)
    normal_pct: dict = field(default_factory=dict)      # (deg, gate) -> pct
    pct_below_pd: dict = field(default_factory=dict)
    valid_pixel_count: int = 0

    def to_dict(self):
        return {
            "pct_below_mm": {f"{k:g}": v for k, v in self.pct_below_mm.items()},
            "mae_at_mm": {f"{k:g}": v for k, v in self.mae_at_mm.items()},
            "normal_pct": {f"{d:g}deg@{g:g}dsp": v for (d, g), v in self.normal_pct.items()},
            "pct_below_pd": {f"{k:g}": v for k, v in self.pct_below_pd.items()},
            "valid_pixel_count": self.valid_pixel_count,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        def fmt(v):
            return "n/a" if v is None else f"{v:.4f}"
        rows = [(f"%<{k:g}mm", fmt(v)) for k, v in self.pct_below_mm.items()]
        rows += [(f"MAE(@<{k:g}mm)", fmt(v)) for k, v in self.mae_at_mm.items()]
        rows += [(f"%<{d:g}deg(@<{g:g}dsp)", fmt(v)) for (d, g), v in self.normal_pct.items()]
        rows += [(f"%<{k:g}dsp", fmt(v)) for k, v in self.pct_below_pd.items()]
        rows.append(("valid pixels", str(self.valid_pixel_count)))
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{name:<{width}}  {val:>10}" for name, val in rows)


def evaluate(pred_depth, gt_depth, cam: Camera, scale_fb: float, mm=DEFAULT_MM,
             normals=DEFAULT_NORMAL, dsp=(1.0,)) -> MetricReport:
    """All metrics for one prediction; ``gt_depth`` must already be at the prediction's resolution."""
    _, gt, ok = _valid(pred_depth, gt_depth)
    if not ok.any():
        raise MetricError("no valid ground-truth pixels")
    with np.errstate(divide="ignore", invalid="ignore"):
        pred_pd = scale_fb / np.asarray(pred_depth, dtype=np.float64)
        gt_pd = np.where(ok, scale_fb / gt, np.nan)
    return MetricReport(
        {x: pct_below(pred_depth, gt, x) for x in mm},
        {x: mae_at(pred_depth, gt, x) for x in mm},
        {(d, g): normal_pct(pred_depth, gt, cam, d, g, scale_fb) for d, g in normals},
        {t: pct_below_pd(pred_pd, gt_pd, t) for t in dsp},
        int(ok.sum()),
    )
