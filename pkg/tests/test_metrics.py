import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvsrefine.geometry import normals_from_depth
from mvsrefine.metrics import (MetricError, MetricReport, angular_error_deg, evaluate, mae_at, nn_downsample,
                               normal_pct, pct_below, pct_below_pd)

from conftest import make_camera


def plane_depth(cam, normal, dist):
    """Depth of the plane ``n . X = -dist`` (camera frame, ``n`` facing the camera) at every pixel centre."""
    ys, xs = np.mgrid[0:cam.height, 0:cam.width].astype(np.float64)
    K = cam.intrinsics
    rays = np.stack([(xs + 0.5 - K.cx) / K.fx, (ys + 0.5 - K.cy) / K.fy, np.ones_like(xs)], -1)
    return -dist / (rays @ np.asarray(normal))


def tilted(deg, axis="x"):
    a = np.radians(deg)
    if axis == "x":
        return np.array([0.0, np.sin(a), -np.cos(a)])
    return np.array([np.sin(a), 0.0, -np.cos(a)])


@pytest.fixture
def cam():
    return make_camera(f=80.0, w=48, h=40)


@pytest.fixture
def gt(rng):
    d = 1.0 + 0.2 * rng.random((20, 30))
    d[3, 4] = np.nan
    d[5, 6] = 0.0
    return d


# -- pct_below / mae_at ------------------------------------------------------------------------

def test_pct_below_identity(gt):
    assert pct_below(gt, gt, 1.0) == 100.0


def test_pct_below_uniform_offset(gt):
    assert pct_below(gt + 0.002, gt, 1.0) == 0.0


def test_pct_below_half_split():
    gt = np.ones((4, 4))
    pred = gt.copy()
    pred[:2] += 0.002
    assert pct_below(pred, gt, 1.0) == 50.0


def test_pct_below_counts_missing_prediction_as_miss():
    gt = np.ones((2, 2))
    pred = gt.copy()
    pred[0, 0] = np.nan
    assert pct_below(pred, gt, 1.0) == 75.0


def test_pct_below_ignores_invalid_gt(gt):
    pred = gt.copy()
    pred[3, 4] = pred[5, 6] = 99.0
    assert pct_below(pred, gt, 1.0) == 100.0


def test_pct_below_no_valid_pixels():
    with pytest.raises(MetricError):
        pct_below(np.ones((2, 2)), np.full((2, 2), np.nan), 1.0)


def test_shape_mismatch():
    with pytest.raises(MetricError):
        pct_below(np.ones((2, 2)), np.ones((2, 3)), 1.0)


def test_mae_identity(gt):
    assert mae_at(gt, gt, 1.0) == 0.0


def test_mae_uniform():
    gt = np.ones((3, 3))
    assert mae_at(gt + 0.0005, gt, 1.0) == pytest.approx(0.5, abs=1e-9)


def test_mae_mixed():
    gt = np.ones(3)[None]
    pred = gt + np.array([[0.0002, 0.0004, 0.005]])
    assert mae_at(pred, gt, 1.0) == pytest.approx(0.3, abs=1e-9)


def test_mae_empty_is_none():
    gt = np.ones((2, 2))
    assert mae_at(gt + 1.0, gt, 1.0) is None


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.01, 10.0), min_size=2, max_size=6, unique=True), st.integers(0, 2 ** 31 - 1))
def test_pct_below_monotone(thresholds, seed):
    r = np.random.default_rng(seed)
    gt = 1.0 + r.random((8, 8))
    pred = gt + r.normal(scale=0.003, size=gt.shape)
    vals = [pct_below(pred, gt, x) for x in sorted(thresholds)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert all(0.0 <= v <= 100.0 for v in vals)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_order_invariance(seed):
    r = np.random.default_rng(seed)
    gt = 1.0 + r.random((6, 7))
    pred = gt + r.normal(scale=0.002, size=gt.shape)
    perm = r.permutation(gt.size)
    p2, g2 = pred.ravel()[perm].reshape(gt.shape), gt.ravel()[perm].reshape(gt.shape)
    assert pct_below(pred, gt, 1.0) == pct_below(p2, g2, 1.0)
    a, b = mae_at(pred, gt, 2.0), mae_at(p2, g2, 2.0)
    assert (a is None and b is None) or a == pytest.approx(b, rel=1e-12)


def test_pct_below_pd():
    gt = np.array([[10.0, 20.0, np.nan, 5.0]])
    pred = np.array([[10.5, 21.5, 3.0, np.nan]])
    assert pct_below_pd(pred, gt) == pytest.approx(100.0 / 3)


# -- normals -------------------------------------------------------------------------------------

def test_angular_error_exact_agreement_is_zero():
    n = np.array([[0.0, 0.6, -0.8]])
    assert angular_error_deg(n, n)[0] == 0.0


def test_normal_pct_identity(cam):
    d = plane_depth(cam, tilted(20), 1.0)
    fb = cam.intrinsics.fx * 0.1
    for deg, gate in [(1.0, 1.0), (5.0, 0.5), (10.0, 2.0)]:
        assert normal_pct(d, d, cam, deg, gate, fb) == 100.0


@pytest.mark.parametrize("axis", ["x", "y"])
def test_tilted_plane_normal_matches_analytic(cam, axis):
    n = tilted(25, axis)
    d = plane_depth(cam, n, 1.0)
    normals = normals_from_depth(d, cam)
    inner = normals[2:-2, 2:-2].reshape(-1, 3)
    ang = angular_error_deg(inner, np.broadcast_to(n, inner.shape))
    assert ang.max() < 0.1


def test_ten_degree_plane(cam):
    gt = plane_depth(cam, tilted(0), 1.0)
    pred = plane_depth(cam, tilted(10), 1.0)
    fb = cam.intrinsics.fx * 0.1
    # every pixel passes a generous gate; the analytic angle between the planes is 10 degrees
    assert normal_pct(pred, gt, cam, 5.0, 1e6, fb) == 0.0
    assert normal_pct(pred, gt, cam, 15.0, 1e6, fb) == 100.0


def test_gate_excludes_large_depth_error(cam):
    gt = plane_depth(cam, tilted(0), 1.0)
    pred = gt.copy()
    pred[:, :24] = plane_depth(cam, tilted(40, "y"), 3.0)[:, :24]     # wrong normals, far off in depth
    fb = cam.intrinsics.fx * 0.1
    ungated = normal_pct(pred, gt, cam, 5.0, 1e6, fb)
    gated = normal_pct(pred, gt, cam, 5.0, 1.0, fb)
    assert ungated < 60.0
    # only the seam column right of the split is gated in with a mixed normal
    n_gt = np.isfinite(normals_from_depth(gt, cam)).all(-1)
    gate = n_gt & (np.abs(fb / pred - fb / gt) < 1.0)
    assert gate[:, :24].sum() == 0
    assert gated == pytest.approx(100.0 * (gate.sum() - gate[:, 24].sum()) / gate.sum())


def test_normal_pct_empty_gate(cam):
    gt = plane_depth(cam, tilted(0), 1.0)
    assert normal_pct(gt * 3, gt, cam, 5.0, 1e-3, 8.0) is None


# -- report and helpers ------------------------------------------------------------------------

def test_evaluate_identity(cam):
    gt = plane_depth(cam, tilted(15), 1.0)
    rep = evaluate(gt, gt, cam, cam.intrinsics.fx * 0.1)
    assert all(v == 100.0 for v in rep.pct_below_mm.values())
    assert all(v == 0.0 for v in rep.mae_at_mm.values())
    assert all(v == 100.0 for v in rep.normal_pct.values())
    assert rep.valid_pixel_count == gt.size


def test_report_serialisation(cam):
    gt = plane_depth(cam, tilted(15), 1.0)
    rep = evaluate(gt, gt, cam, 8.0)
    d = json.loads(rep.to_json())
    assert d["pct_below_mm"]["1"] == 100.0
    assert d["valid_pixel_count"] == gt.size
    text = rep.to_text()
    assert "%<1mm" in text and "valid pixels" in text
    assert "n/a" in MetricReport(mae_at_mm={1.0: None}).to_text()


def test_nn_downsample_picks_centre_sample():
    a = np.arange(64.0).reshape(8, 8)
    assert np.array_equal(nn_downsample(a, 4), a[2::4, 2::4])
    assert np.array_equal(nn_downsample(a, 1), a)
    with pytest.raises(MetricError):
        nn_downsample(a, 0)
