from fractions import Fraction

import numpy as np
import pytest

from mvsrefine import synth
from mvsrefine.config import RefineConfig, StageConfig
from mvsrefine.geometry import to_pseudo_disparity
from mvsrefine.metrics import nn_downsample
from mvsrefine.pipeline import (PipelineError, gt_at_scale, init_model, nn_upsample, oracle_scorer, pct_within,
                                refine)


@pytest.fixture(scope="module")
def scene():
    return synth.render(synth.SceneSpec(kind="wedge", seed=4, width=96, height=80, focal=180.0))


def _cfg(**kw):
    base = dict(features="handcrafted", n_full=48)
    base.update(kw)
    return RefineConfig(**base)


@pytest.fixture(scope="module")
def params():
    return init_model(_cfg(), np.random.default_rng(0))


def test_nn_upsample():
    a = np.arange(4.0).reshape(2, 2)
    assert np.array_equal(nn_upsample(a, 1), a)
    up = nn_upsample(a, 2)
    assert np.array_equal(up, [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])
    assert np.array_equal(nn_downsample(nn_upsample(a, 4), 4), a)
    b = a.copy()
    b[0, 1] = np.nan
    assert np.isnan(nn_upsample(b, 2)[:2, 2:]).all()
    with pytest.raises(PipelineError):
        nn_upsample(a, Fraction(3, 2))


def test_gt_at_scale_shape_check():
    with pytest.raises(PipelineError):
        gt_at_scale(np.ones((40, 40)), (80, 96), Fraction(1, 4))


def test_result_structure(scene, params):
    res = refine(scene.rig, scene.images, params, _cfg(), scene.depth_range)
    assert res.scale == Fraction(1, 4) and res.depth.shape == (20, 24)
    assert len(res.snapshots) == 3
    assert [s.scale for s in res.snapshots] == [Fraction(1, 8), Fraction(1, 4), Fraction(1, 4)]
    assert res.wta_depth.shape == (10, 12)
    assert np.allclose(res.pd, to_pseudo_disparity(res.depth, res.scale_fb, 1.0), equal_nan=True)
    assert set(res.timing) >= {"features", "wta", "stage0", "stage1", "stage2"}


def test_zero_iterations_returns_wta(scene, params):
    stages = [StageConfig("1/8", "1/4", iterations=0), StageConfig("1/4", "1/2", iterations=0)]
    cfg = _cfg(stages=stages)
    res = refine(scene.rig, scene.images, init_model(cfg, np.random.default_rng(0)), cfg, scene.depth_range)
    assert np.array_equal(res.depth, nn_upsample(res.wta_depth, 2), equal_nan=True)


def test_schedule_in_trace(scene, params):
    res = refine(scene.rig, scene.images, params, _cfg(), scene.depth_range, gt_depth=scene.depths[0])
    kinds = [r["kind"] for r in res.trace if r["stage"] == 0]
    assert kinds == ["I", "S", "I", "S"]
    assert [r["candidates"] for r in res.trace[:4]] == [9, 17, 9, 17]


def test_selection_stays_in_candidate_set(scene):
    seen = []

    def recording(values, d_hat, gt_pd, pyr):
        s = np.random.default_rng(len(seen)).standard_normal(values.shape)
        seen.append((values, s))
        return s
    cfg = _cfg(stages=[StageConfig("1/8", "1/4")])
    res = refine(scene.rig, scene.images, None, cfg, scene.depth_range, scorer=recording)
    values, s = seen[-1]
    picked = np.take_along_axis(values, np.argmax(s, -1)[..., None], -1)[..., 0]
    assert np.array_equal(res.pd, picked)
    assert np.all(np.any(values == res.pd[..., None], axis=-1))


def test_oracle_monotone_and_ceiling(scene):
    res = refine(scene.rig, scene.images, None, _cfg(), scene.depth_range, gt_depth=scene.depths[0],
                 scorer=oracle_scorer)
    for stage in range(3):
        pct = [r["pct_lt1"] for r in res.trace if r["stage"] == stage]
        assert all(b >= a for a, b in zip(pct, pct[1:])), pct
    assert res.trace[3]["pct_lt1"] >= 99.0


def test_oracle_needs_gt(scene):
    with pytest.raises(PipelineError):
        refine(scene.rig, scene.images, None, _cfg(), scene.depth_range, scorer=oracle_scorer)


def test_determinism(scene, params):
    a = refine(scene.rig, scene.images, params, _cfg(seed=3), scene.depth_range)
    b = refine(scene.rig, scene.images, params, _cfg(seed=3), scene.depth_range)
    assert np.array_equal(a.depth, b.depth, equal_nan=True)
    assert all(np.array_equal(x.depth, y.depth, equal_nan=True) for x, y in zip(a.snapshots, b.snapshots))


def test_stage_parameter_isolation(scene, params):
    a = refine(scene.rig, scene.images, params, _cfg(), scene.depth_range)
    mutated = dict(params)
    for k in params:
        if k.startswith("stage1."):
            mutated[k] = params[k].data * 3.0 + 0.1
    b = refine(scene.rig, scene.images, mutated, _cfg(), scene.depth_range)
    assert np.array_equal(a.snapshots[0].depth, b.snapshots[0].depth, equal_nan=True)
    assert not np.array_equal(a.snapshots[1].depth, b.snapshots[1].depth, equal_nan=True)


def test_weight_mismatch_fails_early(scene, params):
    broken = {k: v for k, v in params.items() if k != "stage2.score0.w"}
    with pytest.raises(PipelineError, match="missing"):
        refine(scene.rig, scene.images, broken, _cfg(), scene.depth_range)
    wrong = dict(params)
    wrong["stage0.score3.b"] = np.zeros(2)
    with pytest.raises(PipelineError, match="shape"):
        refine(scene.rig, scene.images, wrong, _cfg(), scene.depth_range)


def test_input_checks(scene, params):
    with pytest.raises(PipelineError):
        refine(scene.rig, scene.images[:-1], params, _cfg(), scene.depth_range)
    with pytest.raises(PipelineError):
        refine(scene.rig, scene.images, params, _cfg(), (2.0, 1.0))


def test_pct_within():
    assert pct_within(np.array([1.0, 2.0, 5.0]), np.array([1.5, 3.5, np.nan])) == 50.0
