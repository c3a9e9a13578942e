import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvsrefine import synth
from mvsrefine.config import RefineConfig, StageConfig
from mvsrefine.cost import CostVolume
from mvsrefine.learn import autodiff as ad
from mvsrefine.learn import nn
from mvsrefine.learn.autodiff import Tensor
from mvsrefine.learn.gradcheck import COMPOSED, DEFAULT_TOL, PRIMITIVES, run_suite
from mvsrefine.learn.losses import FM_BETA, FM_BETA_FINEST, hard_negative, loss_cl, loss_expectation, loss_fm
from mvsrefine.learn.optim import AdamState, adam_step, zero_grad
from mvsrefine.learn.train import TrainConfig, matching_loss, sample_crop, sample_views, train_loop
from mvsrefine.pipeline import init_model, refine


# -- autodiff ------------------------------------------------------------------------------

@pytest.mark.parametrize("case", PRIMITIVES + COMPOSED, ids=lambda c: c.name)
def test_finite_differences(case):
    [(name, err, ok)] = run_suite([case])
    assert ok, f"{name}: relative error {err:.2e} >= {DEFAULT_TOL}"


def test_relu_backward_negative():
    x = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
    ad.sum(ad.relu(x)).backward()
    assert list(x.grad) == [0.0, 1.0]


def test_conv_delta_kernel(rng):
    x = rng.standard_normal((2, 5, 6))
    w = np.zeros((2, 2, 3, 3))
    w[0, 0, 1, 1] = w[1, 1, 1, 1] = 1.0
    out = ad.conv2d(Tensor(x), Tensor(w), None, 1, 1)
    assert np.array_equal(out.data, x)


def test_backward_visits_each_node_once():
    x = Tensor(np.array(3.0), requires_grad=True)
    y = ad.mul(x, x)            # shared sub-expression used twice below
    z = ad.add(y, y)
    z.backward()
    assert float(x.grad) == pytest.approx(12.0)


def test_grad_shape_matches_data(rng):
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((1, 4)), requires_grad=True)
    ad.sum(ad.mul(a, b)).backward()
    assert a.grad.shape == a.data.shape and b.grad.shape == b.data.shape


def test_shape_mismatch_raises(rng):
    with pytest.raises(ValueError):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


# -- ranking loss --------------------------------------------------------------------------

def test_loss_cl_all_positive(rng):
    s = rng.standard_normal((2, 3, 4))
    vals = np.full((2, 3, 4), 5.0) + rng.uniform(-1, 1, (2, 3, 4))
    assert float(loss_cl(s, vals, np.full((2, 3), 5.0)).data) == pytest.approx(0.0, abs=1e-9)


@pytest.mark.parametrize("k", [2, 5, 17])
def test_loss_cl_one_positive(k):
    vals = np.arange(k, dtype=np.float64) * 3.0
    loss = float(loss_cl(np.zeros((1, 1, k)), vals.reshape(1, 1, k), np.array([[0.0]])).data)
    assert abs(loss - math.log(k)) < 1e-6


@given(st.floats(-50, 50))
@settings(max_examples=30)
def test_loss_cl_shift_invariance(c):
    r = np.random.default_rng(1)
    s = r.standard_normal((3, 4, 6))
    vals = r.uniform(0, 6, (3, 4, 6))
    gt = r.uniform(1, 5, (3, 4))
    a = float(loss_cl(s, vals, gt).data)
    b = float(loss_cl(s + c + r.standard_normal((3, 4, 1)), vals, gt).data)
    assert abs(a - b) < 1e-6


def test_loss_cl_gradient_signs():
    s = Tensor(np.zeros((1, 1, 3)), requires_grad=True)
    loss_cl(s, np.array([[[0.0, 5.0, 9.0]]]), np.array([[0.2]])).backward()
    g = s.grad[0, 0]
    assert g[0] < 0 and g[1] > 0 and g[2] > 0     # descent raises the positive, lowers the others


def test_loss_cl_masking(rng):
    vals = np.array([[[0.0, 1.0], [10.0, 11.0]]])
    gt = np.array([[0.5, np.nan]])
    s = np.array([[[0.3, -0.2], [1.0, 2.0]]])
    single = float(loss_cl(s[:, :1], vals[:, :1], gt[:, :1]).data)
    assert float(loss_cl(s, vals, gt).data) == pytest.approx(single)


def test_loss_cl_nothing_supervisable():
    with pytest.warns(RuntimeWarning):
        out = loss_cl(np.zeros((1, 1, 2)), np.array([[[0.0, 1.0]]]), np.array([[9.0]]))
    assert float(out.data) == 0.0


def test_loss_expectation_values():
    est = Tensor(np.array([[1.0, 4.0]]))
    assert float(loss_expectation(est, np.array([[1.5, 1.0]])).data) == pytest.approx((0.125 + 2.5) / 2)


# -- matching loss -------------------------------------------------------------------------

def _vol(values, hyps):
    values, hyps = np.asarray(values, float)[None, None], np.asarray(hyps, float)[None, None]
    n = values.shape[-1]
    return CostVolume(values, hyps[..., 0], 1.0, hyps - hyps[..., :1] - np.arange(n))


def test_loss_fm_direct_substitution():
    vol = _vol([-1.0, 0.0, 1.0, 0.5], [0, 1, 2, 3])
    # gt at slice 0 (c = -1); lowest-cost slice farther than 1 away is slice 3 (c = 0.5)... clipped at beta
    vol.values[0, 0] = [-1.0, -0.9, 1.0, 1.0]
    assert loss_fm(vol, np.array([[0.0]]), 0.0, 1.0) == pytest.approx(-2.0)


def test_loss_fm_lower_clip():
    vol = _vol([-0.8, 0.3, -0.5, 0.2], [0, 1, 2, 3])
    assert loss_fm(vol, np.array([[0.0]]), 0.0, 1.0) == pytest.approx(-0.8)


def test_loss_fm_defaults_and_precondition():
    assert FM_BETA == 1.0 and FM_BETA_FINEST == 0.8
    with pytest.raises(ValueError):
        loss_fm(_vol([0, 0], [0, 1]), np.array([[0.0]]), 1.0, 1.0)


def test_hard_negative_excludes_radius():
    vol = _vol([-1.0, -0.99, -0.98, 0.1], [0, 1, 2, 3])
    d, c, ok = hard_negative(vol, np.array([[0.5]]))
    assert ok[0, 0] and d[0, 0] == 2.0 and c[0, 0] == -0.98
    _, _, ok = hard_negative(_vol([0, 0], [0, 1]), np.array([[0.5]]))
    assert not ok[0, 0]


# -- optimiser -----------------------------------------------------------------------------

def test_adam_zero_gradient():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    p["w"].grad = np.zeros(2)
    adam_step(p, AdamState())
    assert np.array_equal(p["w"].data, [1.0, -2.0])


def test_adam_first_step_sign():
    p = {"w": Tensor(np.array([1.0, 1.0, 1.0]))}
    p["w"].grad = np.array([3.0, -0.01, 250.0])
    adam_step(p, AdamState(lr=1e-3))
    assert np.allclose(p["w"].data, 1.0 - 1e-3 * np.sign([3.0, -0.01, 250.0]), atol=1e-8)


def test_adam_skips_non_finite():
    p = {"a": Tensor(np.array([1.0])), "b": Tensor(np.array([1.0]))}
    p["a"].grad, p["b"].grad = np.array([np.nan]), np.array([1.0])
    st_ = AdamState()
    adam_step(p, st_)
    assert p["a"].data[0] == 1.0 and p["b"].data[0] < 1.0 and st_.skipped == 1
    zero_grad(p)
    assert p["a"].grad is None


def test_adam_defaults():
    s = AdamState()
    assert (s.lr, s.beta1, s.beta2, s.eps) == (1e-3, 0.9, 0.999, 1e-8)


# -- training ------------------------------------------------------------------------------

def _tiny_config():
    return RefineConfig(stages=(StageConfig("1/8", "1/4", iterations=2), StageConfig("1/4", "1/2", iterations=2)),
                        n_full=32)


@pytest.fixture(scope="module")
def tiny_scene():
    return synth.render(synth.SceneSpec(kind="plane", seed=11, width=96, height=80, focal=180.0))


def test_sample_views_rule(tiny_scene):
    r = np.random.default_rng(0)
    for _ in range(10):
        v = sample_views(r, tiny_scene.rig, 2)
        assert v[0] == tiny_scene.rig.closest_source and len(set(v)) == 3


def test_sample_crop_grid(tiny_scene):
    rig, images, gt = sample_crop(np.random.default_rng(0), tiny_scene, (32, 48), [0, 2])
    assert images[0].shape == (32, 48) and gt.shape == (32, 48) and images[1].shape == (80, 96)
    assert len(rig.sources) == 2


def test_fm_gradient_isolated_from_ranker(tiny_scene):
    cfg = _tiny_config()
    params = nn.trainable(init_model(cfg, np.random.default_rng(0)))
    res = refine(tiny_scene.rig, tiny_scene.images, params, cfg, tiny_scene.depth_range,
                 gt_depth=tiny_scene.depths[0], collect=True)
    loss = matching_loss(np.random.default_rng(1), tiny_scene.rig, res.pyramids, tiny_scene.depths[0],
                         tiny_scene.depth_range, cfg, 256)
    loss.backward()
    for name, p in params.items():
        if not name.startswith("match."):
            assert p.grad is None or not np.any(p.grad), name
    assert any(p.grad is not None and np.any(p.grad) for n, p in params.items() if n.startswith("match."))


def test_train_smoke_and_determinism(tiny_scene, tmp_path):
    cfg = _tiny_config()
    tcfg = TrainConfig(steps=3, crop=(64, 64), fm_pixels=128, checkpoint_every=2)
    a = train_loop([tiny_scene], cfg, tcfg, out_dir=tmp_path / "a")
    b = train_loop([tiny_scene], cfg, tcfg, out_dir=tmp_path / "b")
    assert all(np.isfinite(fm) and np.isfinite(cl) for _, fm, cl in a.log)
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k]), k
    assert (tmp_path / "a" / "loss.csv").read_text() == (tmp_path / "b" / "loss.csv").read_text()
    assert (tmp_path / "a" / "checkpoint_2.chsn").exists() and (tmp_path / "a" / "weights.chsn").exists()


def test_train_zero_lr_identity(tiny_scene):
    cfg = _tiny_config()
    init = {k: v.data.copy() for k, v in init_model(cfg, np.random.default_rng(0)).items()}
    res = train_loop([tiny_scene], cfg, TrainConfig(steps=2, lr=0.0, crop=(64, 64), fm_pixels=64), init)
    for k in init:
        assert np.array_equal(res.params[k], init[k]), k


def test_train_parts_freeze(tiny_scene):
    cfg = _tiny_config()
    init = {k: v.data.copy() for k, v in init_model(cfg, np.random.default_rng(0)).items()}
    res = train_loop([tiny_scene], cfg, TrainConfig(steps=2, crop=(64, 64), parts=("stages",)), init)
    assert all(np.array_equal(res.params[k], init[k]) for k in init if k.startswith(("match.", "context.")))
    assert any(not np.array_equal(res.params[k], init[k]) for k in init if k.startswith("stage"))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(crop=(50, 64))
    with pytest.raises(ValueError):
        TrainConfig(parts=("ranker",))
    with pytest.raises(ValueError):
        train_loop([], _tiny_config(), TrainConfig(steps=1))
