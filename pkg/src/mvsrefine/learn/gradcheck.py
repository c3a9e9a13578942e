"""Central finite-difference checks for the differentiation engine."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_STEP = 1e-3
DEFAULT_TOL = 1e-4


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(num / den)


def numeric_gradient(fn: Callable[[], Tensor], x: Tensor, step: float = DEFAULT_STEP):
    grad = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(fn().data)
        flat[i] = orig - step
        fm = float(fn().data)
        flat[i] = orig
        grad.reshape(-1)[i] = (fp - fm) / (2 * step)
    return grad


def check_gradients(fn: Callable[[], Tensor], inputs: list[Tensor],
                    step: float = DEFAULT_STEP) -> float:
    """Max relative error between tape and finite-difference gradients.

    ``fn`` must rebuild the scalar output from ``inputs`` on every call.
    Inputs are evaluated in float64.
    """
    for x in inputs:
        x.data = x.data.astype(np.float64)
        x.requires_grad = True
        x.grad = None
    fn().backward()
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]
    worst = 0.0
    for x, g in zip(inputs, analytic):
        worst = max(worst, relative_error(g, numeric_gradient(fn, x, step)))
    return worst


def _away_from_zero(rng, shape, lo=0.1, hi=1.5):
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)


@dataclass
class GradCase:
    name: str
    build: Callable  # rng -> (fn, inputs)


def _unary(name, op, sampler=None):
    def build(rng):
        x = Tensor(sampler(rng) if sampler else rng.standard_normal((3, 4)))
        w = rng.standard_normal(x.shape)
        return (lambda: ad.sum(ad.mul(op(x), w))), [x]
    return GradCase(name, build)


def _binary(name, op, shape_a=(3, 4), shape_b=(3, 4), positive_b=False):
    def build(rng):
        a = Tensor(rng.standard_normal(shape_a))
        bd = rng.standard_normal(shape_b)
        b = Tensor(np.abs(bd) + 0.5 if positive_b else bd)
        w = rng.standard_normal(np.broadcast_shapes(shape_a, shape_b))
        return (lambda: ad.sum(ad.mul(op(a, b), w))), [a, b]
    return GradCase(name, build)


def _conv_case(rng):
    x = Tensor(rng.standard_normal((2, 5, 4)))
    w = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.3)
    b = Tensor(rng.standard_normal(3))
    p = rng.standard_normal((3, 5, 4))
    return (lambda: ad.sum(ad.mul(ad.conv2d(x, w, b, 1, 1), p))), [x, w, b]


def _conv_s2_case(rng):
    x = Tensor(rng.standard_normal((2, 6, 4)))
    w = Tensor(rng.standard_normal((2, 2, 4, 4)) * 0.3)
    b = Tensor(rng.standard_normal(2))
    p = rng.standard_normal((2, 3, 2))
    return (lambda: ad.sum(ad.mul(ad.conv2d(x, w, b, 2, 1), p))), [x, w, b]


def _conv1x1_case(rng):
    x = Tensor(rng.standard_normal((3, 2, 3)))
    w = Tensor(rng.standard_normal((2, 3, 1, 1)))
    p = rng.standard_normal((2, 2, 3))
    return (lambda: ad.sum(ad.mul(ad.conv2d(x, w), p))), [x, w]


def _convt_case(rng):
    x = Tensor(rng.standard_normal((2, 2, 3)))
    w = Tensor(rng.standard_normal((2, 2, 4, 4)) * 0.3)
    b = Tensor(rng.standard_normal(2))
    p = rng.standard_normal((2, 4, 6))
    return (lambda: ad.sum(ad.mul(ad.conv_transpose2d(x, w, b), p))), [x, w, b]


def _matvec_case(rng):
    a = Tensor(rng.standard_normal((4, 3)))
    b = Tensor(rng.standard_normal((3, 2)))
    p = rng.standard_normal((4, 2))
    return (lambda: ad.sum(ad.mul(ad.matmul(a, b), p))), [a, b]


def _area_case(rng):
    x = Tensor(rng.standard_normal((2, 4, 2)))
    p = rng.standard_normal((2, 2, 1))
    return (lambda: ad.sum(ad.mul(ad.area_downsample(x, 2), p))), [x]


def _resize_case(rng):
    x = Tensor(rng.standard_normal((2, 2, 3)))
    p = rng.standard_normal((2, 4, 6))
    return (lambda: ad.sum(ad.mul(ad.bilinear_resize(x, 4, 6), p))), [x]


def _concat_case(rng):
    a = Tensor(rng.standard_normal((2, 3)))
    b = Tensor(rng.standard_normal((1, 3)))
    p = rng.standard_normal((3, 3))
    return (lambda: ad.sum(ad.mul(ad.concat([a, b], axis=0), p))), [a, b]


def _lse_case(rng):
    x = Tensor(rng.standard_normal((3, 5)))
    p = rng.standard_normal(3)
    return (lambda: ad.sum(ad.mul(ad.logsumexp(x, axis=1), p))), [x]


def _grid_case(rng):
    f = Tensor(rng.standard_normal((2, 3, 4)))
    xs = rng.uniform(0.1, 2.9, (2, 3))
    ys = rng.uniform(0.1, 1.9, (2, 3))
    p = rng.standard_normal((2, 3, 2))
    return (lambda: ad.sum(ad.mul(ad.grid_sample(f, xs, ys), p))), [f]


def _normalize_case(rng):
    x = Tensor(rng.standard_normal((3, 2, 2)))
    p = rng.standard_normal((3, 2, 2))
    return (lambda: ad.sum(ad.mul(ad.l2_normalize(x, axis=0), p))), [x]


def _take_case(rng):
    x = Tensor(rng.standard_normal((4, 3)))
    idx = (np.array([0, 2, 2, 3]), np.array([1, 0, 0, 2]))
    p = rng.standard_normal(4)
    return (lambda: ad.sum(ad.mul(ad.take(x, idx), p))), [x]


def _sum_case(rng):
    x = Tensor(rng.standard_normal((3, 4)))
    p = rng.standard_normal(4)
    return (lambda: ad.sum(ad.mul(ad.mean(x, axis=0), p))), [x]


# -- composed paths ---------------------------------------------------------------------------

def _small_ranker(rng, fh=4, c=3, hidden=5):
    from . import nn
    p = {}
    nn.init_linear(p, "r.score0", rng, fh + c, hidden)
    nn.init_linear(p, "r.score1", rng, hidden, hidden)
    nn.init_linear(p, "r.score2", rng, hidden, hidden)
    nn.init_linear(p, "r.score3", rng, hidden, 1, gain=1.0)
    for k in p:
        p[k] = Tensor(p[k].data + 0.05 * rng.standard_normal(p[k].shape))
    return p


def _score_case(rng):
    from ..ranker import score
    p = _small_ranker(rng)
    feat = Tensor(rng.standard_normal((2, 3, 7)))
    w = rng.standard_normal((2, 3))
    return (lambda: ad.sum(ad.mul(score(feat, p, "r"), w))), [feat, *p.values()]


def _score_candidates_case(rng):
    from ..ranker import ContextState, score_candidates
    p = _small_ranker(rng)
    hyp = rng.standard_normal((2, 2, 3, 4))
    ctx = ContextState(Tensor(rng.standard_normal((3, 2, 2))), None, None)
    w = rng.standard_normal((2, 2, 3))
    return (lambda: ad.sum(ad.mul(score_candidates(hyp, ctx, p, "r"), w))), [ctx.feature, *p.values()]


def _gru_case(rng):
    from . import nn
    p = {}
    nn.init_gru(p, "g", rng, 2, 3)
    h = Tensor(rng.standard_normal((2, 3, 4)) * 0.5)
    x = Tensor(rng.standard_normal((3, 3, 4)))
    w = rng.standard_normal((2, 3, 4))
    return (lambda: ad.sum(ad.mul(nn.conv_gru(p, "g", h, x), w))), [h, x, *p.values()]


def _loss_cl_case(rng):
    from .losses import loss_cl
    scores = Tensor(rng.standard_normal((2, 3, 5)))
    values = np.broadcast_to(np.arange(5.0), (2, 3, 5))
    gt = rng.uniform(0.0, 4.0, (2, 3))
    return (lambda: loss_cl(scores, values, gt)), [scores]


def _loss_expectation_case(rng):
    from ..ranker import expectation_refine
    from .losses import loss_expectation
    scores = Tensor(rng.standard_normal((3, 4, 5)))
    values = rng.uniform(0.0, 10.0, (3, 4, 5))
    gt = rng.uniform(2.0, 8.0, (3, 4))
    return (lambda: loss_expectation(expectation_refine(values, scores), gt)), [scores]


def _loss_fm_case(rng):
    from ..geometry import Camera, Extrinsics, Intrinsics
    from .losses import fm_term, tape_costs
    intr = Intrinsics(8.0, 8.0, 4.0, 4.0)
    ref = Camera(intr, Extrinsics(np.eye(3), np.zeros(3)), 8, 8)
    src = Camera(intr, Extrinsics(np.eye(3), np.array([-0.1, 0.0, 0.0])), 8, 8)
    f_ref = Tensor(rng.standard_normal((3, 8, 8)))
    f_src = Tensor(rng.standard_normal((3, 8, 8)))
    xs, ys = np.array([2, 3, 4]), np.array([1, 2, 3])
    fb = 8.0 * 0.1
    d_gt, d_neg = np.array([0.4, 0.6, 0.5]), np.array([1.5, 1.7, 1.9])

    def fn():
        fr = ad.l2_normalize(f_ref, axis=0)
        fs = ad.l2_normalize(f_src, axis=0)
        c_gt, _ = tape_costs(fr, [fs], ref, [src], fb, xs, ys, d_gt)
        c_neg, _ = tape_costs(fr, [fs], ref, [src], fb, xs, ys, d_neg)
        return fm_term(c_gt, c_neg, -1.0, 1.0)
    return fn, [f_ref, f_src]


COMPOSED: list[GradCase] = [
    GradCase("ranker_score_mlp", _score_case),
    GradCase("ranker_score_candidates", _score_candidates_case),
    GradCase("conv_gru", _gru_case),
    GradCase("loss_cl", _loss_cl_case),
    GradCase("loss_expectation", _loss_expectation_case),
    GradCase("loss_fm_costs", _loss_fm_case),
]


PRIMITIVES: list[GradCase] = [
    GradCase("conv2d_3x3", _conv_case),
    GradCase("conv2d_4x4_stride2", _conv_s2_case),
    GradCase("conv2d_1x1", _conv1x1_case),
    GradCase("conv_transpose2d", _convt_case),
    GradCase("matmul", _matvec_case),
    _unary("relu", ad.relu, lambda r: _away_from_zero(r, (3, 4))),
    _unary("tanh", ad.tanh),
    _unary("sigmoid", ad.sigmoid),
    _unary("exp", ad.exp),
    _unary("log", ad.log, lambda r: r.uniform(0.5, 2.0, (3, 4))),
    _unary("sqrt", ad.sqrt, lambda r: r.uniform(0.5, 2.0, (3, 4))),
    _unary("clip", lambda x: ad.clip(x, -0.5, 0.5),
           lambda r: np.concatenate([r.uniform(-0.4, 0.4, 6), _away_from_zero(r, 6, 0.6, 1.5)])),
    _unary("smooth_l1", ad.smooth_l1,
           lambda r: np.concatenate([r.uniform(-0.9, 0.9, 6), _away_from_zero(r, 6, 1.1, 2.0)])),
    _binary("add_broadcast", ad.add, (3, 4), (1, 4)),
    _binary("mul_broadcast", ad.mul, (3, 4), (3, 1)),
    _binary("sub", ad.sub),
    _binary("div", ad.div, positive_b=True),
    GradCase("area_downsample", _area_case),
    GradCase("bilinear_resize", _resize_case),
    GradCase("concat", _concat_case),
    GradCase("logsumexp", _lse_case),
    GradCase("grid_sample", _grid_case),
    GradCase("l2_normalize", _normalize_case),
    GradCase("take", _take_case),
    GradCase("mean", _sum_case),
]


def run_suite(cases=None, seed: int = 0, step: float = DEFAULT_STEP, tol: float = DEFAULT_TOL):
    """Run every case; returns a list of ``(name, rel_error, passed)``."""
    rows = []
    for case in cases if cases is not None else PRIMITIVES + COMPOSED:
        rng = np.random.default_rng(seed)
        fn, inputs = case.build(rng)
        err = check_gradients(fn, inputs, step)
        rows.append((case.name, err, err < tol))
    return rows
