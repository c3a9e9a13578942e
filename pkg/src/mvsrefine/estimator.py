"""scikit-learn style facade: ``fit`` trains, ``predict`` refines, ``score`` evaluates.

Samples are scene objects with ``rig``, ``images``, ``depths`` (reference
ground truth first, may be absent for prediction) and ``depth_range``, such
as :class:`mvsrefine.synth.Scene`.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import io
from .config import RefineConfig
from .geometry import to_pseudo_disparity
from .learn.train import ALL_PARTS, TrainConfig, train_loop
from .metrics import pct_below_pd
from .pipeline import gt_at_scale, nn_upsample, refine
from .validation import check_scenes


class DepthRefiner(BaseEstimator):
    """Learned multi-view depth refinement.

    Parameters mirror :class:`~mvsrefine.config.RefineConfig` and
    :class:`~mvsrefine.learn.train.TrainConfig`; ``weights`` optionally
    names a weight file used as the starting point (and, with ``steps=0``,
    as the final model).
    """

    def __init__(self, mode="selection", use_geometry=True, features="learned", n_full=128,
                 steps=2000, lr=1e-3, crop=(96, 128), parts=ALL_PARTS, seed=0, weights=None,
                 recenter_on_local_wta=True, fm_alpha=TrainConfig.fm_alpha):
        self.mode = mode
        self.use_geometry = use_geometry
        self.features = features
        self.n_full = n_full
        self.steps = steps
        self.lr = lr
        self.crop = crop
        self.parts = parts
        self.seed = seed
        self.weights = weights
        self.recenter_on_local_wta = recenter_on_local_wta
        self.fm_alpha = fm_alpha

    def make_config(self) -> RefineConfig:
        return RefineConfig(mode=self.mode, use_geometry=self.use_geometry, features=self.features,
                            n_full=self.n_full, seed=self.seed,
                            recenter_on_local_wta=self.recenter_on_local_wta)

    def _initial_params(self):
        if self.weights is None:
            return None
        if isinstance(self.weights, dict):
            return self.weights
        return io.load_weights(self.weights)

    def fit(self, X, y=None, progress=None):
        scenes = check_scenes(X, need_gt=True)
        cfg = self.make_config()
        tcfg = TrainConfig(steps=self.steps, lr=self.lr, crop=tuple(self.crop), parts=tuple(self.parts),
                           seed=self.seed, fm_alpha=self.fm_alpha)
        res = train_loop(scenes, cfg, tcfg, self._initial_params(), progress=progress)
        self.config_ = cfg
        self.params_ = res.params
        self.loss_log_ = res.log
        return self

    def refine_scene(self, scene):
        check_is_fitted(self, "params_")
        return refine(scene.rig, scene.images, self.params_, self.config_, scene.depth_range)

    def predict(self, X) -> list:
        """Refined metric depth maps at the final stage's resolution."""
        return [self.refine_scene(s).depth for s in check_scenes(X)]

    def score(self, X, y=None) -> float:
        """Mean percentage of pixels within 1 pseudo-disparity pixel (input-resolution units)."""
        vals = []
        for s in check_scenes(X, need_gt=True):
            res = self.refine_scene(s)
            vals.append(pct_within_native(res.depth, s, res.scale))
        return float(np.mean(vals))


def native_fb(scene) -> float:
    """``f * b`` at the input resolution."""
    return scene.rig.reference.intrinsics.fx * scene.rig.baseline_b


def pct_within_native(depth, scene, scale, thresh: float = 1.0) -> float:
    """%(<thresh pd-px) of ``depth`` at ``scale``, in input-resolution pseudo-disparity units."""
    fb = native_fb(scene)
    gt = gt_at_scale(scene.depths[0], np.shape(scene.images[0]), scale)
    return pct_below_pd(to_pseudo_disparity(depth, fb, 1.0), to_pseudo_disparity(gt, fb, 1.0), thresh)


def wta_pct_within_native(result, scene, config: RefineConfig, thresh: float = 1.0) -> float:
    """The same measure for the WTA initialisation, NN-upsampled to the final scale."""
    up = nn_upsample(result.wta_depth, result.scale / config.coarsest)
    return pct_within_native(up, scene, result.scale, thresh)
