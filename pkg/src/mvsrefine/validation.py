"""Input validation shared by the estimator, the pipeline entry points and the CLI."""

from __future__ import annotations

import numpy as np

from .geometry import CameraRig


class ValidationError(ValueError):
    pass


def check_image(image, name: str = "image") -> np.ndarray:
    """A finite 2-D grayscale array, returned as float64."""
    a = np.asarray(image, dtype=np.float64)
    if a.ndim != 2:
        raise ValidationError(f"{name} must be 2-D grayscale, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValidationError(f"{name} contains non-finite values")
    if a.min() < 0 or a.max() > 1:
        raise ValidationError(f"{name} values must lie in [0, 1]")
    return a


def check_depth_range(depth_range) -> tuple:
    try:
        dmin, dmax = (float(v) for v in depth_range)
    except (TypeError, ValueError):
        raise ValidationError(f"depth range must be a pair of numbers, got {depth_range!r}") from None
    if not (np.isfinite(dmin) and np.isfinite(dmax) and 0 < dmin < dmax):
        raise ValidationError(f"depth range must satisfy 0 < dmin < dmax, got ({dmin}, {dmax})")
    return dmin, dmax


def check_views(rig: CameraRig, images) -> list:
    """One image per camera (reference first), each matching its camera size."""
    if not isinstance(rig, CameraRig):
        raise ValidationError("rig must be a CameraRig")
    cams = [rig.reference, *rig.sources]
    if len(images) != len(cams):
        raise ValidationError(f"expected {len(cams)} images (reference first), got {len(images)}")
    out = []
    for i, (im, cam) in enumerate(zip(images, cams)):
        a = check_image(im, f"image {i}")
        if a.shape != (cam.height, cam.width):
            raise ValidationError(f"image {i} has shape {a.shape}, camera expects {(cam.height, cam.width)}")
        out.append(a)
    ref = rig.reference
    if ref.height % 8 or ref.width % 8:
        raise ValidationError(f"reference size {ref.width}x{ref.height} must be divisible by 8")
    return out


def check_scene(scene, need_gt: bool = False):
    for attr in ("rig", "images", "depths", "depth_range"):
        if not hasattr(scene, attr):
            raise ValidationError(f"scene object lacks '{attr}'")
    check_views(scene.rig, scene.images)
    check_depth_range(scene.depth_range)
    if need_gt:
        gt = np.asarray(scene.depths[0], dtype=np.float64)
        if gt.shape != np.shape(scene.images[0]):
            raise ValidationError("ground-truth depth does not match the reference image")
        if not (np.isfinite(gt) & (gt > 0)).any():
            raise ValidationError("ground-truth depth has no valid pixel")
    return scene


def check_scenes(scenes, need_gt: bool = False) -> list:
    scenes = list(scenes)
    if not scenes:
        raise ValidationError("at least one scene is required")
    return [check_scene(s, need_gt) for s in scenes]
