"""Matching and context feature extraction.

Two extractors produce the same :class:`FeaturePyramid` structure:

* :func:`extract_handcrafted` -- a deterministic descriptor built from the
  5x5 neighbourhood of mean-subtracted intensity and Sobel gradients, so the
  pipeline runs without trained weights.
* :func:`extract_learned` -- a small encoder-decoder network evaluated on the
  autodiff tape, trainable end to end.

Every level is unit-normalised per pixel, so negative correlation between two
features lies in ``[-1, 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .geometry import sobel
from .learn import autodiff as ad
from .learn import nn
from .learn.autodiff import Tensor

SCALES = (Fraction(1), Fraction(1, 2), Fraction(1, 4), Fraction(1, 8))
CONTEXT_SCALES = (Fraction(1, 8), Fraction(1, 4))

# desk-scale matching network widths per scale
DESK_WIDTHS = {Fraction(1): 16, Fraction(1, 2): 24, Fraction(1, 4): 32, Fraction(1, 8): 32}
# channel widths of the original architecture table
PAPER_WIDTHS = {Fraction(1): 16, Fraction(1, 2): 32, Fraction(1, 4): 48, Fraction(1, 8): 48}
PAPER_CONTEXT = {Fraction(1, 8): 64, Fraction(1, 4): 48}


class FeatureError(ValueError):
    pass


@dataclass
class FeaturePyramid:
    """Per-scale feature maps stored as ``(C, H, W)`` tensors."""

    levels: dict

    def __getitem__(self, scale) -> Tensor:
        return self.levels[Fraction(scale)]

    def __contains__(self, scale) -> bool:
        return Fraction(scale) in self.levels

    def array(self, scale) -> np.ndarray:
        """Level as a float64 ``(H, W, C)`` array (no gradient)."""
        return np.ascontiguousarray(self[scale].data.transpose(1, 2, 0), dtype=np.float64)

    @property
    def scales(self):
        return sorted(self.levels, reverse=True)


def _check_image(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise FeatureError(f"expected a grayscale image, got shape {image.shape}")
    if image.shape[0] < 8 or image.shape[1] < 8:
        raise FeatureError(f"image must be at least 8x8, got {image.shape}")
    return image


def area_pyramid(image: np.ndarray, n_levels: int) -> list[np.ndarray]:
    levels = [image]
    for _ in range(n_levels - 1):
        im = levels[-1]
        h, w = im.shape[0] // 2 * 2, im.shape[1] // 2 * 2
        im = im[:h, :w]
        levels.append(im.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3)))
    return levels


def _patches(img: np.ndarray, r: int = 2) -> np.ndarray:
    """(H, W, (2r+1)^2) neighbourhoods with replicate padding."""
    p = np.pad(img, r, mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(p, (2 * r + 1, 2 * r + 1))
    return win.reshape(img.shape[0], img.shape[1], -1)


def normalize_rows(f: np.ndarray, tiny: float = 1e-9) -> np.ndarray:
    norm = np.linalg.norm(f, axis=-1, keepdims=True)
    return np.where(norm > tiny, f / np.maximum(norm, tiny), 0.0)


def handcrafted_level(img: np.ndarray) -> np.ndarray:
    """75-channel descriptor ``(H, W, 75)`` for one image level."""
    intensity = _patches(img)
    intensity = intensity - intensity.mean(axis=-1, keepdims=True)
    gx, gy = sobel(img)
    f = np.concatenate([intensity, _patches(gx), _patches(gy)], axis=-1)
    return normalize_rows(f)


def extract_handcrafted(image, scales=SCALES) -> FeaturePyramid:
    """Hand-crafted descriptor pyramid built by 2x area down-sampling."""
    image = _check_image(image)
    scales = [Fraction(s) for s in scales]
    n = max(int(round(np.log2(1 / float(s)))) for s in scales) + 1
    imgs = area_pyramid(image, n)
    levels = {}
    for s in scales:
        f = handcrafted_level(imgs[int(round(np.log2(1 / float(s))))])
        levels[s] = Tensor(f.transpose(2, 0, 1))
    return FeaturePyramid(levels)


def init_unet(rng, widths=None, out_channels=None, in_channels: int = 1, prefix: str = "unet"):
    """Parameters of the encoder-decoder; ``out_channels`` maps scale -> head width."""
    widths = {Fraction(k): v for k, v in (widths or DESK_WIDTHS).items()}
    out_channels = {Fraction(k): v for k, v in (out_channels or widths).items()}
    p: dict = {}
    cin = in_channels
    for i, s in enumerate(SCALES):
        w = widths[s]
        nn.init_block(p, f"{prefix}.enc{i}a", rng, cin, w, 3 if i == 0 else 4)
        nn.init_block(p, f"{prefix}.enc{i}b", rng, w, w, 3)
        cin = w
    finest = min(SCALES.index(s) for s in out_channels)
    for i in range(len(SCALES) - 2, finest - 1, -1):
        s = SCALES[i]
        nn.init_convt(p, f"{prefix}.up{i}", rng, widths[SCALES[i + 1]], widths[s])
        nn.init_block(p, f"{prefix}.dec{i}", rng, 2 * widths[s], widths[s], 3)
    for s, c in out_channels.items():
        i = SCALES.index(s)
        nn.init_conv(p, f"{prefix}.head{i}", rng, widths[s], c, 1, gain=1.0)
    return p


def unet_forward(p: dict, image, out_scales, prefix: str = "unet") -> FeaturePyramid:
    """Run the encoder-decoder; returns unit-normalised heads at ``out_scales``."""
    image = _check_image(image.data if isinstance(image, Tensor) else image)
    h, w = image.shape
    if h % 8 or w % 8:
        raise FeatureError(f"image size {w}x{h} must be divisible by 8")
    out_scales = [Fraction(s) for s in out_scales]
    x = Tensor(image[None].astype(nn.DTYPE))
    enc = []
    for i, _ in enumerate(SCALES):
        stride = 1 if i == 0 else 2
        try:
            x = nn.block(p, f"{prefix}.enc{i}a", x, stride)
            x = nn.block(p, f"{prefix}.enc{i}b", x)
        except KeyError as e:
            raise FeatureError(f"missing parameter {e}") from None
        enc.append(x)
    dec = {len(SCALES) - 1: enc[-1]}
    coarsest_needed = min(SCALES.index(s) for s in out_scales)
    for i in range(len(SCALES) - 2, coarsest_needed - 1, -1):
        up = ad.relu(nn.convt(p, f"{prefix}.up{i}", dec[i + 1]))
        dec[i] = nn.block(p, f"{prefix}.dec{i}", ad.concat([enc[i], up], axis=0))
    levels = {}
    for s in out_scales:
        i = SCALES.index(s)
        levels[s] = ad.l2_normalize(nn.conv(p, f"{prefix}.head{i}", dec[i]), axis=0)
    return FeaturePyramid(levels)


def extract_learned(image, params: dict, scales=SCALES, prefix: str = "match") -> FeaturePyramid:
    return unet_forward(params, image, scales, prefix)


def init_context_net(rng, channels=None, widths=None, prefix: str = "context"):
    channels = channels or PAPER_CONTEXT
    return init_unet(rng, widths, channels, prefix=prefix)


def extract_context(image, params: dict, prefix: str = "context") -> FeaturePyramid:
    """Appearance features of the reference image at 1/8 and 1/4."""
    return unet_forward(params, image, CONTEXT_SCALES, prefix)
