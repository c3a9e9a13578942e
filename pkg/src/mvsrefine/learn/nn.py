"""Parameter initialisers and layer functions built on :mod:`autodiff`.

Parameters live in flat ``dict[str, Tensor]`` stores keyed by dotted names,
which is also the layout of the weight container on disk.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DTYPE = np.float32


def param(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=DTYPE), requires_grad=True)


def init_conv(store: dict, name: str, rng, cin: int, cout: int, k: int, gain: float = 2.0):
    fan_in = cin * k * k
    store[f"{name}.w"] = param(rng.standard_normal((cout, cin, k, k)) * np.sqrt(gain / fan_in))
    store[f"{name}.b"] = param(np.zeros(cout))


def init_convt(store: dict, name: str, rng, cin: int, cout: int, k: int = 4):
    fan_in = cin * k * k / 4  # each output pixel sees a quarter of the kernel at stride 2
    store[f"{name}.w"] = param(rng.standard_normal((cin, cout, k, k)) * np.sqrt(2.0 / fan_in))
    store[f"{name}.b"] = param(np.zeros(cout))


def init_affine(store: dict, name: str, channels: int):
    store[f"{name}.scale"] = param(np.ones(channels))
    store[f"{name}.bias"] = param(np.zeros(channels))


def init_linear(store: dict, name: str, rng, cin: int, cout: int, gain: float = 2.0):
    store[f"{name}.w"] = param(rng.standard_normal((cin, cout)) * np.sqrt(gain / cin))
    store[f"{name}.b"] = param(np.zeros(cout))


def conv(p: dict, name: str, x, stride: int = 1) -> Tensor:
    w = p[f"{name}.w"]
    k = w.shape[-1]
    pad = (k - 1) // 2 if stride == 1 else (k - stride) // 2
    return ad.conv2d(x, w, p[f"{name}.b"], stride=stride, padding=pad)


def convt(p: dict, name: str, x) -> Tensor:
    return ad.conv_transpose2d(x, p[f"{name}.w"], p[f"{name}.b"], stride=2, padding=1)


def affine(p: dict, name: str, x) -> Tensor:
    """Per-channel learnable scale and bias on a (C, H, W) map."""
    s = ad.reshape(p[f"{name}.scale"], (-1, 1, 1))
    b = ad.reshape(p[f"{name}.bias"], (-1, 1, 1))
    return ad.add(ad.mul(x, s), b)


def block(p: dict, name: str, x, stride: int = 1) -> Tensor:
    """conv -> relu -> per-channel affine."""
    return affine(p, f"{name}.norm", ad.relu(conv(p, name, x, stride)))


def init_block(store, name, rng, cin, cout, k):
    init_conv(store, name, rng, cin, cout, k)
    init_affine(store, f"{name}.norm", cout)


def linear(p: dict, name: str, x) -> Tensor:
    return ad.add(ad.matmul(x, p[f"{name}.w"]), p[f"{name}.b"])


def init_gru(store: dict, name: str, rng, hidden: int, inp: int, k: int = 3):
    for gate in ("z", "r", "q"):
        init_conv(store, f"{name}.{gate}", rng, hidden + inp, hidden, k, gain=1.0)


def conv_gru(p: dict, name: str, h, x) -> Tensor:
    """Convolutional GRU cell: sigmoid update/reset gates, tanh candidate."""
    hx = ad.concat([h, x], axis=0)
    z = ad.sigmoid(conv(p, f"{name}.z", hx))
    r = ad.sigmoid(conv(p, f"{name}.r", hx))
    q = ad.tanh(conv(p, f"{name}.q", ad.concat([ad.mul(r, h), x], axis=0)))
    return ad.add(h, ad.mul(z, ad.sub(q, h)))


def subset(store: dict, prefix: str) -> dict:
    return {k: v for k, v in store.items() if k.startswith(prefix)}


def n_params(store: dict) -> int:
    return int(sum(v.data.size for v in store.values()))


def frozen(store: dict) -> dict:
    """Same arrays without gradient tracking (inference)."""
    return {k: Tensor(v.data if isinstance(v, Tensor) else np.asarray(v, dtype=DTYPE)) for k, v in store.items()}


def trainable(store: dict) -> dict:
    return {k: param(v.data if isinstance(v, Tensor) else v) for k, v in store.items()}
