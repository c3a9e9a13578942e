"""A small reverse-mode differentiation engine over numpy arrays.

Every operation returns a :class:`Tensor`.  When at least one input requires a
gradient, the result keeps a reference to its inputs and a closure that
propagates the output gradient back to them.  :meth:`Tensor.backward` sorts the
recorded graph topologically and runs the closures in reverse order, visiting
every node exactly once.

Image-like tensors use a ``(C, H, W)`` layout with an implicit batch of one.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor", "as_tensor", "add", "sub", "mul", "div", "neg", "matmul",
    "relu", "tanh", "sigmoid", "exp", "log", "sqrt", "clip", "smooth_l1",
    "sum", "mean", "reshape", "transpose", "concat", "take", "logsumexp",
    "conv2d", "conv_transpose2d", "area_downsample", "bilinear_resize",
    "grid_sample", "l2_normalize", "broadcast_to",
]


class Tensor:
    """An array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        data = np.asarray(data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.op = ""

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        _accumulate(self, np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    node.grad = None  # intermediate gradients are not kept

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if g.shape != t.data.shape:
        g = np.broadcast_to(g, t.data.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def _node(data, parents, backward, op) -> Tensor:
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, req)
    if req:
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * out / b.data, b.shape))

    return _node(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: _accumulate(a, -g), "neg")


def relu(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.maximum(a.data, 0), (a,), lambda g: _accumulate(a, g * (a.data > 0)), "relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: _accumulate(a, g * (1 - out * out)), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # numerically stable in both tails
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return _node(out, (a,), lambda g: _accumulate(a, g * out * (1 - out)), "sigmoid")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: _accumulate(a, g * out), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: _accumulate(a, g / a.data), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: _accumulate(a, g * 0.5 / out), "sqrt")


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: _accumulate(a, g * inside), "clip")


def smooth_l1(a, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style smooth L1 with transition at ``beta``."""
    a = as_tensor(a)
    x = a.data
    small = np.abs(x) < beta
    out = np.where(small, 0.5 * x * x / beta, np.abs(x) - 0.5 * beta)
    dx = np.where(small, x / beta, np.sign(x))
    return _node(out, (a,), lambda g: _accumulate(a, g * dx), "smooth_l1")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(np.broadcast_to(a.data, shape), (a,),
                 lambda g: _accumulate(a, _unbroadcast(g, a.shape)), "broadcast_to")


# -- reductions and shape ------------------------------------------------------

def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _node(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return div(sum(a, axis, keepdims), float(n))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: _accumulate(a, g.reshape(a.shape)),
                 "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _node(a.data.transpose(axes), (a,), lambda g: _accumulate(a, g.transpose(inv)),
                 "transpose")


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, part)

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward,
                 "concat")


def take(a, index) -> Tensor:
    """Numpy-style indexing; the backward pass scatters with ``np.add.at``."""
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        _accumulate(a, full)

    return _node(a.data[index], (a,), backward, "take")


def logsumexp(a, axis=-1, keepdims=False) -> Tensor:
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0)
    s = np.exp(a.data - m).sum(axis=axis, keepdims=True)
    out_k = np.log(s) + m
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, g * np.exp(a.data - out_k))

    return _node(out, (a,), backward, "logsumexp")


def _blas(a: np.ndarray) -> np.ndarray:
    """Strided views make numpy skip BLAS; copy them to contiguous memory."""
    return a if a.flags.c_contiguous or a.flags.f_contiguous else np.ascontiguousarray(a)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad_, bd = _blas(a.data), _blas(b.data)

    def backward(g):
        g = _blas(g)
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(bd, -1, -2))
        if b.requires_grad:
            _accumulate(b, np.swapaxes(ad_, -1, -2) @ g)

    return _node(ad_ @ bd, (a, b), backward, "matmul")


def l2_normalize(a, axis=0, eps: float = 1e-8) -> Tensor:
    """``a / sqrt(|a|^2 + eps^2)`` along ``axis``; zero vectors stay zero."""
    a = as_tensor(a)
    norm = sqrt(add(sum(mul(a, a), axis=axis, keepdims=True), eps * eps))
    return div(a, norm)


# -- convolutions --------------------------------------------------------------

def _im2col(xp, kh, kw, stride, ho, wo):
    """Columns of shape (C, kh, kw, ho, wo) from a padded (C, H, W) array."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride][:, :ho, :wo]
    return win.transpose(0, 3, 4, 1, 2)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` (Cin, H, W) with ``w`` (Cout, Cin, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: input {cin}, kernel {cin_w}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    cols = _im2col(xp, kh, kw, stride, ho, wo).reshape(cin * kh * kw, ho * wo)
    wm = w.data.reshape(cout, -1)
    out = (wm @ cols).reshape(cout, ho, wo)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[:, None, None]
        parents.append(b)

    def backward(g):
        gm = g.reshape(cout, -1)
        if w.requires_grad:
            _accumulate(w, (gm @ cols.T).reshape(w.shape))
        if b is not None and b.requires_grad:
            _accumulate(b, gm.sum(axis=1))
        if x.requires_grad:
            dcols = (wm.T @ gm).reshape(cin, kh, kw, ho, wo)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
            _accumulate(x, dxp[:, padding:padding + h, padding:padding + wd])

    return _node(out, parents, backward, "conv2d")


def conv_transpose2d(x, w, b=None, stride: int = 2, padding: int = 1) -> Tensor:
    """Transposed convolution; ``w`` has shape (Cin, Cout, kh, kw).

    Output size is ``(H - 1) * stride - 2 * padding + kh``; with kernel 4,
    stride 2 and padding 1 this exactly doubles the resolution.
    """
    x, w = as_tensor(x), as_tensor(w)
    cin, h, wd = x.shape
    cin_w, cout, kh, kw = w.shape
    if cin != cin_w:
        raise ValueError(f"conv_transpose2d channel mismatch: input {cin}, kernel {cin_w}")
    hp = (h - 1) * stride + kh
    wp = (wd - 1) * stride + kw
    xm = np.ascontiguousarray(x.data.reshape(cin, -1))
    w_fwd = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0))   # (kh, kw, cout, cin)
    w_bwd = np.ascontiguousarray(w.data.transpose(2, 3, 0, 1))   # (kh, kw, cin, cout)
    outp = np.zeros((cout, hp, wp), dtype=np.result_type(x.data, w.data))
    for i in range(kh):
        for j in range(kw):
            contrib = (w_fwd[i, j] @ xm).reshape(cout, h, wd)
            outp[:, i:i + stride * h:stride, j:j + stride * wd:stride] += contrib
    ho, wo = hp - 2 * padding, wp - 2 * padding
    out = outp[:, padding:padding + ho, padding:padding + wo]
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[:, None, None]
        parents.append(b)

    def backward(g):
        gp = np.zeros((cout, hp, wp), dtype=g.dtype)
        gp[:, padding:padding + ho, padding:padding + wo] = g
        dx = np.zeros((cin, h * wd), dtype=g.dtype) if x.requires_grad else None
        dw = np.zeros_like(w.data) if w.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                gs = gp[:, i:i + stride * h:stride, j:j + stride * wd:stride].reshape(cout, -1)
                if dx is not None:
                    dx += w_bwd[i, j] @ gs
                if dw is not None:
                    dw[:, :, i, j] = xm @ gs.T
        if dx is not None:
            _accumulate(x, dx.reshape(x.shape))
        if dw is not None:
            _accumulate(w, dw)
        if b is not None and b.requires_grad:
            _accumulate(b, g.sum(axis=(1, 2)))

    return _node(out, parents, backward, "conv_transpose2d")


# -- resampling ----------------------------------------------------------------

def area_downsample(x, factor: int = 2) -> Tensor:
    """Average-pool ``x`` (C, H, W) by an integral factor; H and W must divide."""
    x = as_tensor(x)
    c, h, w = x.shape
    if h % factor or w % factor:
        raise ValueError(f"area_downsample: {h}x{w} not divisible by {factor}")
    out = x.data.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))

    def backward(g):
        up = np.repeat(np.repeat(g, factor, axis=1), factor, axis=2) / (factor * factor)
        _accumulate(x, up)

    return _node(out, (x,), backward, "area_downsample")


def _linear_weights(n_in, n_out):
    """Half-pixel-centred linear interpolation matrix of shape (n_out, n_in)."""
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = pos - i0
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), i0), 1 - f)
    np.add.at(m, (np.arange(n_out), i1), f)
    return m


def bilinear_resize(x, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resize of ``x`` (C, H, W) with half-pixel centres."""
    x = as_tensor(x)
    _, h, w = x.shape
    ry = _linear_weights(h, out_h).astype(x.dtype)
    rx = _linear_weights(w, out_w).astype(x.dtype)
    out = np.einsum("yh,chw,xw->cyx", ry, x.data, rx, optimize=True)

    def backward(g):
        _accumulate(x, np.einsum("yh,cyx,xw->chw", ry, g, rx, optimize=True))

    return _node(out, (x,), backward, "bilinear_resize")


def bilinear_taps(xs, ys, h, w):
    """Corner indices and weights for bilinear sampling with edge clamping.

    Coordinates are pixel indices (pixel ``i`` sits at coordinate ``i``).
    Returns ``(idx, wts)`` with shapes ``(4, *xs.shape)`` where ``idx`` are
    flat indices into an ``h * w`` grid.
    """
    xs = np.clip(np.asarray(xs, dtype=np.float64), 0, w - 1)
    ys = np.clip(np.asarray(ys, dtype=np.float64), 0, h - 1)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    idx = np.stack([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1])
    wts = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy])
    return idx, wts


def grid_sample(feat, xs, ys) -> Tensor:
    """Bilinearly sample ``feat`` (C, H, W) at pixel coordinates.

    Returns shape ``(*xs.shape, C)``.  Coordinates are constants; the gradient
    flows to ``feat`` only.
    """
    feat = as_tensor(feat)
    c, h, w = feat.shape
    idx, wts = bilinear_taps(xs, ys, h, w)
    wts = wts.astype(feat.dtype)
    flat = feat.data.reshape(c, -1).T  # (h*w, C)
    out = np.zeros(idx.shape[1:] + (c,), dtype=feat.dtype)
    for k in range(4):
        out += wts[k][..., None] * flat[idx[k]]

    def backward(g):
        acc = np.zeros((h * w, c), dtype=g.dtype)
        for k in range(4):
            np.add.at(acc, idx[k].ravel(), (wts[k][..., None] * g).reshape(-1, c))
        _accumulate(feat, acc.T.reshape(c, h, w))

    return _node(out, (feat,), backward, "grid_sample")
