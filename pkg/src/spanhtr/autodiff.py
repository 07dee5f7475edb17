"""Dense tensors with reverse-mode automatic differentiation.

Every tensor wraps a numpy buffer. Operations build a graph on the fly when
at least one input requires a gradient; :meth:`Tensor.backward` walks that
graph once in reverse topological order.

Image-like tensors use the batch x channels x height x width layout.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32
INSTANCE_NORM_EPS = 1e-5

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, optimizer updates)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A numpy buffer plus the bookkeeping needed for backpropagation.

    Leaves created by the user hold ``grad`` after :meth:`backward`;
    intermediate results never keep their gradient.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: Sequence["Tensor"] = (), _backward: Callable | None = None,
                 _op: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = tuple(_parents)
        self._backward = _backward
        self._op = _op

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- arithmetic sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return tensor_mean(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    # -- backpropagation ------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        Only scalar tensors may be differentiated without an explicit seed
        gradient. Calling backward twice without resetting leaf gradients adds
        the second result to the first.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(
                    f"backward() needs a scalar tensor, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            if grad.shape != self.shape:
                raise ValueError(f"seed gradient shape {grad.shape} != {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("tensor does not require grad and has no graph")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
    # iterative DFS: encoder graphs are deep enough to hit the recursion limit
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def _as_tensor(value, dtype) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=dtype))


def _make(data: np.ndarray, parents: Iterable[Tensor], backward: Callable, op: str) -> Tensor:
    parents = tuple(parents)
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, dtype=data.dtype,
                      _parents=parents, _backward=backward, _op=op)
    return Tensor(data, dtype=data.dtype)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _pair(value) -> tuple[int, int]:
    if isinstance(value, (int, np.integer)):
        return int(value), int(value)
    a, b = value
    return int(a), int(b)


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum. Shapes must match except for scalar operands."""
    if a.shape != b.shape and b.size != 1 and a.size != 1:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward(g):
        ga = g if a.shape == g.shape else np.asarray(g.sum()).reshape(a.shape)
        gb = g if b.shape == g.shape else np.asarray(g.sum()).reshape(b.shape)
        return ga, gb

    return _make(out, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and b.size != 1 and a.size != 1:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    out = a.data * b.data

    def backward(g):
        ga = g * b.data
        gb = g * a.data
        if ga.shape != a.shape:
            ga = np.asarray(ga.sum()).reshape(a.shape)
        if gb.shape != b.shape:
            gb = np.asarray(gb.sum()).reshape(b.shape)
        return ga, gb

    return _make(out, (a, b), backward, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return _make(out, (x,), lambda g: (g * mask,), "relu")


def tensor_sum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return _make(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def tensor_mean(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.data.mean(), dtype=x.dtype)
    return _make(out, (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),), "mean")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _make(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),), "permute")


def softmax_lastdim(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (x,), backward, "softmax")


def log_softmax_lastdim(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def _pad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _pad_channels_first(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    """Zero-pad (n, c, h, w) into a contiguous (c, n, h + 2ph, w + 2pw) buffer."""
    n, c, h, w = x.shape
    buf = np.zeros((c, n, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    buf[:, :, ph : ph + h, pw : pw + w] = x.transpose(1, 0, 2, 3)
    return buf


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride=(1, 1), padding=(0, 0)) -> Tensor:
    """Cross-correlation of ``x`` (n, cin, h, w) with ``weight`` (cout, cin, kh, kw).

    Implemented as an explicit patch-matrix expansion followed by one matrix
    product. Output extents follow ``floor((h + 2p - k) / s) + 1``.

    The result has the logical (n, cout, h', w') shape but is stored
    channels-first in memory; the next convolution then reads it without a
    transpose copy.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4D input and weight, got {x.shape}, {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ValueError(
            f"conv2d: input has {cin} channels but weight expects {wcin} "
            f"(weight shape {weight.shape})")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if kh < 1 or kw < 1 or h + 2 * ph < kh or w + 2 * pw < kw:
        raise ValueError(
            f"conv2d: kernel {kh}x{kw} does not fit input {h}x{w} with padding {ph},{pw}")
    ho = conv_output_size(h, kh, sh, ph)
    wo = conv_output_size(w, kw, sw, pw)
    wmat = weight.data.reshape(cout, cin * kh * kw)

    xp = _pad_channels_first(x.data, ph, pw)
    # patch matrix, rows ordered (cin, kh, kw) to match wmat columns
    cols = np.empty((cin, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw]
    cols = cols.reshape(cin * kh * kw, n * ho * wo)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)

    def backward(g):
        gT = g.transpose(1, 0, 2, 3).reshape(cout, n * ho * wo)
        gw = (gT @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = gT.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ gT).reshape(cin, kh, kw, n, ho, wo)
            gxp = np.zeros((cin, n, h + 2 * ph, w + 2 * pw), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + sh * (ho - 1) + 1 : sh,
                        j : j + sw * (wo - 1) + 1 : sw] += dcols[:, i, j]
            gx = gxp[:, :, ph : ph + h, pw : pw + w].transpose(1, 0, 2, 3)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, "conv2d")


def depthwise_conv2d(x: Tensor, weight: Tensor, stride=(1, 1), padding=(0, 0)) -> Tensor:
    """Per-channel spatial convolution; ``weight`` is (c, 1, kh, kw), no bias."""
    n, c, h, w = x.shape
    if weight.ndim != 4 or weight.shape[0] != c or weight.shape[1] != 1:
        raise ValueError(
            f"depthwise_conv2d: weight {weight.shape} incompatible with {c} input channels "
            "(expected (c, 1, kh, kw), channel multiplier 1)")
    _, _, kh, kw = weight.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ValueError(f"depthwise_conv2d: kernel {kh}x{kw} does not fit input {h}x{w}")
    ho = conv_output_size(h, kh, sh, ph)
    wo = conv_output_size(w, kw, sw, pw)
    xp = _pad(x.data, ph, pw)
    k = weight.data[:, 0]

    def window(arr, i, j):
        return arr[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw]

    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += window(xp, i, j) * k[:, i, j][None, :, None, None]

    def backward(g):
        gw = None
        if weight.requires_grad:
            gw = np.empty_like(weight.data)
            for i in range(kh):
                for j in range(kw):
                    gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, window(xp, i, j))
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    window(gxp, i, j)[...] += g * k[:, i, j][None, :, None, None]
            gx = gxp[:, :, ph : ph + h, pw : pw + w]
        return gx, gw

    return _make(out, (x, weight), backward, "depthwise_conv2d")


def depthwise_separable_conv(x: Tensor, depthwise_weight: Tensor, pointwise_weight: Tensor,
                             bias: Tensor | None = None, stride=(1, 1), padding=(1, 1)) -> Tensor:
    """Depthwise 3x3 (carrying the stride) followed by a 1x1 channel-mixing conv."""
    if pointwise_weight.shape[1] != x.shape[1]:
        raise ValueError(
            f"depthwise_separable_conv: pointwise weight expects {pointwise_weight.shape[1]} "
            f"channels, input has {x.shape[1]}")
    spatial = depthwise_conv2d(x, depthwise_weight, stride=stride, padding=padding)
    return conv2d(spatial, pointwise_weight, bias)


# ---------------------------------------------------------------------------
# normalization, pooling, dropout
# ---------------------------------------------------------------------------

def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = INSTANCE_NORM_EPS) -> Tensor:
    """Standardize each (sample, channel) plane, then apply a per-channel affine map."""
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"instance_norm: affine shapes {gamma.shape}, {beta.shape} != ({c},)")
    m = h * w
    mean = x.data.mean(axis=(2, 3), keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=(2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    gb = gamma.data[None, :, None, None]
    out = xhat * gb + beta.data[None, :, None, None]

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gb
            s1 = dxhat.sum(axis=(2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(2, 3), keepdims=True)
            gx = inv_std / m * (m * dxhat - s1 - xhat * s2)
        return gx, ggamma, gbeta

    return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "instance_norm")


def adaptive_max_pool_vertical(x: Tensor) -> Tensor:
    """Max over the height axis: (n, c, h, w) -> (n, c, 1, w).

    Ties resolve to the lowest row index, so gradients are deterministic.
    """
    if x.ndim != 4 or x.shape[2] < 1:
        raise ValueError(f"adaptive_max_pool_vertical expects (n, c, h>=1, w), got {x.shape}")
    idx = np.argmax(x.data, axis=2)[:, :, None, :]
    out = np.take_along_axis(x.data, idx, axis=2)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g, axis=2)
        return (gx,)

    return _make(out, (x,), backward, "adaptive_max_pool_vertical")


def _check_p(p: float) -> None:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")


def _apply_mask(x: Tensor, keep: np.ndarray, p: float) -> Tensor:
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    mask = keep.astype(x.dtype) * scale
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def dropout_elementwise(x: Tensor, p: float, training: bool, rng: np.random.Generator) -> Tensor:
    _check_p(p)
    if not training or p == 0.0:
        return x
    return _apply_mask(x, rng.random(x.shape) >= p, p)


def dropout_channel(x: Tensor, p: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Drop whole (sample, channel) feature maps of a 4D tensor."""
    _check_p(p)
    if not training or p == 0.0:
        return x
    keep = rng.random(x.shape[:2] + (1,) * (x.ndim - 2)) >= p
    return _apply_mask(x, keep, p)
