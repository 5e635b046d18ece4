"""Dense tensors with reverse-mode automatic differentiation.

Every op eagerly computes its value with numpy and, when any input requires a
gradient, records a closure mapping the output gradient to input gradients.
``backward`` walks the recorded graph in reverse topological order.

Two context managers support verification:

* :func:`record_kinks` collects activation sign patterns (leaky ReLU) and
  pooling argmax routes, so a finite-difference probe can detect that it
  stepped across a non-differentiable point.
* :func:`detach_replay` records every :func:`stop_gradient` value on a first
  pass and replays those values on later passes. This lets a finite-difference
  oracle hold pseudo-labels, saliency maps and KL targets fixed, exactly as the
  analytic gradient does.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

LEAKY_SLOPE = 0.2
INSTANCE_NORM_EPS = 1e-5

_state = threading.local()


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def enable_grad():
    prev = _grad_enabled()
    _state.grad_enabled = True
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """N-dimensional value array, optionally attached to the gradient graph."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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
        return mul(self, -1.0)

    def sum(self, axis=None) -> Tensor:
        return tsum(self, axis)

    def mean(self, axis=None) -> Tensor:
        return mean(self, axis)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: non-finite output")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# --------------------------------------------------------------------------
# Verification hooks
# --------------------------------------------------------------------------


@contextlib.contextmanager
def record_kinks():
    """Collect piecewise-linear branch decisions made by ops inside the block."""
    prev = getattr(_state, "kinks", None)
    log: list[np.ndarray] = []
    _state.kinks = log
    try:
        yield log
    finally:
        _state.kinks = prev


def _note_kink(pattern: np.ndarray) -> None:
    log = getattr(_state, "kinks", None)
    if log is not None:
        log.append(pattern.copy())


class DetachLog:
    """Values captured by :func:`stop_gradient`, in call order."""

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.cursor = 0
        self.replaying = False


@contextlib.contextmanager
def detach_replay(log: DetachLog | None = None):
    """Record stop-gradient values, or replay them if ``log`` is given."""
    prev = getattr(_state, "detach_log", None)
    if log is None:
        log = DetachLog()
    else:
        log.replaying = True
        log.cursor = 0
    _state.detach_log = log
    try:
        yield log
    finally:
        _state.detach_log = prev


def stop_gradient(x) -> Tensor:
    """Cut the graph. Under an active replay, returns the recorded value instead."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    log = getattr(_state, "detach_log", None)
    if log is not None:
        if log.replaying:
            data = log.values[log.cursor]
            log.cursor += 1
        else:
            log.values.append(data.copy())
    return Tensor(data)


# --------------------------------------------------------------------------
# Elementwise and reduction ops
# --------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _need(t: Tensor, compute):
    return compute() if t.requires_grad else None


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g):
        return _need(a, lambda: _unbroadcast(g, a.shape)), _need(b, lambda: _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g):
        return _need(a, lambda: _unbroadcast(g, a.shape)), _need(b, lambda: _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g):
        return (
            _need(a, lambda: _unbroadcast(g * b.data, a.shape)),
            _need(b, lambda: _unbroadcast(g * a.data, b.shape)),
        )

    return _make(a.data * b.data, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g):
        return (
            _need(a, lambda: _unbroadcast(g / b.data, a.shape)),
            _need(b, lambda: _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
        )

    return _make(a.data / b.data, (a, b), back, "div")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def log(x: Tensor) -> Tensor:
    def back(g):
        return (g / x.data,)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make(out, (x,), back, "log")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)

    def back(g):
        return (g * inside,)

    return _make(np.clip(x.data, lo, hi), (x,), back, "clamp")


def tsum(x: Tensor, axis=None) -> Tensor:
    def back(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis)), (x,), back, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    def back(g):
        return (g.reshape(x.shape),)

    return _make(x.data.reshape(shape), (x,), back, "reshape")


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """``out[i] = x[i, index[i]]`` for a 2-D ``x``."""
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(x.shape[0])

    def back(g):
        gx = np.zeros_like(x.data)
        gx[rows, index] = g
        return (gx,)

    return _make(x.data[rows, index], (x,), back, "gather_rows")


def take_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice along the batch axis."""

    def back(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return _make(x.data[start:stop], (x,), back, "take_rows")


# --------------------------------------------------------------------------
# Layer primitives
# --------------------------------------------------------------------------


def _im2col3(x: np.ndarray) -> np.ndarray:
    """(m, c, h, w) -> patch matrix (9c, m*h*w), rows ordered (ki, kj, c)."""
    m, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1))).transpose(1, 0, 2, 3)
    cols = np.empty((3, 3, c, m, h, w), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[i, j] = xp[:, :, i : i + h, j : j + w]
    return cols.reshape(9 * c, m * h * w)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects 4-D input and weight")
    m, cin, h, w = x.shape
    cout = weight.shape[0]
    if weight.shape[1:] != (cin, 3, 3):
        raise ValueError(f"conv2d: weight {weight.shape} does not match input channels {cin}")
    cols = _im2col3(x.data)
    wk = weight.data.transpose(0, 2, 3, 1).reshape(cout, 9 * cin)
    out = wk @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, m, h, w).transpose(1, 0, 2, 3))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, m * h * w)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.ascontiguousarray((gt @ cols.T).reshape(cout, 3, 3, cin).transpose(0, 3, 1, 2))
        if bias is not None and bias.requires_grad:
            gb = gt.sum(axis=1)
        if x.requires_grad:
            dcols = (wk.T @ gt).reshape(3, 3, cin, m, h, w)
            gpad = np.zeros((cin, m, h + 2, w + 2), dtype=g.dtype)
            for i in range(3):
                for j in range(3):
                    gpad[:, :, i : i + h, j : j + w] += dcols[i, j]
            gx = np.ascontiguousarray(gpad[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _make(out, parents, back, "conv2d")


def conv2d_1x1(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-pixel linear projection across channels."""
    m, cin, h, w = x.shape
    cout = weight.shape[0]
    if weight.shape[1:] != (cin, 1, 1):
        raise ValueError(f"conv2d_1x1: weight {weight.shape} does not match input channels {cin}")
    wmat = weight.data.reshape(cout, cin)
    out = np.einsum("oc,mchw->mohw", wmat, x.data)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gx = np.einsum("oc,mohw->mchw", wmat, g) if x.requires_grad else None
        gw = np.einsum("mohw,mchw->oc", g, x.data).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(np.ascontiguousarray(out), parents, back, "conv2d_1x1")


def instance_norm(x: Tensor, eps: float = INSTANCE_NORM_EPS) -> Tensor:
    """Per (sample, channel) standardization over the spatial axes, no affine."""
    n = x.shape[2] * x.shape[3]
    if n < 2:
        raise ValueError("instance_norm needs at least two spatial positions")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        gs = g.sum(axis=(2, 3), keepdims=True)
        gxs = (g * xhat).sum(axis=(2, 3), keepdims=True)
        return (inv * (g - gs / n - xhat * gxs / n),)

    return _make(xhat, (x,), back, "instance_norm")


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    pos = x.data >= 0
    _note_kink(pos)
    s = x.dtype.type(slope)

    def back(g):
        return (np.where(pos, g, g * s),)

    return _make(np.where(pos, x.data, x.data * s), (x,), back, "leaky_relu")


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route to the first element in row-major order."""
    m, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial extent, got {h}x{w}")
    win = x.data.reshape(m, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(m, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    _note_kink(idx)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gw = np.zeros((m, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(m, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(m, c, h, w)
        return (gx,)

    return _make(out, (x,), back, "maxpool2")


def avgpool2(x: Tensor) -> Tensor:
    m, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avgpool2 needs even spatial extent, got {h}x{w}")
    out = x.data.reshape(m, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def back(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _make(out, (x,), back, "avgpool2")


def avgpool_global(x: Tensor) -> Tensor:
    """Mean over all spatial positions, flattened to (m, C)."""
    m, c, h, w = x.shape
    n = h * w

    def back(g):
        return (np.broadcast_to((g / n)[:, :, None, None], x.shape).copy(),)

    return _make(x.data.mean(axis=(2, 3)), (x,), back, "avgpool_global")


def upsample_nearest2(x: Tensor) -> Tensor:
    m, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def back(g):
        return (g.reshape(m, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), back, "upsample_nearest2")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        return (gx, gw) if bias is None else (gx, gw, g.sum(axis=0))

    return _make(out, parents, back, "linear")


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    lead = parts[0].shape
    for p in parts[1:]:
        if p.shape[0] != lead[0] or p.shape[2:] != lead[2:]:
            raise ValueError(f"concat_channels: {p.shape} does not align with {lead}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def back(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), back, "concat_channels")


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    out, start = [], 0
    for n in sizes:
        out.append(_channel_slice(x, start, start + n))
        start += n
    if start != x.shape[1]:
        raise ValueError("split sizes do not cover the channel axis")
    return out


def _channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    def back(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return _make(x.data[:, start:stop], (x,), back, "channel_slice")


def softmax(logits: Tensor) -> Tensor:
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make(p, (logits,), back, "softmax")


def log_softmax(logits: Tensor) -> Tensor:
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _make(out, (logits,), back, "log_softmax")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)

    def back(g):
        return (g * s * (1.0 - s),)

    return _make(s, (x,), back, "sigmoid")


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))

    def back(g):
        return (g * keep,)

    return _make(x.data * keep, (x,), back, "dropout")


# --------------------------------------------------------------------------
# Backward pass
# --------------------------------------------------------------------------


class Gradients:
    """Mapping from tensors to gradient arrays (identity-keyed)."""

    def __init__(self):
        self._items: dict[int, tuple[Tensor, np.ndarray]] = {}

    def _add(self, t: Tensor, g: np.ndarray) -> None:
        key = id(t)
        if key in self._items:
            self._items[key] = (t, self._items[key][1] + g)
        else:
            self._items[key] = (t, g)

    def __getitem__(self, t: Tensor) -> np.ndarray:
        if id(t) in self._items:
            return self._items[id(t)][1]
        return np.zeros_like(t.data)

    def get(self, t: Tensor, default=None):
        item = self._items.get(id(t))
        return default if item is None else item[1]

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._items

    def __len__(self) -> int:
        return len(self._items)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, retain_all: bool = False) -> Gradients:
    """Reverse-mode sweep from a scalar ``root``.

    Gradients are accumulated over every use-site of a node. Only leaf
    gradients are kept unless ``retain_all`` is set.
    """
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("backward called on a tensor detached from the graph")
    order = _topo_order(root)
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    result = Gradients()
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if retain_all or node._backward is None:
            result._add(node, g)
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
    return result


# --------------------------------------------------------------------------
# Finite-difference verification
# --------------------------------------------------------------------------


def relative_error(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def finite_diff_errors(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-4,
    indices: Iterable[int] | None = None,
    skip_kinks: bool = True,
) -> tuple[np.ndarray, list[int]]:
    """Per-coordinate relative errors of the analytic gradient of ``f`` at ``x``.

    Returns the error array and the flat indices skipped because the central
    difference crossed a kink (changed a leaky-ReLU sign or a maxpool route).
    """
    if not x.requires_grad:
        x.requires_grad = True
    with detach_replay() as frozen, record_kinks() as base_kinks:
        y = f(x)
    analytic = backward(y)[x].reshape(-1)
    flat = x.data.reshape(-1)
    coords = range(flat.size) if indices is None else list(indices)
    errors, skipped = [], []
    for i in coords:
        orig = flat[i]
        vals = []
        patterns = []
        for sgn in (1.0, -1.0):
            flat[i] = orig + sgn * step
            with no_grad(), detach_replay(frozen), record_kinks() as kinks:
                vals.append(float(f(x).data))
            patterns.append(kinks)
        flat[i] = orig
        if skip_kinks and not (_same_kinks(patterns[0], base_kinks) and _same_kinks(patterns[1], base_kinks)):
            skipped.append(i)
            continue
        numeric = (vals[0] - vals[1]) / (2.0 * step)
        errors.append(relative_error(analytic[i], numeric))
    return np.asarray(errors, dtype=np.float64), skipped


def _same_kinks(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(p, q) for p, q in zip(a, b))


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-4,
    indices: Iterable[int] | None = None,
    skip_kinks: bool = True,
) -> float:
    """Max relative error between analytic and central-difference gradients."""
    errors, _ = finite_diff_errors(f, x, step, indices, skip_kinks)
    if errors.size == 0:
        raise ValueError("every probed coordinate crossed a kink")
    return float(errors.max())
