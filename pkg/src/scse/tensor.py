"""Dense float64 tensors with a reverse-mode autodiff graph.

Feature maps use the (N, C, H, W) layout throughout. Every op records its
parents and a backward closure; ``backward`` walks nodes in reverse creation
order, which is always a valid reverse topological order because a node can
only be created after its inputs.
"""

from __future__ import annotations

import itertools
import zlib
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence]

_creation_counter = itertools.count()
_grad_enabled = True
_kink_log: Optional[list] = None


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev


class record_kinks:
    """Collect the branch decisions of piecewise-linear ops during a forward pass.

    Inside the context, every ``relu`` appends its active mask and every
    ``max_pool2d`` its argmax indices to ``self.log``. Two evaluations with
    equal logs lie in the same linear region of the network.
    """

    def __enter__(self):
        global _kink_log
        self._prev = _kink_log
        self.log = []
        _kink_log = self.log
        return self

    def __exit__(self, *exc):
        global _kink_log
        _kink_log = self._prev


def _same_region(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


class Tensor:
    """An immutable n-d array of float64 values, optionally tracked for gradients.

    Args:
        data: Array-like payload. Always stored as contiguous float64.
        requires_grad: Whether gradients should flow to this tensor.
        name: Optional label, used for parameters and diagnostics.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op", "_id")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"
        self._id = next(_creation_counter)

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple, backward: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(data, dtype=np.float64)
        out.grad = None
        out.name = None
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = parents if track else ()
        out._backward = backward if track else None
        out._op = op
        out._id = next(_creation_counter)
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

    # -- arithmetic -------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -----------------------------------------------------------------------------
# Elementwise and reduction ops
# -----------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def _bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._from_op(a.data + b.data, (a, b), _bw, "add")


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def _bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._from_op(ad * bd, (a, b), _bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def _bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return Tensor._from_op(out, (a, b), _bw, "div")


def tlog(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._from_op(np.log(ad), (a,), lambda g: (g / ad,), "log")


def texp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(out, (a,), _bw, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _kink_log is not None:
        _kink_log.append(mask)
    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor._from_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def activation(kind: str, x: Tensor) -> Tensor:
    """Apply ``relu`` or ``sigmoid`` elementwise."""
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}; expected 'relu' or 'sigmoid'")


# -----------------------------------------------------------------------------
# Layer ops
# -----------------------------------------------------------------------------


def _check_rank(t: Tensor, rank: int, what: str) -> None:
    if t.ndim != rank:
        raise ShapeError(f"{what} must have rank {rank}, got shape {t.shape}")


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation (no kernel flip).

    Args:
        x: Input of shape (N, Cin, H, W).
        weight: Kernel of shape (Cout, Cin, kh, kw) with odd kh, kw.
        bias: Optional (Cout,) offsets.
        stride: Step between output positions, >= 1.
        padding: Zero padding added on every spatial border, >= 0.

    Returns:
        Tensor of shape (N, Cout, H', W') with H' = (H + 2p - kh) / stride + 1.
    """
    _check_rank(x, 4, "conv2d input")
    _check_rank(weight, 4, "conv2d weight")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but weight expects {wcin} (weight shape {weight.shape})")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: need stride >= 1 and padding >= 0, got stride={stride}, padding={padding}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {cout} output channels")
    span_h, span_w = h + 2 * padding - kh, w + 2 * padding - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ShapeError(
            f"conv2d: output extent is not an integer for input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}"
        )
    oh, ow = span_h // stride + 1, span_w // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    # cols[n, c, i, j, y, x] = xp[n, c, y*stride + i, x*stride + j]
    cols = np.empty((n, cin, kh, kw, oh, ow))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    cols = cols.reshape(n, cin * kh * kw, oh * ow)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, cout, oh, ow)

    def _bw(g):
        g2 = g.reshape(n, cout, oh * ow)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gcols = np.matmul(wmat.T, g2).reshape(n, cin, kh, kw, oh, ow)
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gcols[:, :, i, j]
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, _bw, "conv2d")


def fully_connected(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """y = x @ weight.T (+ bias) over the last axis of ``x``; weight is (Dout, Din)."""
    _check_rank(weight, 2, "fully_connected weight")
    dout, din = weight.shape
    if x.ndim == 0 or x.shape[-1] != din:
        raise ShapeError(f"fully_connected: last axis of input {x.shape} must equal Din={din}")
    if bias is not None and bias.shape != (dout,):
        raise ShapeError(f"fully_connected: bias shape {bias.shape} does not match Dout={dout}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def _bw(g):
        gx = g @ wd
        gw = g.reshape(-1, dout).T @ xd.reshape(-1, din)
        if bias is None:
            return gx, gw
        return gx, gw, g.reshape(-1, dout).sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, _bw, "fully_connected")


def max_pool2d(x: Tensor, k: int) -> tuple:
    """Non-overlapping k x k max pooling.

    Returns:
        ``(pooled, indices)`` where ``indices`` is an int array of shape
        (N, C, H/k, W/k) holding the row-major position of each window's
        maximum inside its window (first occurrence on ties).
    """
    _check_rank(x, 4, "max_pool2d input")
    n, c, h, w = x.shape
    if k < 1 or h % k or w % k:
        raise ShapeError(f"max_pool2d: spatial extent {h}x{w} is not divisible by k={k}")
    oh, ow = h // k, w // k
    win = x.data.reshape(n, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, k * k)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    if _kink_log is not None:
        _kink_log.append(idx)

    def _bw(g):
        gwin = np.zeros((n, c, oh, ow, k * k))
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        return (gwin.reshape(n, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return Tensor._from_op(out, (x,), _bw, "max_pool2d"), idx


def max_unpool2d(x: Tensor, indices: np.ndarray, k: int) -> Tensor:
    """Scatter each value to its recorded in-window position; zeros elsewhere."""
    _check_rank(x, 4, "max_unpool2d input")
    n, c, h, w = x.shape
    indices = np.asarray(indices)
    if indices.shape != x.shape:
        raise ShapeError(f"max_unpool2d: indices shape {indices.shape} does not match input {x.shape}")
    if indices.size and (indices.min() < 0 or indices.max() >= k * k):
        raise ShapeError(f"max_unpool2d: index outside the {k}x{k} window range [0, {k * k})")
    idx = indices.astype(np.intp)[..., None]

    def _scatter(vals):
        win = np.zeros((n, c, h, w, k * k))
        np.put_along_axis(win, idx, vals[..., None], axis=-1)
        return win.reshape(n, c, h, w, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h * k, w * k)

    def _bw(g):
        win = g.reshape(n, c, h, k, w, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w, k * k)
        return (np.take_along_axis(win, idx, axis=-1)[..., 0],)

    return Tensor._from_op(_scatter(x.data), (x,), _bw, "max_unpool2d")


def upsample_nearest(x: Tensor, k: int) -> Tensor:
    _check_rank(x, 4, "upsample_nearest input")
    if k < 1:
        raise ShapeError(f"upsample_nearest: k must be >= 1, got {k}")
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, k, w, k)).reshape(n, c, h * k, w * k)

    def _bw(g):
        return (g.reshape(n, c, h, k, w, k).sum(axis=(3, 5)),)

    return Tensor._from_op(out, (x,), _bw, "upsample_nearest")


def softmax_channels(logits: Tensor) -> Tensor:
    """Per-pixel softmax over axis 1 of an (N, K, H, W) tensor."""
    _check_rank(logits, 4, "softmax_channels input")
    if logits.shape[1] < 2:
        raise ShapeError(f"softmax_channels needs K >= 2 channels, got {logits.shape[1]}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def _bw(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return Tensor._from_op(p, (logits,), _bw, "softmax_channels")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_rank(a, 4, "concat_channels first operand")
    _check_rank(b, 4, "concat_channels second operand")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"concat_channels: N/H/W mismatch between {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return Tensor._from_op(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]), "concat_channels")


# -----------------------------------------------------------------------------
# Reverse pass
# -----------------------------------------------------------------------------


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> dict:
    """Accumulate d(loss)/d(node) for every node reachable from ``loss``.

    Leaf tensors with ``requires_grad`` get their ``.grad`` overwritten.

    Args:
        loss: A single-element tensor.
        params: Optional tensors whose gradients should be returned. Ones not
            on any path to ``loss`` get an all-zero gradient.

    Returns:
        Mapping from each requested parameter (by identity) to its gradient.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

    nodes = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node._id in nodes:
            continue
        nodes[node._id] = node
        stack.extend(node._parents)

    grads = {loss._id: np.ones(loss.shape)}
    for nid in sorted(nodes, reverse=True):
        node = nodes[nid]
        g = grads.get(nid)
        if node._backward is None or g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            prev = grads.get(parent._id)
            grads[parent._id] = pg if prev is None else prev + pg

    for nid, node in nodes.items():
        if node._op == "leaf" and node.requires_grad:
            g = grads.get(nid)
            node.grad = np.zeros(node.shape) if g is None else np.asarray(g, dtype=np.float64).reshape(node.shape)

    result = {}
    for p in params or ():
        g = grads.get(p._id)
        p.grad = np.zeros(p.shape) if g is None else np.asarray(g, dtype=np.float64).reshape(p.shape)
        result[id(p)] = p.grad
    return result


# -----------------------------------------------------------------------------
# Initialization and the finite-difference oracle
# -----------------------------------------------------------------------------


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator per (seed, parameter name).

    Keeps every parameter's draw unaffected by which other parameters exist,
    so twin networks that differ only by SE blocks share all other weights.
    """
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


def glorot_uniform(shape: tuple, fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def finite_diff_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Elementwise |a - b| / max(|a|, |b|, floor)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def check_gradients(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    sample: Optional[dict] = None,
    min_eps: float = 1e-8,
) -> dict:
    """Compare backprop gradients of ``fn()`` with central differences.

    A central difference is only meaningful when ``x - eps`` and ``x + eps``
    lie in the same linear piece as ``x``. When a ReLU mask or pooling argmax
    flips inside the stencil, the step is divided by 10 (down to
    ``min_eps``); the last estimate is used if no clean step exists.

    Args:
        fn: Rebuilds the scalar output from the current ``params`` data.
        params: Tensors to differentiate; their ``.data`` is perturbed in place
            and restored.
        eps: Initial finite-difference step.
        sample: Optional ``{param index: flat element indices}`` restricting
            which elements are checked.

    Returns:
        ``{param name or index: max relative error}``.
    """
    loss = fn()
    analytic = backward(loss, params)
    with no_grad(), record_kinks() as rec:
        fn()
    base = rec.log

    def probe(flat, e, orig, step):
        with no_grad(), record_kinks() as rp:
            flat[e] = orig + step
            fp = fn().item()
        with no_grad(), record_kinks() as rm:
            flat[e] = orig - step
            fm = fn().item()
        flat[e] = orig
        clean = _same_region(rp.log, base) and _same_region(rm.log, base)
        return (fp - fm) / (2.0 * step), clean

    report = {}
    for pi, p in enumerate(params):
        key = p.name or str(pi)
        ga = analytic[id(p)].reshape(-1)
        flat = p.data.reshape(-1)
        elems = range(flat.size) if sample is None or pi not in sample else sample[pi]
        worst = 0.0
        for e in elems:
            orig = flat[e]
            step = eps
            num, clean = probe(flat, e, orig, step)
            while not clean and step / 10 >= min_eps:
                step /= 10
                num, clean = probe(flat, e, orig, step)
            worst = max(worst, float(relative_error(ga[e], num)))
        report[key] = worst
    return report
