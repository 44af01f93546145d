"""Dense n-dimensional tensors with reverse-mode automatic differentiation.

Values are flat row-major numpy arrays; differentiable operations record
themselves on a per-thread :class:`GradientTape` whose reverse append order
is a valid topological order for the backward sweep.  Weights default to
float32; tests build float64 tensors explicitly (gradient checks are
meaningless at float32 tolerances).

Every operation validates that its output is finite: NaN/Inf raises
:class:`~lwta.errors.NonFiniteError` instead of propagating silently.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import ContractError, DomainError, NonFiniteError, ParameterError, ShapeError

DEFAULT_DTYPE = np.float32

_local = threading.local()


def active_tape():
    """The tape currently recording on this thread, or None."""
    return getattr(_local, "tape", None)


class _Node:
    """One recorded operation: output, parents, and a backward closure that
    maps the output gradient to per-parent gradients (None = no flow)."""

    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class GradientTape:
    """Append-only record of differentiable operations for one forward pass.

    Use as a context manager; one tape may be active per thread at a time.
    ``backward`` may be called inside or after the ``with`` block and may be
    called repeatedly (leaf gradients accumulate across calls).
    """

    def __init__(self):
        self.nodes = []
        self.active = False

    def __enter__(self):
        if active_tape() is not None:
            raise ContractError("a gradient tape is already active on this thread")
        self.active = True
        _local.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        self.active = False
        _local.tape = None
        return False

    def _record(self, out, parents, backward_fn):
        node = _Node(out, tuple(parents), backward_fn)
        self.nodes.append(node)
        out._node = node
        out._tape = self

    def backward(self, loss):
        """Populate ``.grad`` on every leaf (requires_grad tensor) that the
        scalar ``loss`` depends on. Repeated calls accumulate."""
        if not isinstance(loss, Tensor):
            raise ContractError("backward target must be a Tensor")
        if loss.data.size != 1:
            raise ContractError(f"backward target must be scalar, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not recorded on this tape")

        grads = {loss: np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(node.out, None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent._tracked(self):
                    continue
                acc = grads.get(parent)
                grads[parent] = pg if acc is None else acc + pg
        for tensor, g in grads.items():
            if tensor.requires_grad:
                tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g


def backward(loss):
    """Run the backward pass for ``loss`` on the tape that recorded it."""
    if not isinstance(loss, Tensor) or loss._tape is None:
        raise ContractError("loss is not on a gradient tape")
    loss._tape.backward(loss)


class Tensor:
    """N-dimensional float array, optionally participating in the tape.

    ``requires_grad`` marks a leaf whose gradient should be accumulated into
    ``.grad`` by the backward pass. Values are treated as immutable after
    creation; optimizers rebind ``.data`` rather than mutating it.
    """

    __slots__ = ("data", "grad", "requires_grad", "_node", "_tape")

    def __init__(self, data, dtype=None, requires_grad=False):
        arr = np.asarray(data.data if isinstance(data, Tensor) else data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._node = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _tracked(self, tape):
        return self.requires_grad or (self._node is not None and self._tape is tape)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; non-Tensor operands become constants
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _check_finite(arr, what):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{what} produced a non-finite value")


def _result(data, parents, backward_fn, op_name):
    """Wrap an op result, enforce finiteness, and record it when a tape is
    active and any parent participates."""
    _check_finite(data, op_name)
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p._tracked(tape) for p in parents):
        tape._record(out, parents, backward_fn)
    return out


def _unbroadcast(grad, shape):
    """Reduce a broadcasted gradient back to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise suite
# ---------------------------------------------------------------------------


def add(a, b):
    data = a.data + b.data
    return _result(
        data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b):
    data = a.data - b.data
    return _result(
        data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b):
    with np.errstate(over="ignore"):
        data = a.data * b.data
    return _result(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b):
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data
    return _result(
        data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
        "div",
    )


def scale(a, c):
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp(a):
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    return _result(data, (a,), lambda g: (g * data,), "exp")


def log(a):
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def xlogy(a, b):
    """Elementwise a*log(b) with the 0*log(.) == 0 limit convention where
    a == 0. log(b) must exist wherever a != 0."""
    mask = a.data != 0
    if np.any(mask & (b.data <= 0)):
        raise DomainError("xlogy: log of non-positive value at a nonzero weight")
    safe_b = np.where(mask, b.data, 1.0)
    logb = np.log(safe_b)
    data = np.where(mask, a.data * logb, 0.0).astype(safe_b.dtype)

    def backward_fn(g):
        ga = _unbroadcast(np.where(mask, logb, 0.0) * g, a.shape)
        gb = _unbroadcast(np.where(mask, a.data / safe_b, 0.0) * g, b.shape)
        return ga, gb

    return _result(data, (a, b), backward_fn, "xlogy")


def clamp(a, lo=None, hi=None):
    """Clip to [lo, hi]; gradient is zero outside the open interval and at
    the boundaries (subgradient 0 at the kink)."""
    data = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data > lo
    if hi is not None:
        inside &= a.data < hi
    return _result(data, (a,), lambda g: (g * inside,), "clamp")


def relu(a):
    return clamp(a, lo=0.0)


def sign(a):
    """Elementwise sign; gradient is zero everywhere by convention."""
    return _result(np.sign(a.data), (a,), lambda g: (None,), "sign")


def tsum(a, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)

    return _result(np.asarray(data), (a,), backward_fn, "sum")


def mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    else:
        n = a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def argmax(a, axis=-1):
    """Index of the per-slice maximum; not differentiable, returns ints."""
    data = a.data if isinstance(a, Tensor) else np.asarray(a)
    return np.argmax(data, axis=axis)


def pick(a, indices, axis=1):
    """Row gather: out[n] = a[n, indices[n]] for a 2-D tensor."""
    if a.ndim != 2 or axis != 1:
        raise ShapeError("pick expects a 2-D tensor indexed along axis 1")
    idx = np.asarray(indices)
    if idx.ndim != 1 or idx.shape[0] != a.shape[0]:
        raise ShapeError(f"pick indices must have shape ({a.shape[0]},), got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise ContractError("pick index out of range")
    rows = np.arange(a.shape[0])
    data = a.data[rows, idx]

    def backward_fn(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, idx), g)
        return (ga,)

    return _result(data, (a,), backward_fn, "pick")


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(a, shape):
    data = a.data.reshape(shape)
    return _result(data, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


# ---------------------------------------------------------------------------
# linear algebra / convolution
# ---------------------------------------------------------------------------


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        data = a.data @ b.data
    return _result(data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def conv2d(x, w, stride=1, padding=0):
    """Cross-correlation of NHWC input with an (h, l, C, F) kernel under zero
    padding. Output height is (H + 2*padding - h)/stride + 1, which must be
    integral.

    The accumulation order over (kernel row, kernel col, channel) is fixed
    and ascending, so results are bit-reproducible and match a direct
    nested-loop evaluation exactly.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise ParameterError(f"stride must be a positive int, got {stride!r}")
    if not isinstance(padding, (int, np.integer)) or padding < 0:
        raise ParameterError(f"padding must be a non-negative int, got {padding!r}")
    n, hh, ll, c = x.shape
    kh, kl, wc, f = w.shape
    if wc != c:
        raise ShapeError(f"kernel channels {wc} do not match input channels {c}")
    if hh + 2 * padding < kh or ll + 2 * padding < kl:
        raise ShapeError("kernel does not fit the padded input")
    if (hh + 2 * padding - kh) % stride or (ll + 2 * padding - kl) % stride:
        raise ShapeError("non-integral convolution output size")
    ho = (hh + 2 * padding - kh) // stride + 1
    lo = (ll + 2 * padding - kl) // stride + 1

    if padding:
        xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    else:
        xp = x.data
    out = np.zeros((n, ho, lo, f), dtype=np.result_type(x.dtype, w.dtype))
    for i in range(kh):
        for j in range(kl):
            patch = xp[:, i : i + stride * ho : stride, j : j + stride * lo : stride, :]
            for ch in range(c):
                out += patch[..., ch : ch + 1] * w.data[i, j, ch]

    def backward_fn(g):
        gw = np.zeros_like(w.data)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kl):
                patch = xp[:, i : i + stride * ho : stride, j : j + stride * lo : stride, :]
                for ch in range(c):
                    gw[i, j, ch] = np.tensordot(patch[..., ch], g, axes=([0, 1, 2], [0, 1, 2]))
                    gxp[:, i : i + stride * ho : stride, j : j + stride * lo : stride, ch] += (
                        g @ w.data[i, j, ch]
                    )
        if padding:
            gx = gxp[:, padding : padding + hh, padding : padding + ll, :]
        else:
            gx = gxp
        return gx, gw

    return _result(out, (x, w), backward_fn, "conv2d")


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - inner),)

    return _result(data, (a,), backward_fn, "softmax")


def log_softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse

    def backward_fn(g):
        return (g - np.exp(data) * g.sum(axis=axis, keepdims=True),)

    return _result(data, (a,), backward_fn, "log_softmax")
