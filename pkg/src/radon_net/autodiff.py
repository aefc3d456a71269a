"""Dense float32 tensors with a reverse-mode gradient tape.

Every operation that touches a tensor participating in differentiation is
appended to the calling thread's current :class:`Tape`.  :func:`backward`
replays the tape in reverse once, after which the tape is consumed and the
next recorded operation starts a fresh one.

Reductions inside ``conv2d`` and ``dense`` accumulate in float64 and round to
float32 on output.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32
BCE_EPS = 1e-7

# open-interval bounds for float32 probabilities
_P_LOW = float(np.finfo(np.float32).tiny)
_P_HIGH = float(np.nextafter(np.float32(1.0), np.float32(0.0)))
_P64_LOW = float(np.finfo(np.float64).tiny)
_P64_HIGH = float(np.nextafter(1.0, 0.0))


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Raised on misuse of the gradient tape."""


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class _Record:
    __slots__ = ("inputs", "output", "backward_fn", "name")

    def __init__(self, inputs, output, backward_fn, name):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.name = name


class Tape:
    """Ordered record of executed operations."""

    def __init__(self) -> None:
        self.records: list[_Record] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.records)

    def record(self, inputs, output, backward_fn, name) -> int:
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        self.records.append(_Record(inputs, output, backward_fn, name))
        return len(self.records) - 1


_local = threading.local()


def _thread_state():
    if not hasattr(_local, "tape"):
        _local.tape = Tape()
        _local.enabled = True
    return _local


def current_tape() -> Tape:
    state = _thread_state()
    if state.tape.consumed:
        state.tape = Tape()
    return state.tape


def is_grad_enabled() -> bool:
    return _thread_state().enabled


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording inside the block (inference, evaluation)."""
    state = _thread_state()
    prev = state.enabled
    state.enabled = False
    try:
        yield
    finally:
        state.enabled = prev


class Tensor:
    """A float32 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_pos", "__weakref__")

    def __init__(self, data, requires_grad: bool = False) -> None:
        arr = np.array(data, dtype=DTYPE, copy=True)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None
        self._pos = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def _tracked(self) -> bool:
        if self._tape is not None:
            return not self._tape.consumed
        return self.requires_grad

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # a few conveniences used by tests and losses
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def sum(self) -> "Tensor":
        return sum_all(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: BackwardFn, name: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(data, dtype=DTYPE)
    out.grad = None
    out._tape = None
    out._pos = -1
    out.requires_grad = False
    if is_grad_enabled() and any(t._tracked() for t in inputs):
        tape = current_tape()
        out.requires_grad = True
        out._tape = tape
        out._pos = tape.record(inputs, out, backward_fn, name)
    return out


def _needs_record(*inputs: Tensor) -> bool:
    return is_grad_enabled() and any(t._tracked() for t in inputs)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), backward_fn, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None
    ad, bd = a.data.astype(np.float64), b.data.astype(np.float64)

    def backward_fn(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _result(out, (a, b), backward_fn, "mul")


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.astype(np.float64).sum())

    def backward_fn(g):
        return (np.broadcast_to(g, x.shape).astype(np.float64),)

    return _result(out, (x,), backward_fn, "sum")


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.data.astype(np.float64).mean())

    def backward_fn(g):
        return (np.full(x.shape, float(g) / n),)

    return _result(out, (x,), backward_fn, "mean")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None

    def backward_fn(g):
        return (g.reshape(x.shape),)

    return _result(out, (x,), backward_fn, "reshape")


def flatten(x: Tensor) -> Tensor:
    """Collapse every axis after the batch axis."""
    return reshape(x, (x.shape[0], -1))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward_fn(g):
        return (g * mask,)

    return _result(np.where(mask, x.data, 0.0), (x,), backward_fn, "relu")


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function in float64, never overflowing and kept inside (0, 1)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return np.clip(out, _P64_LOW, _P64_HIGH)


def sigmoid(x: Tensor) -> Tensor:
    s = stable_sigmoid(x.data)
    # float32 rounds sigmoid(x) to exactly 1.0 once x > ~17; keep outputs inside (0, 1)
    out = np.clip(s, _P_LOW, _P_HIGH)

    def backward_fn(g):
        return (g * s * (1.0 - s),)

    return _result(out, (x,), backward_fn, "sigmoid")


def abs_diff(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"abs_diff: shapes differ, {a.shape} vs {b.shape}")
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    sign = np.sign(diff)

    def backward_fn(g):
        return g * sign, -g * sign

    return _result(np.abs(a.data - b.data), (a, b), backward_fn, "abs_diff")


# ----------------------------------------------------------------- layers


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate ``x`` [N,C,H,W] with ``kernel`` [K,C,R,S] and add ``bias`` [K]."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    k, kc, r, s = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d: kernel {kernel.shape} expects {kc} channels, input {x.shape} has {c}")
    if bias.shape != (k,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} padding={padding}")
    if r > h + 2 * padding or s > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kernel.shape} larger than padded input {x.shape} (padding {padding})")
    ho = conv_output_size(h, r, stride, padding)
    wo = conv_output_size(w, s, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (r, s), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * r * s).astype(np.float64)
    wmat = kernel.data.reshape(k, -1).astype(np.float64)
    out = cols @ wmat.T + bias.data.astype(np.float64)
    out = out.reshape(n, ho, wo, k).transpose(0, 3, 1, 2)

    if not _needs_record(x, kernel, bias):
        return _result(out, (x, kernel, bias), None, "conv2d")

    hp, wp = xp.shape[2], xp.shape[3]

    def backward_fn(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, k).astype(np.float64)
        dk = (gm.T @ cols).reshape(kernel.shape)
        db = gm.sum(axis=0)
        dx = None
        if x._tracked():
            dcols = (gm @ wmat).reshape(n, ho, wo, c, r, s)
            dxp = np.zeros((n, c, hp, wp))
            for i in range(r):
                for j in range(s):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            dx = dxp[:, :, padding:padding + h, padding:padding + w]
        return dx, dk, db

    return _result(out, (x, kernel, bias), backward_fn, "conv2d")


def maxpool2d(x: Tensor, window: int, stride: int) -> Tensor:
    """Window maximum; ties resolve to the first cell in row-major order."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d: expected 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if window < 1 or stride < 1:
        raise ShapeError(f"maxpool2d: invalid window={window} stride={stride}")
    if window > h or window > w:
        raise ShapeError(f"maxpool2d: window {window} exceeds spatial extent {h}x{w}")
    ho = conv_output_size(h, window, stride, 0)
    wo = conv_output_size(w, window, stride, 0)
    win = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    win = win.reshape(n, c, ho, wo, window * window)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    if not _needs_record(x):
        return _result(out, (x,), None, "maxpool2d")

    rows = np.arange(ho)[:, None] * stride + arg // window
    cols = np.arange(wo)[None, :] * stride + arg % window
    base = (np.arange(n)[:, None, None, None] * c + np.arange(c)[None, :, None, None]) * (h * w)
    flat = (base + rows * w + cols).reshape(-1)

    def backward_fn(g):
        dx = np.bincount(flat, weights=g.reshape(-1).astype(np.float64), minlength=x.size)
        return (dx.reshape(x.shape),)

    return _result(out, (x,), backward_fn, "maxpool2d")


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` for x [N,D], weight [D,E], bias [E]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense: bias {bias.shape} incompatible with weight {weight.shape}")
    xd = x.data.astype(np.float64)
    wd = weight.data.astype(np.float64)
    out = xd @ wd + bias.data.astype(np.float64)

    def backward_fn(g):
        g = g.astype(np.float64)
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return _result(out, (x, weight, bias), backward_fn, "dense")


def bce_loss(p: Tensor, y: Tensor) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped to [eps, 1 - eps]."""
    if p.shape != y.shape:
        raise ShapeError(f"bce_loss: prediction {p.shape} and target {y.shape} differ")
    yd = y.data.astype(np.float64)
    if not np.all((yd == 0.0) | (yd == 1.0)):
        raise ValueError("bce_loss: targets must be 0 or 1")
    pd = p.data.astype(np.float64)
    if np.any((pd < 0.0) | (pd > 1.0)):  # NaN passes through so train() can report it
        raise ValueError("bce_loss: predictions must lie in [0, 1]")
    pc = np.clip(pd, BCE_EPS, 1.0 - BCE_EPS)
    n = pd.size
    loss = -(yd * np.log(pc) + (1.0 - yd) * np.log(1.0 - pc)).mean()

    def backward_fn(g):
        # straight-through at the clamp: saturated wrong answers still get a gradient
        return float(np.asarray(g).reshape(())) * (pc - yd) / (pc * (1.0 - pc)) / n, None

    return _result(np.asarray(loss), (p, y), backward_fn, "bce_loss")


# --------------------------------------------------------------- backward


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tracked tensor that ``loss`` depends on.

    Gradients accumulate into existing ``.grad`` buffers.  The tape that
    recorded ``loss`` is consumed; a second call raises :class:`TapeError`.
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        if not loss.requires_grad:
            raise TapeError("loss was not produced by a recorded forward pass")
        _accumulate(loss, np.ones(loss.shape))
        return
    if tape.consumed:
        raise TapeError("tape already consumed; run the forward pass again before backward")

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    touched: dict[int, Tensor] = {id(loss): loss}
    for rec in reversed(tape.records[: loss._pos + 1]):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        _accumulate(rec.output, g)
        input_grads = rec.backward_fn(g)
        for t, gi in zip(rec.inputs, input_grads):
            if gi is None or not t._tracked():
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=np.float64)
                touched[key] = t
    for key, g in grads.items():
        _accumulate(touched[key], g)
    tape.consumed = True
    tape.records.clear()


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=np.float64).reshape(t.shape)
    if t.grad is None:
        t.grad = g.astype(DTYPE)
    else:
        t.grad = (t.grad.astype(np.float64) + g).astype(DTYPE)
