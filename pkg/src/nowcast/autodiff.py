"""A small tape-based reverse-mode differentiation engine over numpy arrays.

Usage::

    with Tape():
        y = relu(conv2d(x, w, b))
        loss = mean(y)
    backward(loss)
    w.grad

Every op records a node on the innermost active tape when any input
requires a gradient. ``backward`` walks the tape once in reverse; a tape
cannot be replayed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim > 4:
            raise ValueError(f"tensors have at most 4 dims, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    op: str
    out: Tensor
    parents: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False


_TAPES: list[Tape] = []


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype or DEFAULT_DTYPE)


def _record(op: str, data: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor(data)
    if _TAPES and any(p.requires_grad for p in parents):
        tape = _TAPES[-1]
        out.requires_grad = True
        out._tape = tape
        tape.nodes.append(Node(op, out, tuple(parents), vjp))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# --- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_broadcast("add", a, b)
    return _record(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_broadcast("sub", a, b)
    return _record(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    b_is_scalar = not isinstance(b, Tensor) and np.ndim(b) == 0
    a = as_tensor(a)
    if b_is_scalar:
        c = np.asarray(b, dtype=a.dtype)
        return _record("mul", a.data * c, (a,), lambda g: (g * c,))
    b = as_tensor(b, like=a)
    _check_broadcast("mul", a, b)
    return _record(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _record("relu", np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    y = (0.5 * (1 + np.tanh(0.5 * x.data))).astype(x.dtype)
    return _record("sigmoid", y, (x,), lambda g: (g * y * (1 - y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _record("exp", y, (x,), lambda g: (g * y,))


# --- reductions and losses --------------------------------------------------


def mean(x: Tensor, axis=None) -> Tensor:
    m = np.mean(x.data, axis=axis, dtype=np.float64).astype(x.dtype)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype),)

    return _record("mean", np.asarray(m), (x,), vjp)


def total(x: Tensor) -> Tensor:
    s = np.asarray(np.sum(x.data, dtype=np.float64)).astype(x.dtype)
    return _record("sum", s, (x,), lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


def l1_distance(a: Tensor, b, mask: np.ndarray | None = None) -> Tensor:
    """Mean absolute difference, over ``mask`` cells when given (broadcast to a)."""
    b = as_tensor(b, like=a)
    if a.shape != b.shape:
        raise ValueError(f"l1_distance: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    w = np.ones(a.shape, dtype=a.dtype) if mask is None else np.broadcast_to(mask, a.shape).astype(a.dtype)
    count = float(w.sum(dtype=np.float64))
    if count == 0:
        raise ValueError("l1_distance: empty mask")
    val = np.asarray(np.sum(np.abs(diff) * w, dtype=np.float64) / count).astype(a.dtype)

    def vjp(g):
        d = np.sign(diff) * w * (g / count)
        return d.astype(a.dtype), (-d).astype(b.dtype)

    return _record("l1_distance", val, (a, b), vjp)


# --- linear algebra and shape ops ------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return _record(
        "matmul", a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g)
    )


def reshape(x: Tensor, shape) -> Tensor:
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return _record("reshape", y, (x,), lambda g: (g.reshape(x.shape),))


def take(x: Tensor, index) -> Tensor:
    """Basic (slice) indexing."""
    y = x.data[index]

    def vjp(g):
        out = np.zeros_like(x.data)
        out[index] = g
        return (out,)

    return _record("take", np.ascontiguousarray(y), (x,), vjp)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = tuple(xs)
    sizes = np.cumsum([t.shape[axis] for t in xs])[:-1]
    y = np.concatenate([t.data for t in xs], axis=axis)
    return _record("concat", y, xs, lambda g: tuple(np.split(g, sizes, axis=axis)))


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of the last two axes."""
    if x.ndim != 4:
        raise ValueError(f"upsample2x expects (B, C, H, W), got {x.shape}")
    y = x.data.repeat(2, axis=2).repeat(2, axis=3)
    b, c, h, w = x.shape
    return _record(
        "upsample2x", y, (x,),
        lambda g: (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),),
    )


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Cross-correlation with 'same' zero padding; (B,C,H,W) * (O,C,k,k)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d: expected 4-D input and kernel, got {x.shape}, {w.shape}")
    bsz, c, h, wd = x.shape
    o, c2, k, k2 = w.shape
    if c != c2 or k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d: kernel {w.shape} incompatible with input {x.shape}")
    if stride not in (1, 2) or h % stride or wd % stride:
        raise ValueError(f"conv2d: stride {stride} unsupported for input {x.shape}")
    if b is not None and b.shape != (o,):
        raise ValueError(f"conv2d: bias shape {b.shape} != ({o},)")
    p = k // 2
    ho, wo = h // stride, wd // stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * ho * wo, c * k * k)
    wmat = w.data.reshape(o, c * k * k)
    y = cols @ wmat.T
    if b is not None:
        y = y + b.data
    y = y.reshape(bsz, ho, wo, o).transpose(0, 3, 1, 2)
    parents = (x, w) if b is None else (x, w, b)

    def vjp(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gm.T @ cols).reshape(w.shape)
        dcols = (gm @ wmat).reshape(bsz, ho, wo, c, k, k)
        dxp = np.zeros_like(xp)
        for di in range(k):
            for dj in range(k):
                dxp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += (
                    dcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
                )
        gx = dxp[:, :, p:p + h, p:p + wd]
        if b is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0, dtype=np.float64).astype(b.dtype)

    return _record("conv2d", np.ascontiguousarray(y), parents, vjp)


def gaussian_sample(mu: Tensor, log_var: Tensor, noise) -> Tensor:
    """Reparameterised draw ``mu + exp(log_var / 2) * noise`` with external noise."""
    noise = np.asarray(noise, dtype=mu.dtype)
    if not (mu.shape == log_var.shape == noise.shape):
        raise ValueError(f"gaussian_sample: shapes {mu.shape}, {log_var.shape}, {noise.shape}")
    sd = np.exp(0.5 * log_var.data)
    return _record(
        "gaussian_sample", mu.data + sd * noise, (mu, log_var),
        lambda g: (g, g * noise * sd * 0.5),
    )


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or rate <= 0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1 - rate)
    return mul(x, Tensor(keep))


def custom(op: str, inputs: Sequence[Tensor], forward, vjp) -> Tensor:
    """Wrap an array-level function with a hand-written VJP as a tape node.

    ``forward(*arrays) -> (output, ctx)``; ``vjp(g, ctx) -> grads`` one per input.
    """
    inputs = tuple(inputs)
    out, ctx = forward(*(t.data for t in inputs))
    dtype = inputs[0].dtype
    return _record(
        op, np.asarray(out).astype(dtype), inputs,
        lambda g: [None if gi is None else np.asarray(gi).astype(t.dtype) for gi, t in zip(vjp(g, ctx), inputs)],
    )


# --- reverse pass -----------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d loss / d leaf into ``.grad`` of every tracked leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss is not tracked on any tape")
    if tape.consumed:
        raise TapeError("tape already consumed; run the forward pass again")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._tape is tape:
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else np.array(pg, copy=True)
            else:
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad = parent.grad + pg.astype(parent.dtype, copy=False)
    # a consumed tape is dead; drop its nodes so saved activations are freed promptly
    tape.nodes.clear()


# --- optimiser --------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.step += 1
    t = state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape, dtype=np.float64)
            state.v[name] = np.zeros(p.shape, dtype=np.float64)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * np.square(g, dtype=np.float64)
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        p -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)
    return params, state
