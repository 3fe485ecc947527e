"""Minimal define-by-run reverse-mode autodiff on float64 numpy arrays.

Usage::

    with Tape() as tape:
        y = conv2d(x, w, b, padding=1)
        loss = tsum(y)
    gw, gb = backward(tape, loss, [w, b])

Operations record onto the active tape only when an input requires a
gradient; outside a tape everything runs as plain numpy.  Spatial ops take
``[C, H, W]`` or batched ``[B, C, H, W]`` inputs; the channel axis is always
``-3``.
"""
from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


_ACTIVE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("trajfuse_tape", default=None)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim and 0 in arr.shape:
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: tuple[Tape, int] | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.node = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    parents: tuple[Tensor, ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    out: Tensor
    parent_ids: tuple[int, ...] = field(default=())


class Tape:
    """Ordered op records; parents always precede children."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.nodes)

    def _tracks(self, t: Tensor) -> bool:
        return t.requires_grad and (t.node is None or t.node[0] is self)

    def record(self, op, parents, backward_fn, out_arr) -> Tensor:
        out = Tensor._wrap(out_arr)
        if any(self._tracks(p) for p in parents):
            ids = tuple(p.node[1] if p.node is not None else -1 for p in parents)
            out.requires_grad = True
            out.node = (self, len(self.nodes))
            self.nodes.append(Node(op, tuple(parents), backward_fn, out, ids))
        return out


def active_tape() -> Tape | None:
    return _ACTIVE.get()


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


def _emit(op, parents, backward_fn, out_arr) -> Tensor:
    _check_finite(out_arr, op)
    tape = _ACTIVE.get()
    if tape is None:
        return Tensor._wrap(out_arr)
    return tape.record(op, parents, backward_fn, out_arr)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from e
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), out)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}") from e
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), out)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from e
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _emit("mul", (a, b), bw, out)


def scale(x: Tensor, c: float) -> Tensor:
    return _emit("scale", (x,), lambda g: (g * c,), x.data * c)


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _emit("square", (x,), lambda g: (2.0 * xd * g,), xd * xd)


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky slope must be in [0, 1), got {slope}")
    pos = x.data >= 0
    out = np.where(pos, x.data, slope * x.data)
    return _emit("leaky_relu", (x,), lambda g: (np.where(pos, g, slope * g),), out)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity when not training or when ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a seeded generator")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep) / keep
    return _emit("dropout", (x,), lambda g: (g * mask,), x.data * mask)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("sum", (x,), lambda g: (np.broadcast_to(g, shape).copy(),), np.array(x.data.sum()))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _emit("mean", (x,), lambda g: (np.full(shape, float(g) / n),), np.array(x.data.mean()))


# ---------------------------------------------------------------------------
# channel-axis structure ops (axis -3)
# ---------------------------------------------------------------------------

def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_channels needs at least one part")
    parts = [as_tensor(p) for p in parts]
    ref = parts[0].shape
    for p in parts:
        if p.ndim < 3 or p.ndim != len(ref) or p.shape[:-3] != ref[:-3] or p.shape[-2:] != ref[-2:]:
            raise ShapeError(f"concat_channels: spatial/batch mismatch {p.shape} vs {ref}")
    if len(parts) == 1:
        return parts[0]
    sizes = [p.shape[-3] for p in parts]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([p.data for p in parts], axis=-3)

    def bw(g):
        return tuple(g[..., bounds[i] : bounds[i + 1], :, :] for i in range(len(parts)))

    return _emit("concat", tuple(parts), bw, out)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    c = x.shape[-3]
    if not 0 <= start < stop <= c:
        raise ShapeError(f"slice_channels [{start}:{stop}] out of range for {c} channels")
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[..., start:stop, :, :] = g
        return (full,)

    return _emit("slice", (x,), bw, x.data[..., start:stop, :, :].copy())


def cumsum_channels(x: Tensor) -> Tensor:
    def bw(g):
        return (np.flip(np.cumsum(np.flip(g, axis=-3), axis=-3), axis=-3),)

    return _emit("cumsum", (x,), bw, np.cumsum(x.data, axis=-3))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    span = n + 2 * padding - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"non-integer or empty conv output: ({n} + 2*{padding} - {k}) / {stride} + 1"
        )
    return span // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded cross-correlation.  ``x``: [C_in,H,W] or [B,C_in,H,W]."""
    if stride < 1 or padding < 0:
        raise ValueError(f"need stride >= 1 and padding >= 0, got {stride}, {padding}")
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be [C_out, C_in, kh, kw], got {kernel.shape}")
    co, ci, kh, kw = kernel.shape
    if bias.shape != (co,):
        raise ShapeError(f"bias shape {bias.shape} does not match C_out={co}")
    unbatched = x.ndim == 3
    if x.ndim not in (3, 4) or x.shape[-3] != ci:
        raise ShapeError(f"input {x.shape} does not match kernel C_in={ci}")
    xd = x.data[None] if unbatched else x.data
    b, _, h, w = xd.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    hp, wp = h + 2 * padding, w + 2 * padding
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = _kernels.im2col(xp, kh, kw, stride, ho, wo)
    wmat = kernel.data.reshape(co, ci * kh * kw)
    out = np.matmul(wmat, cols) + bias.data[:, None]
    out = out.reshape(b, co, ho, wo)
    if unbatched:
        out = out[0]

    def bw(g):
        g = g.reshape(b, co, ho * wo)
        gk = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(kernel.shape)
        gb = g.sum(axis=(0, 2))
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g)
            gxp = _kernels.col2im(gcols, ci, hp, wp, kh, kw, stride, ho, wo)
            gx = gxp[:, :, padding : padding + h, padding : padding + w]
            gx = gx[0] if unbatched else gx
        return gx, gk, gb

    return _emit("conv2d", (x, kernel, bias), bw, out)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor] = ()) -> list[np.ndarray]:
    """Reverse-accumulate d(loss)/d(param); disconnected params get zeros.

    Also stores each gradient on ``param.grad``.
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    if loss.node is None or loss.node[0] is not tape:
        raise TapeError("loss was not produced on this tape")
    node_grads: dict[int, np.ndarray] = {loss.node[1]: np.ones_like(loss.data)}
    leaf_grads: dict[int, np.ndarray] = {}
    for idx in range(loss.node[1], -1, -1):
        g = node_grads.pop(idx, None)
        if g is None:
            continue
        node = tape.nodes[idx]
        for parent, pid, pg in zip(node.parents, node.parent_ids, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pid >= 0 and parent.node is not None and parent.node[0] is tape:
                node_grads[pid] = node_grads[pid] + pg if pid in node_grads else pg
            elif parent.node is None:
                key = id(parent)
                leaf_grads[key] = leaf_grads[key] + pg if key in leaf_grads else np.array(pg, dtype=np.float64)
    out = []
    for p in params:
        g = leaf_grads.get(id(p))
        g = np.zeros_like(p.data) if g is None else g.reshape(p.shape)
        p.grad = g
        out.append(g)
    return out


def numerical_grad(f: Callable[[], float], arr: np.ndarray, index, h: float = 1e-5) -> float:
    """Central difference of ``f`` w.r.t. ``arr[index]`` (restored afterwards)."""
    orig = arr[index]
    arr[index] = orig + h
    fp = f()
    arr[index] = orig - h
    fm = f()
    arr[index] = orig
    return (fp - fm) / (2.0 * h)


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)
