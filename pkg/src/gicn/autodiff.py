"""Dense reverse-mode autodiff over numpy float64 arrays, plus Adam and checkpoints.

Every primitive records one node on the active :class:`Tape`. Nodes are
appended in creation order, which is already a topological order, so the
backward pass is a single reversed sweep.

    with Tape() as tape:
        y = sigmoid(x @ w)
        loss = mean(y)
    tape.backward(loss)
    w.grad
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of primitive applications."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf with requires_grad."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not np.isfinite(loss.data).all():
            raise NonFiniteError("loss is not finite")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        # whatever is left belongs to leaves (node outputs were consumed above)
        for node in self.nodes:
            for inp in node.inputs:
                g = grads.pop(id(inp), None)
                if g is not None:
                    inp.grad = g if inp.grad is None else inp.grad + g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs and _ACTIVE:
        _ACTIVE[-1].nodes.append(_Node(out, inputs, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --- elementwise binary -------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "minimum")
    pick_a = a.data <= b.data
    return _record(np.where(pick_a, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                              _unbroadcast(np.where(pick_a, 0.0, g), b.shape)))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "maximum")
    pick_a = a.data >= b.data
    return _record(np.where(pick_a, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                              _unbroadcast(np.where(pick_a, 0.0, g), b.shape)))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return _record(a.data @ b.data, (a, b), vjp)


# --- elementwise unary --------------------------------------------------------


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    on = a.data > 0.0  # subgradient at 0 is 0
    return _record(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    out[~pos] = e / (1.0 + e)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def absolute(a) -> Tensor:
    a = _as_tensor(a)
    return _record(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def power(a, p: float) -> Tensor:
    a = _as_tensor(a)
    if p == 0:
        return _record(np.ones_like(a.data), (a,), lambda g: (np.zeros_like(g),))
    return _record(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def clip(a, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _record(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def smooth_l1(a, beta: float = 1.0) -> Tensor:
    """Elementwise 0.5 d^2/beta for |d| < beta, |d| - 0.5 beta otherwise."""
    a = _as_tensor(a)
    d = a.data
    small = np.abs(d) < beta
    out = np.where(small, 0.5 * d * d / beta, np.abs(d) - 0.5 * beta)
    return _record(out, (a,), lambda g: (g * np.where(small, d / beta, np.sign(d)),))


# --- shape and reductions -----------------------------------------------------


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record(out, (a,), vjp)


def log_softmax(a) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return _record(out, (a,), lambda g: (g - sm * g.sum(axis=-1, keepdims=True),))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            n != m for i, (n, m) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _record(np.concatenate([t.data for t in tensors], axis=ax), tensors,
                   lambda g: tuple(np.split(g, sizes, axis=ax)))


def _scatter_add_rows(g: np.ndarray, idx: np.ndarray, shape) -> np.ndarray:
    """out[idx[i]] += g[i] (np.add.at is slow; bincount over flat offsets is not)."""
    flat = idx.reshape(-1) % shape[0]
    width = int(np.prod(shape[1:], dtype=np.int64))
    offs = (flat[:, None] * width + np.arange(width)[None, :]).reshape(-1)
    out = np.bincount(offs, weights=g.reshape(-1), minlength=shape[0] * width)
    return out.reshape(shape)


def neighbor_max(a, nbr) -> Tensor:
    """out[i, c] = max_j a[nbr[i, j], c]; gradient to the first maximizing neighbor."""
    a = _as_tensor(a)
    nbr = np.asarray(nbr, dtype=np.intp)
    if a.data.ndim != 2 or nbr.ndim != 2:
        raise ShapeError(f"neighbor_max: need 2-D input and table, got {a.shape}, {nbr.shape}")
    out = a.data[nbr[:, 0]]
    src = np.broadcast_to(nbr[:, :1], out.shape)
    for j in range(1, nbr.shape[1]):
        cand = a.data[nbr[:, j]]
        upd = cand > out
        out = np.where(upd, cand, out)
        src = np.where(upd, nbr[:, j:j + 1], src)

    def vjp(g):
        width = a.shape[1]
        offs = (src * width + np.arange(width)[None, :]).reshape(-1)
        return (np.bincount(offs, weights=g.reshape(-1), minlength=a.data.size).reshape(a.shape),)

    return _record(out, (a,), vjp)


def repeat_rows(a, n: int) -> Tensor:
    """Each row repeated n times consecutively."""
    a = _as_tensor(a)
    return _record(np.repeat(a.data, n, axis=0), (a,),
                   lambda g: (g.reshape(a.shape[0], n, *a.shape[1:]).sum(axis=1),))


def gather_rows(a, idx) -> Tensor:
    """``a[idx]`` along the first axis; idx may be any integer array."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for shape {a.shape}")

    def vjp(g):
        return (_scatter_add_rows(g, idx, a.shape),)

    return _record(a.data[idx], (a,), vjp)


def take_cols(a, cols) -> Tensor:
    a = _as_tensor(a)
    cols = np.asarray(cols, dtype=np.intp)

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, (Ellipsis, cols), g)
        return (out,)

    return _record(a.data[..., cols], (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def max_over(a, axis: int = 0) -> Tensor:
    """Max reduction; the gradient goes to the first (lowest-index) argmax only."""
    a = _as_tensor(a)
    ax = axis % a.data.ndim
    moved = np.moveaxis(a.data, ax, 0)
    if moved.shape[0] <= 64:
        # short axis: running max is much faster than a strided argmax
        out = moved[0].copy()
        arg = np.zeros(out.shape, dtype=np.intp)
        for j in range(1, moved.shape[0]):
            upd = moved[j] > out
            out[upd] = moved[j][upd]
            arg[upd] = j
    else:
        arg = np.argmax(moved, axis=0)
        out = np.take_along_axis(moved, arg[None], axis=0)[0]

    def vjp(g):
        full = np.zeros_like(moved)
        grid = np.indices(arg.shape, sparse=True)
        full[(arg, *grid)] = g
        return (np.moveaxis(full, 0, ax),)

    return _record(out, (a,), vjp)


def segment_max(a, segment_ids, n_segments: int) -> Tensor:
    """Row-wise max of ``a`` within each segment (rows sorted by segment id)."""
    a = _as_tensor(a)
    seg = np.asarray(segment_ids, dtype=np.intp)
    if seg.shape[0] != a.shape[0]:
        raise ShapeError(f"segment_max: {seg.shape[0]} ids for {a.shape[0]} rows")
    if np.any(np.diff(seg) < 0):
        raise ValueError("segment_max: segment ids must be sorted")
    counts = np.bincount(seg, minlength=n_segments)
    if np.any(counts == 0):
        raise ValueError("segment_max: empty segment")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    out = np.maximum.reduceat(a.data, starts, axis=0)
    # first row attaining the max within each segment, per column
    hit = a.data == out[seg]
    rows = np.arange(a.shape[0])[:, None]
    cand = np.where(hit, rows, a.shape[0])
    first = np.minimum.reduceat(cand, starts, axis=0)

    def vjp(g):
        full = np.zeros_like(a.data)
        cols = np.broadcast_to(np.arange(a.shape[1]), first.shape)
        full[first, cols] = g
        return (full,)

    return _record(out, (a,), vjp)


def sum_(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _record(out, (a,), vjp)


def mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis), 1.0 / n)


# --- checks --------------------------------------------------------------------


def gradient_check(fn: Callable[[Tensor], Tensor], x: np.ndarray, h: float = 1e-5) -> float:
    """Max over coordinates of |g_ad - g_fd| / max(1, |g_fd|), central differences."""
    x = np.array(x, dtype=DTYPE)
    probe = Tensor(x.copy(), requires_grad=True)
    with Tape() as tape:
        out = fn(probe)
    if not np.isfinite(out.data).all():
        raise NonFiniteError("gradient_check: function value is not finite")
    tape.backward(out)
    g_ad = probe.grad if probe.grad is not None else np.zeros_like(x)
    g_fd = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = fn(Tensor(x.copy())).item()
        flat[i] = old - h
        fm = fn(Tensor(x.copy())).item()
        flat[i] = old
        g_fd.reshape(-1)[i] = (fp - fm) / (2 * h)
    if not (np.isfinite(g_fd).all() and np.isfinite(g_ad).all()):
        raise NonFiniteError("gradient_check: non-finite gradient")
    return float(np.max(np.abs(g_ad - g_fd) / np.maximum(1.0, np.abs(g_fd))))


# --- optimizer -----------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``.

    All gradients are validated before any parameter moves.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad for {name!r} has shape {g.shape}, param {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"adam_step: non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# --- checkpoint container ------------------------------------------------------

_MAGIC = b"GICNCKPT"


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    """Magic, u64 index length, JSON index, then raw little-endian float64 blobs."""
    index = {"meta": meta or {}, "tensors": []}
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        index["tensors"].append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    head = json.dumps(index, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    index = json.loads(raw[16:16 + n])
    base = 16 + n
    out = {}
    for entry in index["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = base + entry["offset"]
        out[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=count,
                                           offset=start).reshape(entry["shape"]).astype(DTYPE)
    return out, index["meta"]
