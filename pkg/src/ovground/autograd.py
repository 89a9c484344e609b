"""Dense float64 tensors with taped reverse-mode differentiation.

Every array is a C-contiguous float64 ndarray. Operations executed while a
Tape is active record backward closures onto it; `Tape.backward(loss)` walks
the records in reverse creation order (which is a topological order by
construction) and deposits gradients on every participating leaf.

Tapes are thread-local: independent tapes may live on different threads, but
a single tape must only be used from one thread.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_CLAMP = 1e-8  # lower clamp applied inside log() for KL / BCE


class ShapeError(ValueError):
    """Operand shapes are incompatible with the operation."""


class ContractError(ValueError):
    """An operation precondition was violated."""


_local = threading.local()


def _active() -> "Tape | None":
    return getattr(_local, "tape", None)


class Tensor:
    """A dense float64 array, optionally tracked on the active tape.

    `data` is always C-contiguous, so `data.ravel()` is the flat row-major
    buffer. `grad`, once populated by a backward pass, has the same shape.
    """

    __slots__ = ("data", "grad", "requires_grad", "node", "tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = arr.copy(order="C")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: int | None = None
        self.tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; the module-level functions do the real work
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Tape:
    """Ordered record of differentiable operations.

    Records are appended in execution order, so every record's parents have
    smaller node ids; one reverse sweep therefore visits each node exactly
    once.
    """

    def __init__(self):
        self._n_nodes = 0
        # (out_node, parent_node_ids, backward_fn)
        self._records: list[tuple[int, tuple[int, ...], Callable]] = []
        # leaves registered on this tape: node id -> Tensor
        self._leaves: dict[int, Tensor] = {}
        self._prev: "Tape | None" = None

    def __enter__(self) -> "Tape":
        self._prev = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self._records)

    def register(self, tensors: Iterable[Tensor]) -> None:
        """Pre-register leaves so backward() zero-fills them even if unused."""
        for t in tensors:
            if not t.requires_grad:
                raise ContractError("register expects requires_grad tensors")
            self.node_of(t)

    def node_of(self, t: Tensor) -> int:
        """Node id of `t` on this tape; -1 if it is an untracked constant."""
        if t.tape is self and t.node is not None:
            return t.node
        if t.requires_grad:
            nid = self._n_nodes
            self._n_nodes += 1
            t.tape = self
            t.node = nid
            self._leaves[nid] = t
            return nid
        return -1

    def record(self, out: Tensor, parents: tuple[int, ...], fn: Callable) -> None:
        nid = self._n_nodes
        self._n_nodes += 1
        out.tape = self
        out.node = nid
        out.requires_grad = True
        self._records.append((nid, parents, fn))

    def backward(self, loss: Tensor) -> None:
        """Populate `.grad` on every requires_grad leaf reachable from `loss`.

        Gradients accumulate additively, both across fan-out within the graph
        and across repeated backward calls.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
        if loss.tape is not self or loss.node is None:
            raise ContractError("loss is not a node on this tape")
        grads: list[np.ndarray | None] = [None] * self._n_nodes
        grads[loss.node] = np.ones_like(loss.data)
        for nid, parents, fn in reversed(self._records):
            g = grads[nid]
            if g is None:
                continue
            parent_grads = fn(g)
            for pid, pg in zip(parents, parent_grads):
                if pid < 0 or pg is None:
                    continue
                if grads[pid] is None:
                    grads[pid] = pg
                else:
                    grads[pid] = grads[pid] + pg
        for nid, leaf in self._leaves.items():
            g = grads[nid]
            if g is None:
                g = np.zeros_like(leaf.data)
            if leaf.grad is None:
                leaf.grad = np.ascontiguousarray(g)
            else:
                leaf.grad = leaf.grad + g


def backward(loss: Tensor) -> None:
    """Run the backward pass of the active tape from a scalar loss."""
    tape = _active()
    if tape is None:
        raise ContractError("backward() called with no active tape")
    tape.backward(loss)


# ---------------------------------------------------------------------------
# recording helper

def _touch(a: Tensor, b: Tensor | None = None):
    """Return (tape, node_a, node_b) if recording applies, else None."""
    tape = _active()
    if tape is None:
        return None
    pa = tape.node_of(a)
    pb = tape.node_of(b) if b is not None else -1
    if pa < 0 and pb < 0:
        return None
    return tape, pa, pb


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic (full numpy broadcasting; backward unbroadcasts)

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    rec = _touch(a, b)
    if rec:
        tape, pa, pb = rec
        sa, sb = a.data.shape, b.data.shape

        def fn(g):
            return (_unbroadcast(g, sa) if pa >= 0 else None,
                    _unbroadcast(g, sb) if pb >= 0 else None)

        tape.record(out, (pa, pb), fn)
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    rec = _touch(a, b)
    if rec:
        tape, pa, pb = rec
        sa, sb = a.data.shape, b.data.shape

        def fn(g):
            return (_unbroadcast(g, sa) if pa >= 0 else None,
                    _unbroadcast(-g, sb) if pb >= 0 else None)

        tape.record(out, (pa, pb), fn)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    rec = _touch(a, b)
    if rec:
        tape, pa, pb = rec
        da, db = a.data, b.data

        def fn(g):
            return (_unbroadcast(g * db, da.shape) if pa >= 0 else None,
                    _unbroadcast(g * da, db.shape) if pb >= 0 else None)

        tape.record(out, (pa, pb), fn)
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data)
    rec = _touch(a, b)
    if rec:
        tape, pa, pb = rec
        da, db = a.data, b.data

        def fn(g):
            ga = _unbroadcast(g / db, da.shape) if pa >= 0 else None
            gb = _unbroadcast(-g * da / (db * db), db.shape) if pb >= 0 else None
            return ga, gb

        tape.record(out, (pa, pb), fn)
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data)
    rec = _touch(a)
    if rec:
        tape, pa, _ = rec
        tape.record(out, (pa,), lambda g: (-g,))
    return out


def scale(a, c: float) -> Tensor:
    """Multiply by a python constant (no gradient w.r.t. the constant)."""
    a = as_tensor(a)
    c = float(c)
    out = Tensor(a.data * c)
    rec = _touch(a)
    if rec:
        tape, pa, _ = rec
        tape.record(out, (pa,), lambda g: (g * c,))
    return out


# ---------------------------------------------------------------------------
# linear algebra / structure

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {A.shape} and {B.shape}")
    out = Tensor(A @ B)
    rec = _touch(a, b)
    if rec:
        tape, pa, pb = rec

        def fn(g):
            return (g @ B.T if pa >= 0 else None,
                    A.T @ g if pb >= 0 else None)

        tape.record(out, (pa, pb), fn)
    return out


def convex_mix(parts, w) -> Tensor:
    """Weighted sum w[0]*parts[0] + ... over equally-shaped tensors."""
    parts = [as_tensor(p) for p in parts]
    w = as_tensor(w)
    if not parts:
        raise ShapeError("convex_mix needs at least one part")
    shp = parts[0].data.shape
    for p in parts[1:]:
        if p.data.shape != shp:
            raise ShapeError(
                f"convex_mix: parts disagree on shape ({p.data.shape} vs {shp})")
    if w.data.shape != (len(parts),):
        raise ShapeError(f"convex_mix: weights {w.data.shape} != ({len(parts)},)")
    stack = np.stack([p.data for p in parts])
    out = Tensor(np.tensordot(w.data, stack, axes=(0, 0)))
    tape = _active()
    if tape is not None:
        nodes = tuple(tape.node_of(p) for p in parts) + (tape.node_of(w),)
        if any(n >= 0 for n in nodes):
            wd = w.data

            def fn(g):
                gparts = tuple(g * wd[i] if nodes[i] >= 0 else None
                               for i in range(len(stack)))
                gw = None
                if nodes[-1] >= 0:
                    gw = np.array([float(np.sum(g * s)) for s in stack])
                return gparts + (gw,)

            tape.record(out, nodes, fn)
    return out


def affine(a, w, b) -> Tensor:
    """a @ w + b in one node; `b` broadcasts over rows."""
    a, w, b = as_tensor(a), as_tensor(w), as_tensor(b)
    A, W, Bv = a.data, w.data, b.data
    if A.ndim != 2 or W.ndim != 2 or A.shape[1] != W.shape[0]:
        raise ShapeError(f"affine: incompatible shapes {A.shape} and {W.shape}")
    if Bv.shape != (W.shape[1],):
        raise ShapeError(f"affine: bias shape {Bv.shape} != ({W.shape[1]},)")
    Y = A @ W
    Y += Bv
    out = Tensor(Y)
    tape = _active()
    if tape is not None:
        pa, pw, pb = tape.node_of(a), tape.node_of(w), tape.node_of(b)
        if pa >= 0 or pw >= 0 or pb >= 0:
            def fn(g):
                return (g @ W.T if pa >= 0 else None,
                        A.T @ g if pw >= 0 else None,
                        g.sum(axis=0) if pb >= 0 else None)

            tape.record(out, (pa, pw, pb), fn)
    return out


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    out = Tensor(a.data.T)
    rec = _touch(a)
    if rec:
        tape, pa, _ = rec
        tape.record(out, (pa,), lambda g: (np.ascontiguousarray(g.T),))
    return out


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    out = Tensor(a.data.reshape(shape))
    rec = _touch(a)
    if rec:
        tape, pa, _ = rec
        tape.record(out, (pa,), lambda g: (g.reshape(old),))
    return out


def take_rows(a, idx) -> Tensor:
    """Rows of a matrix gathered by integer index (embedding lookup)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if a.data.ndim != 2:
        raise ShapeError(f"take_rows expects a matrix, got shape {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise ContractError(
            f"take_rows: index out of range for {a.data.shape[0]} rows")
    out = Tensor(a.data[idx])
    rec = _touch(a)
    if rec:
        tape, pa, _ = rec
        nrows = a.data.shape[0]
        # plain scatter when no index repeats (np.add.at is slow)
        distinct = np.unique(idx).size == idx.size

        def fn(g):
            acc = np.zeros((nrows, g.shape[1]))
            if distinct:
                acc[idx] = g
            else:
                np.add.at(acc, idx, g)
            return (acc,)

        tape.record(out, (pa,), fn)
    return out


def take_per_row(a, idx) -> Tensor:
    """out[i] = a[i, idx[i]] for a matrix `a`."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if a.data.ndim != 2 or idx.shape != (a.data.shape[0],):
        raise ShapeError(
            f"take_per_row: got matrix {a.shape} and index shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[1]):
        raise ContractError("take_per_row: column index out of range")
    rows = np.arange(a.data.shape[0])
    out = Tensor(a.data[rows, idx])
    rec = _touch(a)
    if rec:
        tape, pa, _ = rec
        shp = a.data.shape

        def fn(g):
            acc = np.zeros(shp)
            acc[rows, idx] = g
            return (acc,)

        tape.record(out, (pa,), fn)
    return out


def stack_rows(parts: Iterable[Tensor]) -> Tensor:
    """Stack equal-length vectors into a matrix, one row per input."""
    parts = [as_tensor(p) for p in parts]
    if not parts or any(p.data.ndim != 1 for p in parts):
        raise ShapeError("stack_rows expects a non-empty list of vectors")
    out = Tensor(np.stack([p.data for p in parts]))
    tape = _active()
    if tape is not None:
        pids = tuple(tape.node_of(p) for p in parts)
        if any(p >= 0 for p in pids):
            def fn(g):
                return tuple(g[i] if pids[i] >= 0 else None for i in range(len(pids)))

            tape.record(out, pids, fn)
    return out


def concat_rows(parts: Iterable[Tensor]) -> Tensor:
    """Concatenate equal-width matrices along axis 0."""
    parts = [as_tensor(p) for p in parts]
    if not parts or any(p.data.ndim != 2 for p in parts):
        raise ShapeError("concat_rows expects a non-empty list of matrices")
    widths = {p.data.shape[1] for p in parts}
    if len(widths) != 1:
        raise ShapeError(f"concat_rows width mismatch: {sorted(widths)}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    tape = _active()
    if tape is not None:
        pids = tuple(tape.node_of(p) for p in parts)
        if any(p >= 0 for p in pids):
            offs = np.cumsum([0] + [p.data.shape[0] for p in parts])

            def fn(g):
                return tuple(g[offs[i]:offs[i + 1]] if pids[i] >= 0 else None
                             for i in range(len(pids)))

            tape.record(out, pids, fn)
    return out


def slice_cols(a, j0: int, j1: int) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2 or not (0 <= j0 < j1 <= a.data.shape[1]):
        raise ShapeError(f"slice_cols({j0},{j1}) invalid for shape {a.shape}")
    out = Tensor(a.data[:, j0:j1])
    rec = _touch(a)
    if rec:
        tape, pa, _ = rec
        shp = a.data.shape

        def fn(g):
            acc = np.zeros(shp)
            acc[:, j0:j1] = g
            return (acc,)

        tape.record(out, (pa,), fn)
    return out


# ---------------------------------------------------------------------------
# nonlinearities and reductions

def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis` (max-subtracted)."""
    a = as_tensor(a)
    x = a.data
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {a.shape}")
    m = np.max(x, axis=axis, keepdims=True)
    # fully-masked slices (all -inf) are a contract violation upstream
    e = np.exp(x - m)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(y)
    rec = _touch(a)
    if rec:
        tape, pa, _ = rec

        def fn(g):
            t = g * y
            dot = np.sum(t, axis=axis, keepdims=True)
            np.subtract(g, dot, out=t)
            np.multiply(t, y, out=t)
            return (t,)

        tape.record(out, (pa,), fn)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # exp(-|x|) never overflows; the two where-branches are the usual
    # stable forms 1/(1+e^-x) for x >= 0 and e^x/(1+e^x) for x < 0
    t = np.exp(-np.abs(x))
    denom = 1.0 + t
    y = np.where(x >= 0, 1.0 / denom, t / denom)
    out = Tensor(y)
    rec = _touch(a)
    if rec:
        tape, pa, _ = rec

        def fn(g):
            d = g * y
            np.multiply(d, 1.0 - y, out=d)
            return (d,)

        tape.record(out, (pa,), fn)
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    y = np.maximum(a.data, 0.0)
    out = Tensor(y)
    rec = _touch(a)
    if rec:
        tape, pa, _ = rec
        mask = (a.data > 0).astype(np.float64)

        def fn(g):
            return (g * mask,)

        tape.record(out, (pa,), fn)
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    out = Tensor(y)
    rec = _touch(a)
    if rec:
        tape, pa, _ = rec
        tape.record(out, (pa,), lambda g: (g * y,))
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data))
    rec = _touch(a)
    if rec:
        tape, pa, _ = rec
        d = a.data
        tape.record(out, (pa,), lambda g: (g / d,))
    return out


def powc(a, c: float) -> Tensor:
    """Elementwise power with a constant exponent."""
    a = as_tensor(a)
    c = float(c)
    out = Tensor(a.data ** c)
    rec = _touch(a)
    if rec:
        tape, pa, _ = rec
        d = a.data
        tape.record(out, (pa,), lambda g: (g * c * d ** (c - 1.0),))
    return out


def clip(a, lo: float | None, hi: float | None) -> Tensor:
    """Clamp values; gradient passes only where unclipped."""
    a = as_tensor(a)
    y = np.clip(a.data, lo, hi)
    out = Tensor(y)
    rec = _touch(a)
    if rec:
        tape, pa, _ = rec
        inside = np.ones(a.data.shape, dtype=bool)
        if lo is not None:
            inside &= a.data > lo
        if hi is not None:
            inside &= a.data < hi

        def fn(g):
            return (np.where(inside, g, 0.0),)

        tape.record(out, (pa,), fn)
    return out


def tsum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.sum(a.data, axis=axis, keepdims=keepdims))
    rec = _touch(a)
    if rec:
        tape, pa, _ = rec
        shp = a.data.shape

        def fn(g):
            if axis is None:
                return (np.broadcast_to(g, shp).copy(),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, shp).copy(),)

        tape.record(out, (pa,), fn)
    return out


def tmean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# fused blocks (hand-written backward; verified by finite differences)

def _ln_f(X, gamma, beta, eps=1e-5):
    """layer_norm forward on ndarrays; returns (out, xhat, inv)."""
    mu = np.mean(X, axis=-1, keepdims=True)
    xc = X - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = np.multiply(xc, inv, out=xc)  # xc is dead, reuse its buffer
    od = xhat * gamma
    od += beta
    return od, xhat, inv


def _ln_b(g, xhat, inv, gamma):
    """Backward for _ln_f; returns (gx, ggamma, gbeta), `g` untouched."""
    d = xhat.shape[-1]
    # (gy - m1 - xhat*m2) * inv, with the two temporaries updated in
    # place; op order matches the naive form
    gy = g * gamma
    m1 = np.mean(gy, axis=-1, keepdims=True)
    t = gy * xhat
    m2 = np.mean(t, axis=-1, keepdims=True)
    np.multiply(xhat, m2, out=t)
    np.subtract(gy, m1, out=gy)
    np.subtract(gy, t, out=gy)
    gx = np.multiply(gy, inv, out=gy)
    gg = np.einsum("rd,rd->d", g.reshape(-1, d), xhat.reshape(-1, d))
    gb = g.reshape(-1, d).sum(axis=0)
    return gx, gg, gb


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match width {d}")
    od, xhat, inv = _ln_f(x.data, gamma.data, beta.data, eps)
    out = Tensor(od)
    tape = _active()
    if tape is not None:
        px, pg, pb = tape.node_of(x), tape.node_of(gamma), tape.node_of(beta)
        if px >= 0 or pg >= 0 or pb >= 0:
            gdat = gamma.data

            def fn(g):
                gx, ggamma, gbeta = _ln_b(g, xhat, inv, gdat)
                return (gx if px >= 0 else None,
                        ggamma if pg >= 0 else None,
                        gbeta if pb >= 0 else None)

            tape.record(out, (px, pg, pb), fn)
    return out


def attention(q, k, v, n_heads: int, bias: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over row sets, with head splitting.

    `q` is (Rq, d), `k`/`v` are (Rk, d); `bias` is a constant (Rq, Rk) array
    of additive logits (0 / -inf) used to restrict which keys each query row
    may attend to. Returns (Rq, d).
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    Q, K, V = q.data, k.data, v.data
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise ShapeError("attention expects matrices")
    d = Q.shape[1]
    if K.shape[1] != d or V.shape != K.shape:
        raise ShapeError(
            f"attention: incompatible shapes q={Q.shape} k={K.shape} v={V.shape}")
    if d % n_heads != 0:
        raise ShapeError(f"attention: width {d} not divisible by {n_heads} heads")
    if bias is not None and bias.shape != (Q.shape[0], K.shape[0]):
        raise ShapeError(f"attention: bias shape {bias.shape} mismatch")
    dh = d // n_heads
    sc = 1.0 / math.sqrt(dh)
    outd = np.empty_like(Q)
    attns = []
    for h in range(n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        s = (Q[:, sl] @ K[:, sl].T) * sc
        if bias is not None:
            s = s + bias
        s -= s.max(axis=1, keepdims=True)
        e = np.exp(s)
        a = e / e.sum(axis=1, keepdims=True)
        attns.append(a)
        outd[:, sl] = a @ V[:, sl]
    out = Tensor(outd)
    tape = _active()
    if tape is not None:
        pq, pk, pv = tape.node_of(q), tape.node_of(k), tape.node_of(v)
        if pq >= 0 or pk >= 0 or pv >= 0:
            def fn(g):
                gq = np.zeros_like(Q) if pq >= 0 else None
                gk = np.zeros_like(K) if pk >= 0 else None
                gv = np.zeros_like(V) if pv >= 0 else None
                for h in range(n_heads):
                    sl = slice(h * dh, (h + 1) * dh)
                    a = attns[h]
                    gh = g[:, sl]
                    if gv is not None:
                        gv[:, sl] = a.T @ gh
                    if gq is not None or gk is not None:
                        da = gh @ V[:, sl].T
                        ds = (da - np.sum(da * a, axis=1, keepdims=True)) * a
                        if gq is not None:
                            gq[:, sl] = (ds @ K[:, sl]) * sc
                        if gk is not None:
                            gk[:, sl] = (ds.T @ Q[:, sl]) * sc
                return gq, gk, gv

            tape.record(out, (pq, pk, pv), fn)
    return out


def _battn_check(Q, K, V, n_heads, blocks, key_pad):
    """Shared shape/contract checks; returns the normalized key_pad."""
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise ShapeError("block_attention expects matrices")
    d = Q.shape[1]
    if K.shape[1] != d or V.shape != K.shape:
        raise ShapeError(
            f"block_attention: incompatible shapes q={Q.shape} k={K.shape} v={V.shape}")
    if blocks < 1 or Q.shape[0] % blocks or K.shape[0] % blocks:
        raise ShapeError(
            f"block_attention: rows {Q.shape[0]}/{K.shape[0]} not divisible "
            f"into {blocks} blocks")
    if d % n_heads != 0:
        raise ShapeError(f"block_attention: width {d} not divisible by {n_heads} heads")
    if key_pad is not None:
        key_pad = np.asarray(key_pad, dtype=bool)
        if key_pad.shape != (K.shape[0],):
            raise ShapeError(f"block_attention: key_pad shape {key_pad.shape}")
        if key_pad.reshape(blocks, K.shape[0] // blocks).all(axis=1).any():
            raise ContractError("block_attention: a block has no attendable key")
    return key_pad


def _battn_f(Q, K, V, n_heads, blocks, key_pad):
    """Per-block attention forward on ndarrays.

    Returns (out, weights, Q4, K4, V4, scale); the 4-D views are what the
    backward needs, weights are exactly zero at masked keys.
    """
    d = Q.shape[1]
    tq, tk = Q.shape[0] // blocks, K.shape[0] // blocks
    dh = d // n_heads
    sc = 1.0 / math.sqrt(dh)
    Q4 = Q.reshape(blocks, tq, n_heads, dh).transpose(0, 2, 1, 3)
    K4 = K.reshape(blocks, tk, n_heads, dh).transpose(0, 2, 1, 3)
    V4 = V.reshape(blocks, tk, n_heads, dh).transpose(0, 2, 1, 3)
    s = np.matmul(Q4, K4.transpose(0, 1, 3, 2)) * sc
    if key_pad is not None:
        s = np.where(key_pad.reshape(blocks, 1, 1, tk), -np.inf, s)
    s -= s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    a = e / e.sum(axis=-1, keepdims=True)
    out = np.matmul(a, V4).transpose(0, 2, 1, 3).reshape(blocks * tq, d)
    return out, a, Q4, K4, V4, sc


def _battn_b(g, a, Q4, K4, V4, sc):
    """Backward for _battn_f; returns (gq, gk, gv) as 2-D arrays."""
    blocks, n_heads, tq, dh = Q4.shape
    tk = K4.shape[2]
    d = n_heads * dh
    G4 = g.reshape(blocks, tq, n_heads, dh).transpose(0, 2, 1, 3)
    gv = np.matmul(a.transpose(0, 1, 3, 2), G4) \
        .transpose(0, 2, 1, 3).reshape(blocks * tk, d)
    da = np.matmul(G4, V4.transpose(0, 1, 3, 2))
    ds = (da - np.sum(da * a, axis=-1, keepdims=True)) * a
    gq = (np.matmul(ds, K4) * sc).transpose(0, 2, 1, 3).reshape(blocks * tq, d)
    gk = (np.matmul(ds.transpose(0, 1, 3, 2), Q4) * sc) \
        .transpose(0, 2, 1, 3).reshape(blocks * tk, d)
    return gq, gk, gv


def block_attention(q, k, v, n_heads: int, blocks: int,
                    key_pad: np.ndarray | None = None) -> Tensor:
    """Attention over row-stacked samples, batched per block.

    `q` is (blocks*Tq, d) and `k`/`v` are (blocks*Tk, d); block i's queries
    attend only block i's keys, so this equals `attention` under a
    block-diagonal 0/-inf bias but never materializes cross-block logits.
    `key_pad` is a bool (blocks*Tk,) mask of key rows to hide.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    Q, K, V = q.data, k.data, v.data
    key_pad = _battn_check(Q, K, V, n_heads, blocks, key_pad)
    outd, a, Q4, K4, V4, sc = _battn_f(Q, K, V, n_heads, blocks, key_pad)
    out = Tensor(outd)
    tape = _active()
    if tape is not None:
        pq, pk, pv = tape.node_of(q), tape.node_of(k), tape.node_of(v)
        if pq >= 0 or pk >= 0 or pv >= 0:
            def fn(g):
                gq, gk, gv = _battn_b(g, a, Q4, K4, V4, sc)
                return (gq if pq >= 0 else None,
                        gk if pk >= 0 else None,
                        gv if pv >= 0 else None)

            tape.record(out, (pq, pk, pv), fn)
    return out


def _conv_gather(X, frames, d_in):
    """Rows -> [prev | self | next] neighborhoods, zero-padded per sample.

    Gathering first makes the whole kernel-3 convolution one dense matmul
    against the flattened (3*d_in, d_out) kernel.
    """
    nb = X.shape[0] // frames
    Xc = np.zeros((nb, frames, 3 * d_in))
    X3 = X.reshape(nb, frames, d_in)
    Xc[:, 1:, :d_in] = X3[:, :-1]
    Xc[:, :, d_in:2 * d_in] = X3
    Xc[:, :-1, 2 * d_in:] = X3[:, 1:]
    return Xc.reshape(nb * frames, 3 * d_in)


def _conv_scatter(dc, frames, d_in, rows):
    """Adjoint of _conv_gather."""
    nb = rows // frames
    dc = dc.reshape(nb, frames, 3 * d_in)
    dX = dc[:, :, d_in:2 * d_in].copy()
    dX[:, :-1] += dc[:, 1:, :d_in]
    dX[:, 1:] += dc[:, :-1, 2 * d_in:]
    return dX.reshape(rows, d_in)


def temporal_conv(x, w, b, frames: int) -> Tensor:
    """Kernel-3 'same' convolution along time over stacked samples.

    `x` is (B*frames, d_in) with each consecutive block of `frames` rows one
    sample; edges are zero-padded per sample, so samples never leak into each
    other. `w` is (3, d_in, d_out), `b` is (d_out,).
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    X, W, Bv = x.data, w.data, b.data
    if X.ndim != 2 or X.shape[0] % frames != 0:
        raise ShapeError(f"temporal_conv: rows {X.shape} not a multiple of {frames}")
    if W.ndim != 3 or W.shape[0] != 3 or W.shape[1] != X.shape[1]:
        raise ShapeError(f"temporal_conv: kernel shape {W.shape} invalid")
    d_in, d_out = W.shape[1], W.shape[2]
    Xc = _conv_gather(X, frames, d_in)
    Wf = W.reshape(3 * d_in, d_out)
    Y = Xc @ Wf
    Y += Bv
    out = Tensor(Y)
    tape = _active()
    if tape is not None:
        px, pw, pb = tape.node_of(x), tape.node_of(w), tape.node_of(b)
        if px >= 0 or pw >= 0 or pb >= 0:
            def fn(g):
                gx = gw = gb = None
                if px >= 0:
                    gx = _conv_scatter(g @ Wf.T, frames, d_in, X.shape[0])
                if pw >= 0:
                    gw = (Xc.T @ g).reshape(W.shape)
                if pb >= 0:
                    gb = g.sum(axis=0)
                return gx, gw, gb

            tape.record(out, (px, pw, pb), fn)
    return out


# ---------------------------------------------------------------------------
# fused residual blocks
#
# One tape node per transformer-style block, algebraically identical to the
# composed layer_norm/affine/block_attention/temporal_conv graph (the
# equivalence is pinned by tests). Keeping each backward's intermediates
# alive in one closure instead of ~20 nodes saves enough dispatch and
# temporaries to matter on one core.

def _check_block_params(op, d, named):
    for name, t, shape in named:
        if t.data.shape != shape:
            raise ShapeError(f"{op}: {name} shape {t.data.shape}, expected {shape}")


def encoder_layer(x, ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo,
                  ln2_g, ln2_b, w1, b1, w2, b2, n_heads: int, blocks: int,
                  key_pad: np.ndarray | None = None) -> Tensor:
    """Pre-norm self-attention + feed-forward residual layer as one node.

    Computes, over row-stacked equal-length samples,
        h = layer_norm(x, ln1_g, ln1_b)
        a = block_attention(affine(h, wq, bq), affine(h, wk, bk),
                            affine(h, wv, bv), n_heads, blocks, key_pad)
        r = x + affine(a, wo, bo)
        y = r + affine(relu(affine(layer_norm(r, ln2_g, ln2_b), w1, b1)),
                       w2, b2)
    """
    tens = tuple(as_tensor(t) for t in (
        x, ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo,
        ln2_g, ln2_b, w1, b1, w2, b2))
    x = tens[0]
    X = x.data
    if X.ndim != 2:
        raise ShapeError(f"encoder_layer expects a matrix, got {X.shape}")
    d = X.shape[1]
    f = tens[13].data.shape[1] if tens[13].data.ndim == 2 else 0
    _check_block_params("encoder_layer", d, [
        ("ln1_g", tens[1], (d,)), ("ln1_b", tens[2], (d,)),
        ("wq", tens[3], (d, d)), ("bq", tens[4], (d,)),
        ("wk", tens[5], (d, d)), ("bk", tens[6], (d,)),
        ("wv", tens[7], (d, d)), ("bv", tens[8], (d,)),
        ("wo", tens[9], (d, d)), ("bo", tens[10], (d,)),
        ("ln2_g", tens[11], (d,)), ("ln2_b", tens[12], (d,)),
        ("w1", tens[13], (d, f)), ("b1", tens[14], (f,)),
        ("w2", tens[15], (f, d)), ("b2", tens[16], (d,)),
    ])
    key_pad = _battn_check(X, X, X, n_heads, blocks, key_pad)
    (Wq, Bq, Wk, Bk, Wv, Bv, Wo, Bo) = (t.data for t in tens[3:11])
    W1, B1, W2, B2 = (t.data for t in tens[13:17])

    H, xhat1, inv1 = _ln_f(X, tens[1].data, tens[2].data)
    Q = H @ Wq
    Q += Bq
    K = H @ Wk
    K += Bk
    V = H @ Wv
    V += Bv
    A, attw, Q4, K4, V4, sc = _battn_f(Q, K, V, n_heads, blocks, key_pad)
    R = A @ Wo
    R += Bo
    R += X
    H2, xhat2, inv2 = _ln_f(R, tens[11].data, tens[12].data)
    Z = H2 @ W1
    Z += B1
    np.maximum(Z, 0.0, out=Z)  # post-relu; the mask is recoverable as Z > 0
    Y = Z @ W2
    Y += B2
    Y += R
    out = Tensor(Y)

    tape = _active()
    if tape is None:
        return out
    parents = tuple(tape.node_of(t) for t in tens)
    if all(p < 0 for p in parents):
        return out

    g1dat, g2dat = tens[1].data, tens[11].data

    def fn(g):
        gb2 = g.sum(axis=0)
        gw2 = Z.T @ g
        gZ = g @ W2.T
        np.multiply(gZ, (Z > 0.0).astype(np.float64), out=gZ)
        gb1 = gZ.sum(axis=0)
        gw1 = H2.T @ gZ
        gH2 = gZ @ W1.T
        gR, gg2, gb2ln = _ln_b(gH2, xhat2, inv2, g2dat)
        gR += g  # residual: y = r + ffn(r)
        gbo = gR.sum(axis=0)
        gwo = A.T @ gR
        gA = gR @ Wo.T
        gQ, gK, gV = _battn_b(gA, attw, Q4, K4, V4, sc)
        gbq = gQ.sum(axis=0)
        gwq = H.T @ gQ
        gbk = gK.sum(axis=0)
        gwk = H.T @ gK
        gbv = gV.sum(axis=0)
        gwv = H.T @ gV
        gH = gQ @ Wq.T
        gH += gK @ Wk.T
        gH += gV @ Wv.T
        gX, gg1, gb1ln = _ln_b(gH, xhat1, inv1, g1dat)
        gX += gR  # residual: r = x + attn(x)
        return (gX, gg1, gb1ln, gwq, gbq, gwk, gbk, gwv, gbv, gwo, gbo,
                gg2, gb2ln, gw1, gb1, gw2, gb2)

    tape.record(out, parents, fn)
    return out


def cross_attn_conv_layer(x, q, ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo,
                          lnc_g, lnc_b, conv_w, conv_b, ln2_g, ln2_b,
                          n_heads: int, blocks: int, frames: int,
                          key_pad: np.ndarray | None = None) -> Tensor:
    """Cross-attention + temporal-conv residual block closed by a norm.

    One node computing
        h = layer_norm(x, ln1_g, ln1_b)
        a = block_attention(affine(h, wq, bq), affine(q, wk, bk),
                            affine(q, wv, bv), n_heads, blocks, key_pad)
        r = x + affine(a, wo, bo)
        s = r + relu(temporal_conv(layer_norm(r, lnc_g, lnc_b),
                                   conv_w, conv_b, frames))
        y = layer_norm(s, ln2_g, ln2_b)
    where `x` stacks `blocks` samples of `frames` rows each and `q` stacks
    the matching text rows.
    """
    tens = tuple(as_tensor(t) for t in (
        x, q, ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo,
        lnc_g, lnc_b, conv_w, conv_b, ln2_g, ln2_b))
    x, q = tens[0], tens[1]
    X, Qt = x.data, q.data
    if X.ndim != 2 or Qt.ndim != 2:
        raise ShapeError("cross_attn_conv_layer expects matrices")
    d = X.shape[1]
    if X.shape[0] != blocks * frames:
        raise ShapeError(
            f"cross_attn_conv_layer: {X.shape[0]} rows != "
            f"{blocks} blocks x {frames} frames")
    _check_block_params("cross_attn_conv_layer", d, [
        ("ln1_g", tens[2], (d,)), ("ln1_b", tens[3], (d,)),
        ("wq", tens[4], (d, d)), ("bq", tens[5], (d,)),
        ("wk", tens[6], (d, d)), ("bk", tens[7], (d,)),
        ("wv", tens[8], (d, d)), ("bv", tens[9], (d,)),
        ("wo", tens[10], (d, d)), ("bo", tens[11], (d,)),
        ("lnc_g", tens[12], (d,)), ("lnc_b", tens[13], (d,)),
        ("conv_w", tens[14], (3, d, d)), ("conv_b", tens[15], (d,)),
        ("ln2_g", tens[16], (d,)), ("ln2_b", tens[17], (d,)),
    ])
    key_pad = _battn_check(X, Qt, Qt, n_heads, blocks, key_pad)
    (Wq, Bq, Wk, Bk, Wv, Bv, Wo, Bo) = (t.data for t in tens[4:12])
    Wc, Bc = tens[14].data, tens[15].data
    Wcf = Wc.reshape(3 * d, d)

    H, xhat1, inv1 = _ln_f(X, tens[2].data, tens[3].data)
    Q = H @ Wq
    Q += Bq
    K = Qt @ Wk
    K += Bk
    V = Qt @ Wv
    V += Bv
    A, attw, Q4, K4, V4, sc = _battn_f(Q, K, V, n_heads, blocks, key_pad)
    R = A @ Wo
    R += Bo
    R += X
    C, xhatc, invc = _ln_f(R, tens[12].data, tens[13].data)
    Xc = _conv_gather(C, frames, d)
    Z = Xc @ Wcf
    Z += Bc
    np.maximum(Z, 0.0, out=Z)
    S = R + Z
    Y, xhat2, inv2 = _ln_f(S, tens[16].data, tens[17].data)
    out = Tensor(Y)

    tape = _active()
    if tape is None:
        return out
    parents = tuple(tape.node_of(t) for t in tens)
    if all(p < 0 for p in parents):
        return out

    g1dat, gcdat, g2dat = tens[2].data, tens[12].data, tens[16].data

    def fn(g):
        gS, gg2, gb2 = _ln_b(g, xhat2, inv2, g2dat)
        gZ = gS * (Z > 0.0).astype(np.float64)
        gcb = gZ.sum(axis=0)
        gcw = (Xc.T @ gZ).reshape(3, d, d)
        gC = _conv_scatter(gZ @ Wcf.T, frames, d, X.shape[0])
        gR, ggc, gbc = _ln_b(gC, xhatc, invc, gcdat)
        gR += gS  # residual: s = r + conv(r)
        gbo = gR.sum(axis=0)
        gwo = A.T @ gR
        gA = gR @ Wo.T
        gQ, gK, gV = _battn_b(gA, attw, Q4, K4, V4, sc)
        gbq = gQ.sum(axis=0)
        gwq = H.T @ gQ
        gbk = gK.sum(axis=0)
        gwk = Qt.T @ gK
        gbv = gV.sum(axis=0)
        gwv = Qt.T @ gV
        gQt = gK @ Wk.T
        gQt += gV @ Wv.T
        gH = gQ @ Wq.T
        gX, gg1, gb1 = _ln_b(gH, xhat1, inv1, g1dat)
        gX += gR  # residual: r = x + attn(x, q)
        return (gX, gQt, gg1, gb1, gwq, gbq, gwk, gbk, gwv, gbv, gwo, gbo,
                ggc, gbc, gcw, gcb, gg2, gb2)

    tape.record(out, parents, fn)
    return out


# ---------------------------------------------------------------------------
# composite losses

def kl_divergence(p, q, clamp: float = LOG_CLAMP) -> Tensor:
    """KL(p || q) along the last axis; mean over leading slices if 2-D.

    Inputs must be distributions: nonnegative, summing to 1 within 1e-6
    along the last axis. Entries are clamped to >= `clamp` inside the log.
    """
    p, q = as_tensor(p), as_tensor(q)
    if p.data.shape != q.data.shape:
        raise ShapeError(f"kl_divergence: shapes {p.shape} vs {q.shape}")
    for name, t in (("p", p), ("q", q)):
        if np.any(t.data < -1e-12):
            raise ContractError(f"kl_divergence: {name} has negative entries")
        sums = t.data.sum(axis=-1)
        if np.any(np.abs(sums - 1.0) > 1e-6):
            raise ContractError(f"kl_divergence: {name} does not sum to 1 within 1e-6")
    logratio = sub(log(clip(p, clamp, None)), log(clip(q, clamp, None)))
    per = tsum(mul(p, logratio), axis=-1)
    if per.data.ndim == 0:
        return per
    return tmean(per)


def bce(pred, target, clamp: float = LOG_CLAMP) -> Tensor:
    """Mean binary cross-entropy; predictions clamped to [clamp, 1-clamp]."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"bce: shapes {pred.shape} vs {target.shape}")
    if np.any((target.data != 0.0) & (target.data != 1.0)):
        raise ContractError("bce: target entries must be 0 or 1")
    p = clip(pred, clamp, 1.0 - clamp)
    t = target.data
    pos = mul(Tensor(t), log(p))
    negt = mul(Tensor(1.0 - t), log(sub(Tensor(np.float64(1.0)), p)))
    return neg(tmean(add(pos, negt)))
