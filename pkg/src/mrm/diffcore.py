"""Dense float64 tensors with reverse-mode differentiation and Adam.

Deliberately small: only the operations the sequence model needs, each
with an explicit backward rule. Graphs are built eagerly during the
forward pass; a Tensor doubles as its graph node and is freed when the
output goes out of scope. Everything is double precision so gradient
checks against central finite differences are reliable.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_FORMAT_VERSION = 1


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (pure evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense float64 array plus the bookkeeping backward() needs.

    A Tensor is also a graph node: ``op`` tags the operation that produced
    it, ``_parents`` are its inputs and ``_backward`` pushes the output
    gradient into them. Leaves created with requires_grad=True accumulate
    gradients in ``.grad``; intermediate nodes hold transient gradients
    during a backward pass.
    """

    __slots__ = ("data", "grad", "requires_grad", "needs_grad", "op",
                 "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.needs_grad = requires_grad
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape})"

    def backward(self, seed=None):
        """Reverse-mode sweep from this node.

        Without a seed the node must be scalar. Visits every reachable
        node exactly once in reverse topological order; gradients
        accumulate (+=) so shared subgraphs receive summed contributions.
        """
        if seed is None:
            if self.data.shape != ():
                raise ShapeError(
                    f"backward() without seed needs a scalar, got shape {self.data.shape}")
            seed = 1.0
        # Iterative DFS: chains (one LSTM step per group) can exceed the
        # recursion limit.
        topo = []
        visited = {id(self)}
        stack = [(self, iter(self._parents))]
        while stack:
            node, parents = stack[-1]
            pushed = False
            for p in parents:
                if id(p) not in visited:
                    visited.add(id(p))
                    stack.append((p, iter(p._parents)))
                    pushed = True
                    break
            if not pushed:
                topo.append(node)
                stack.pop()
        self.grad = np.asarray(seed, dtype=np.float64)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # small amount of sugar; model code mostly calls the functions below
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def _accum(t: Tensor, g: np.ndarray):
    if t.needs_grad:
        if t.grad is None:
            t.grad = np.array(g, dtype=np.float64)  # copy: g may be shared
        else:
            t.grad += g


def _node(value, op: str, parents, backward) -> Tensor:
    out = Tensor(value)
    if _grad_enabled and any(p.needs_grad for p in parents):
        out.needs_grad = True
        out.op = op
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# elementwise and linear-algebra operations


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        def bwd(g):
            _accum(a, g)
            _accum(b, g)
    elif a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        # matrix plus row bias, the only broadcast supported
        def bwd(g):
            _accum(a, g)
            _accum(b, g.sum(axis=0))
    elif b.data.ndim == 0:
        def bwd(g):
            _accum(a, g)
            _accum(b, np.sum(g))
    else:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    return _node(a.data + b.data, "add", (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)
    return _node(a.data - b.data, "sub", (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, -g)
    return _node(-a.data, "neg", (a,), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)
    return _node(a.data * b.data, "mul", (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bwd(g):
        _accum(a, g * s)
    return _node(a.data * s, "scale", (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix/vector product for the four shape combinations in use.

    (m,k)@(k,n)->(m,n); (m,k)@(k,)->(m,); (k,)@(k,n)->(n,); (k,)@(k,)->().
    """
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2 and ad.shape[1] == bd.shape[0]:
        def bwd(g):
            _accum(a, g @ bd.T)
            _accum(b, ad.T @ g)
    elif ad.ndim == 2 and bd.ndim == 1 and ad.shape[1] == bd.shape[0]:
        def bwd(g):
            _accum(a, np.outer(g, bd))
            _accum(b, ad.T @ g)
    elif ad.ndim == 1 and bd.ndim == 2 and ad.shape[0] == bd.shape[0]:
        def bwd(g):
            _accum(a, bd @ g)
            _accum(b, np.outer(ad, g))
    elif ad.ndim == 1 and bd.ndim == 1 and ad.shape == bd.shape:
        def bwd(g):
            _accum(a, g * bd)
            _accum(b, g * ad)
    else:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _node(ad @ bd, "matmul", (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")

    def bwd(g):
        _accum(a, g.T)
    return _node(a.data.T.copy(), "transpose", (a,), bwd)


def concat(parts, axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat: no tensors given")
    nd = parts[0].data.ndim
    if any(p.data.ndim != nd for p in parts) or axis >= nd:
        raise ShapeError(
            f"concat: mixed ranks or bad axis {axis}: {[p.shape for p in parts]}")
    widths = [p.shape[axis] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(widths)])

    def bwd(g):
        for p, o, w in zip(parts, offsets, widths):
            piece = g[o:o + w] if axis == 0 else g[:, o:o + w]
            _accum(p, piece)
    return _node(np.concatenate([p.data for p in parts], axis=axis),
                 "concat", tuple(parts), bwd)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g):
        _accum(a, g * (1.0 - out * out))
    return _node(out, "tanh", (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def bwd(g):
        _accum(a, g * out * (1.0 - out))
    return _node(out, "sigmoid", (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        _accum(a, g * out)
    return _node(out, "exp", (a,), bwd)


def log(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, g / a.data)
    return _node(np.log(a.data), "log", (a,), bwd)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes through the unclipped region only."""
    keep = (a.data >= lo) & (a.data <= hi)

    def bwd(g):
        _accum(a, np.where(keep, g, 0.0))
    return _node(np.clip(a.data, lo, hi), "clip", (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, np.full(a.shape, float(g)))
    return _node(a.data.sum(), "sum_all", (a,), bwd)


# ---------------------------------------------------------------------------
# indexing / pooling


def gather_rows(table: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)

    def bwd(g):
        if table.needs_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx, g)
            _accum(table, gt)
    return _node(table.data[idx], "gather_rows", (table,), bwd)


def segment_sum(x: Tensor, segment_ids, n_segments: int) -> Tensor:
    """Sum rows of x into n_segments buckets given per-row bucket ids."""
    seg = np.asarray(segment_ids, dtype=np.intp)
    if seg.shape[0] != x.shape[0]:
        raise ShapeError(f"segment_sum: {seg.shape[0]} ids for {x.shape[0]} rows")
    out = np.zeros((n_segments,) + x.shape[1:])
    np.add.at(out, seg, x.data)

    def bwd(g):
        _accum(x, g[seg])
    return _node(out, "segment_sum", (x,), bwd)


def scale_rows(x: Tensor, row_factors) -> Tensor:
    """Multiply each row of x by a constant (non-differentiated) factor."""
    f = np.asarray(row_factors, dtype=np.float64)
    if f.shape != (x.shape[0],):
        raise ShapeError(f"scale_rows: {f.shape} factors for {x.shape} rows")

    def bwd(g):
        _accum(x, g * f[:, None])
    return _node(x.data * f[:, None], "scale_rows", (x,), bwd)


def slice_rows(x: Tensor, start: int, end: int) -> Tensor:
    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[start:end] = g
        _accum(x, gx)
    return _node(x.data[start:end].copy(), "slice_rows", (x,), bwd)


def row(x: Tensor, i: int) -> Tensor:
    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[i] = g
        _accum(x, gx)
    return _node(x.data[i].copy(), "row", (x,), bwd)


def slice_vec(x: Tensor, start: int, end: int) -> Tensor:
    if x.data.ndim != 1:
        raise ShapeError(f"slice_vec: expected a vector, got shape {x.shape}")

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[start:end] = g
        _accum(x, gx)
    return _node(x.data[start:end].copy(), "slice_vec", (x,), bwd)


def maxpool_rows(x: Tensor) -> Tensor:
    """Coordinatewise max over the rows of a non-empty matrix.

    Backward routes each coordinate's gradient to the argmax row; ties go
    to the lowest row index.
    """
    if x.data.ndim != 2 or x.shape[0] == 0:
        raise ShapeError(f"maxpool_rows: need a non-empty matrix, got shape {x.shape}")
    arg = np.argmax(x.data, axis=0)  # first occurrence = lowest index
    cols = np.arange(x.shape[1])

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[arg, cols] = g
        _accum(x, gx)
    return _node(x.data[arg, cols], "maxpool_rows", (x,), bwd)


def masked_softmax(scores: Tensor, mask) -> Tensor:
    """Softmax over the unmasked entries of a score vector.

    Masked entries get weight exactly 0 (treated as -inf before the
    softmax); the max is subtracted for stability.
    """
    m = np.asarray(mask, dtype=bool)
    if scores.data.ndim != 1 or m.shape != scores.shape:
        raise ShapeError(f"masked_softmax: scores {scores.shape} vs mask {m.shape}")
    if not m.any():
        raise ValueError("masked_softmax: every entry is masked")
    s = np.where(m, scores.data, -np.inf)
    e = np.exp(s - s.max())
    out = e / e.sum()

    def bwd(g):
        _accum(scores, out * (g - float(np.dot(g, out))))
    return _node(out, "masked_softmax", (scores,), bwd)


def masked_softmax_rows(scores: Tensor, mask) -> Tensor:
    """Row-wise masked softmax; every row needs at least one unmasked entry."""
    m = np.asarray(mask, dtype=bool)
    if scores.data.ndim != 2 or m.shape != scores.shape:
        raise ShapeError(f"masked_softmax_rows: scores {scores.shape} vs mask {m.shape}")
    if not m.any(axis=1).all():
        raise ValueError("masked_softmax_rows: a row is fully masked")
    s = np.where(m, scores.data, -np.inf)
    e = np.exp(s - s.max(axis=1, keepdims=True))
    out = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        _accum(scores, out * (g - dot))
    return _node(out, "masked_softmax_rows", (scores,), bwd)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Adam moment accumulators and hyperparameters for a named parameter set."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState):
    """One bias-corrected Adam update, in place on the parameter tensors.

    Raises FloatingPointError on any non-finite gradient so the caller can
    treat it as divergence (clipping is the caller's job).
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter '{name}'")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * factor
    return norm


# ---------------------------------------------------------------------------
# parameter checkpoints


def save_checkpoint(path, arrays: dict, meta: dict | None = None):
    """Write a flat name->array archive with a format-version header.

    Arrays are stored row-major in double precision; ``meta`` is an
    arbitrary JSON-serializable mapping kept alongside them.
    """
    payload = {
        "__format_version__": np.array([CHECKPOINT_FORMAT_VERSION], dtype=np.int64),
        "__meta__": np.array(json.dumps(meta or {}, sort_keys=True)),
    }
    for name, arr in arrays.items():
        if name.startswith("__"):
            raise ValueError(f"parameter name '{name}' clashes with reserved keys")
        arr = np.asarray(arr, dtype=np.float64)
        payload[name] = arr if arr.flags["C_CONTIGUOUS"] else np.ascontiguousarray(arr)
    np.savez(path, **payload)


def load_checkpoint(path):
    """Read a checkpoint back as (arrays, meta)."""
    with np.load(path) as f:
        version = int(f["__format_version__"][0])
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {version}")
        meta = json.loads(str(f["__meta__"]))
        arrays = {k: f[k] for k in f.files if not k.startswith("__")}
    return arrays, meta
