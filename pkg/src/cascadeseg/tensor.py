"""Reverse-mode automatic differentiation over dense N-d float arrays.

A Tensor wraps a numpy array plus an optional graph node recording how it
was produced. Calling backward() on a scalar walks the graph once in
reverse topological order, accumulates gradients additively into every
tensor that requires them, then frees the graph: intermediate gradient
buffers are dropped and a second backward over the same graph raises.

Gradient bookkeeping is deliberately simple so that memory accounting
stays honest: an op's backward closure recomputes whatever it needs from
the tensors it already references (inputs/outputs) and never stashes
hidden full-size buffers. AllocationLog scopes observe every Tensor
construction, which is what the byte census is built on.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)

# module-level autograd switch, manipulated only via no_grad()
_grad_enabled = True

# stack of active AllocationLog scopes
_alloc_logs: list["AllocationLog"] = []


class GraphConsumedError(RuntimeError):
    """Raised when backward() is called on an already-freed graph."""


class ShapeError(ValueError):
    """Raised on operand shape/dtype mismatches; message names the op."""


class Node:
    """One graph edge bundle: the inputs of an op and its vjp closure."""

    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op, inputs, backward_fn):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    """Dense float array with optional gradient tracking.

    grad is None until backward (or zero_grads) touches the tensor;
    accumulation is additive, callers zero between optimization steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        # inside a no-grad scope nothing tracks gradients
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.grad = None
        self.node = None
        self._consumed = False
        for log in _alloc_logs:
            log._record(self)

    # ---- basic introspection ----

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Same values, no graph participation. Shares the data buffer."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out.node = None
        out._consumed = False
        return out

    # ---- operator sugar ----

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow_scalar(self, exponent)

    def __getitem__(self, index):
        return slice_tensor(self, index)

    def sum(self, axes=None, keepdims: bool = False):
        return tensor_sum(self, axes, keepdims)

    def mean(self):
        return tensor_mean(self)

    def max(self):
        return tensor_max(self)

    def log(self):
        return log(self)

    def exp(self):
        return exp(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def greater(self, threshold: float) -> "Tensor":
        """Elementwise (self > threshold) as a 0/1 float mask, non-differentiable."""
        return Tensor(np.asarray(self.data > threshold, dtype=self.data.dtype))


@contextlib.contextmanager
def no_grad():
    """Scope under which ops build no graph and new tensors track no grads."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


# ---------------------------------------------------------------------------
# allocation census
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TensorRecord:
    shape: tuple
    act_bytes: int
    grad_bytes: int


class AllocationLog:
    """Context manager recording every Tensor constructed while active.

    grad_bytes of a record equals its act_bytes when the tensor requires a
    gradient (a buffer of identical size will exist during backward), else 0.
    """

    def __init__(self):
        self.records: list[TensorRecord] = []
        self.tensors: list[Tensor] = []

    def _record(self, t: Tensor):
        nbytes = int(t.data.nbytes)
        self.records.append(
            TensorRecord(
                shape=tuple(t.data.shape),
                act_bytes=nbytes,
                grad_bytes=nbytes if t.requires_grad else 0,
            )
        )
        self.tensors.append(t)

    def __enter__(self):
        _alloc_logs.append(self)
        return self

    def __exit__(self, *exc):
        _alloc_logs.remove(self)
        return False


@dataclass(frozen=True)
class CensusReport:
    records: tuple
    act_bytes: int
    grad_bytes: int

    @property
    def total_bytes(self) -> int:
        return self.act_bytes + self.grad_bytes


def byte_census(log: AllocationLog) -> CensusReport:
    """Sum activation and gradient bytes over everything the log saw."""
    act = sum(r.act_bytes for r in log.records)
    grad = sum(r.grad_bytes for r in log.records)
    return CensusReport(records=tuple(log.records), act_bytes=act, grad_bytes=grad)


# ---------------------------------------------------------------------------
# graph construction / backward
# ---------------------------------------------------------------------------


def _make(op: str, out_data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    req = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=req)
    if req:
        out.node = Node(op, inputs, backward_fn)
    return out


def _toposort(root: Tensor) -> list[Tensor]:
    # iterative post-order DFS, children visited in input order so the
    # traversal (and hence accumulation order) is deterministic
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, processed = stack.pop()
        if processed:
            topo.append(t)
            continue
        if id(t) in visited or t.node is None:
            continue
        visited.add(id(t))
        stack.append((t, True))
        for inp in reversed(t.node.inputs):
            stack.append((inp, False))
    return topo


def backward(loss: Tensor):
    """Reverse-mode sweep from a scalar loss.

    Accumulates into .grad of every reachable tensor with requires_grad,
    leaves keep their accumulators, intermediate grads and the graph are
    freed afterwards. Calling again on the same graph raises.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if loss.node is None:
        if loss._consumed:
            raise GraphConsumedError("backward: graph already consumed by a previous backward")
        if loss.requires_grad:
            seed = np.ones_like(loss.data)
            loss.grad = seed if loss.grad is None else loss.grad + seed
            return
        raise ValueError("backward: loss does not require gradients")

    topo = _toposort(loss)
    loss.grad = np.ones_like(loss.data)
    for t in reversed(topo):
        node = t.node
        gouts = node.backward_fn(t.grad)
        for inp, g in zip(node.inputs, gouts):
            if g is None or not inp.requires_grad:
                continue
            # never in-place: adopted arrays may be shared between inputs
            inp.grad = g if inp.grad is None else inp.grad + g
    for t in topo:
        t.node = None
        t._consumed = True
        t.grad = None  # only interior tensors are in topo; leaves keep grads


def zero_grads(tensors):
    """Reset accumulators to exact zero buffers."""
    for t in tensors:
        t.grad = np.zeros_like(t.data)


# ---------------------------------------------------------------------------
# elementwise / arithmetic ops
# ---------------------------------------------------------------------------


def _coerce_operand(op: str, a: Tensor, b):
    """Returns (b_tensor_or_none, b_scalar_or_none); exact shape match enforced."""
    if isinstance(b, Tensor):
        if a.data.shape != b.data.shape:
            raise ShapeError(f"{op}: shapes {a.data.shape} vs {b.data.shape}")
        if a.data.dtype != b.data.dtype:
            raise ShapeError(f"{op}: dtypes {a.data.dtype} vs {b.data.dtype}")
        return b, None
    if isinstance(b, (int, float, np.integer, np.floating)):
        return None, a.data.dtype.type(b)
    raise TypeError(f"{op}: unsupported operand type {type(b)!r}")


def add(a: Tensor, b):
    bt, bs = _coerce_operand("add", a, b)
    if bt is None:
        def bwd(g):
            return (g,)
        return _make("add", a.data + bs, (a,), bwd)

    def bwd(g):
        return g, g

    return _make("add", a.data + bt.data, (a, bt), bwd)


def sub(a: Tensor, b):
    bt, bs = _coerce_operand("sub", a, b)
    if bt is None:
        def bwd(g):
            return (g,)
        return _make("sub", a.data - bs, (a,), bwd)

    def bwd(g):
        return g, -g

    return _make("sub", a.data - bt.data, (a, bt), bwd)


def mul(a: Tensor, b):
    bt, bs = _coerce_operand("mul", a, b)
    if bt is None:
        def bwd(g):
            return (g * bs,)
        return _make("mul", a.data * bs, (a,), bwd)

    def bwd(g):
        return g * bt.data, g * a.data

    return _make("mul", a.data * bt.data, (a, bt), bwd)


def div(a: Tensor, b):
    bt, bs = _coerce_operand("div", a, b)
    if bt is None:
        inv = 1.0 / bs
        def bwd(g):
            return (g * inv,)
        return _make("div", a.data * inv, (a,), bwd)

    def bwd(g):
        return g / bt.data, -g * a.data / (bt.data * bt.data)

    return _make("div", a.data / bt.data, (a, bt), bwd)


def neg(a: Tensor):
    def bwd(g):
        return (-g,)

    return _make("neg", -a.data, (a,), bwd)


def pow_scalar(a: Tensor, exponent: float):
    p = float(exponent)

    def bwd(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make("pow", a.data ** p, (a,), bwd)


def log(a: Tensor):
    def bwd(g):
        return (g / a.data,)

    return _make("log", np.log(a.data), (a,), bwd)


def exp(a: Tensor):
    out_data = np.exp(a.data)

    def bwd(g):
        return (g * out_data,)

    return _make("exp", out_data, (a,), bwd)


def maximum_scalar(a: Tensor, threshold: float):
    """Elementwise max(a, threshold); gradient passes only where a > threshold."""
    t = float(threshold)
    out_data = np.maximum(a.data, t)

    def bwd(g):
        return (g * (a.data > t),)

    return _make("maximum", out_data, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def tensor_sum(a: Tensor, axes=None, keepdims: bool = False):
    if axes is None:
        ax = tuple(range(a.data.ndim))
    elif isinstance(axes, int):
        ax = (axes,)
    else:
        ax = tuple(axes)
    out_data = a.data.sum(axis=ax if ax else None, keepdims=keepdims)

    def bwd(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, ax) if ax else g
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _make("sum", np.asarray(out_data), (a,), bwd)


def tensor_mean(a: Tensor):
    n = a.data.size
    inv = 1.0 / n

    def bwd(g):
        return (np.full_like(a.data, float(g) * inv),)

    return _make("mean", np.asarray(a.data.mean()), (a,), bwd)


def tensor_max(a: Tensor):
    """Global max; gradient routes to the first max position in scan order."""
    flat = a.data.reshape(-1)
    idx = int(np.argmax(flat))
    out_data = np.asarray(flat[idx])

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga.reshape(-1)[idx] = float(g)
        return (ga,)

    return _make("max", out_data, (a,), bwd)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape):
    shape = tuple(shape)
    out_data = a.data.reshape(shape).copy()

    def bwd(g):
        return (g.reshape(a.data.shape),)

    return _make("reshape", out_data, (a,), bwd)


def slice_tensor(a: Tensor, index):
    out_data = np.array(a.data[index])

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[index] = g
        return (ga,)

    return _make("slice", out_data, (a,), bwd)


def pad(a: Tensor, pad_width):
    """Zero padding; pad_width is a per-axis list of (before, after)."""
    pw = tuple((int(lo), int(hi)) for lo, hi in pad_width)
    if len(pw) != a.data.ndim:
        raise ShapeError(f"pad: got {len(pw)} pad pairs for {a.data.ndim}-d tensor")
    out_data = np.pad(a.data, pw)
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(pw, a.data.shape))

    def bwd(g):
        return (g[crop].copy(),)

    return _make("pad", out_data, (a,), bwd)


def concat(tensors, axis: int = 0):
    tensors = tuple(tensors)
    if not tensors:
        raise ValueError("concat: empty input list")
    ref = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != len(ref) or any(s[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ShapeError(f"concat: shapes {ref} vs {s} differ off axis {axis}")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        outs = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            outs.append(g[tuple(sl)].copy())
        return tuple(outs)

    return _make("concat", out_data, tensors, bwd)
