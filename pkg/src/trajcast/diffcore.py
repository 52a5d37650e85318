"""Reverse-mode automatic differentiation over small dense float64 arrays.

Every forward primitive records a node on a Tape; `backward` walks the tape
in reverse recording order and accumulates adjoints, so gradients are
bit-reproducible for identical forward passes. Only float64 is supported.

Broadcasting is restricted to leading-batch expansion: two operands of an
elementwise op must have equal shapes, or the smaller shape must be a suffix
of the larger (plus plain scalars). Anything else is a shape error at the op.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "DiffError",
    "Tape",
    "Tensor",
    "backward",
    "forward_op",
    "gru_cell",
    "add",
    "sub",
    "mul",
    "matmul",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "softmax",
    "concat",
    "narrow",
    "sum",
    "mean",
    "square",
    "clip",
    "reshape",
]

# Aborting on the first non-finite value keeps failure diagnostics local to
# the op that produced it. Tests may disable this to probe error paths.
FINITE_CHECKS = True


class DiffError(ValueError):
    """Shape or domain violation in a tape operation."""


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


class Tensor:
    """A float64 array positioned on a tape.

    Leaves (parameters, recorded inputs) have no parents. Plain ndarrays and
    floats may be mixed into ops as constants; they are never recorded and
    receive no gradient.
    """

    __slots__ = ("value", "tape", "idx", "parents", "bwd")

    def __init__(self, value, tape, parents=(), bwd=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.bwd = bwd
        self.idx = tape._register(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, idx={self.idx})"

    # operator sugar; the module-level functions do the real work
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

    def sum(self):
        return sum(self)

    def mean(self):
        return mean(self)


class Tape:
    """Ordered record of primitive ops; topological by construction.

    With record=False the tape skips parent/adjoint bookkeeping, which makes
    pure-inference forward passes cheaper; backward then has nothing to walk.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self._nodes: list[Tensor] = []

    def _register(self, tensor: Tensor) -> int:
        self._nodes.append(tensor)
        return len(self._nodes) - 1

    def __len__(self):
        return len(self._nodes)

    def leaf(self, value) -> Tensor:
        """Record an input tensor that should receive a gradient."""
        return Tensor(_as_array(value), self)


class Gradients:
    """Adjoints from one backward pass, queried per tensor."""

    def __init__(self, grads: list):
        self._grads = grads

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        g = self._grads[tensor.idx]
        if g is None:
            return np.zeros(tensor.value.shape)
        return g


def backward(root: Tensor) -> Gradients:
    """Accumulate d(root)/d(node) for every node on root's tape.

    root must be scalar-valued. Fan-out contributions are summed in fixed
    reverse-recording order, so repeated runs are bit-identical.
    """
    if root.value.shape != ():
        raise DiffError(f"backward: root must be scalar, got shape {root.value.shape}")
    tape = root.tape
    if not tape.record:
        raise DiffError("backward: tape was created with record=False")
    nodes = tape._nodes
    grads: list = [None] * len(nodes)
    grads[root.idx] = np.ones(())
    for i in range(root.idx, -1, -1):
        g = grads[i]
        if g is None:
            continue
        node = nodes[i]
        if node.bwd is None:
            continue
        for parent, pg in zip(node.parents, node.bwd(g)):
            j = parent.idx
            if grads[j] is None:
                grads[j] = pg
            else:
                grads[j] = grads[j] + pg
    return Gradients(grads)


# ---------------------------------------------------------------------------
# op plumbing


def _tape_of(op: str, args) -> Tape:
    tape = None
    for a in args:
        if isinstance(a, Tensor):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise DiffError(f"{op}: operands live on different tapes")
    if tape is None:
        raise DiffError(f"{op}: at least one operand must be a Tensor")
    return tape


def _val(a) -> np.ndarray:
    return a.value if isinstance(a, Tensor) else _as_array(a)


def _check_finite(op: str, value: np.ndarray):
    if FINITE_CHECKS:
        # a single reduction: any NaN poisons the sum, +/-inf survives it
        if not math.isfinite(float(value.sum())):
            raise DiffError(f"{op}: produced non-finite values")


def _emit(op, tape, value, tensor_parents, bwd_builder, check=True):
    if check:
        _check_finite(op, value)
    if tape.record and tensor_parents:
        return Tensor(value, tape, tuple(tensor_parents), bwd_builder())
    return Tensor(value, tape)


def _ew_out_shape(op: str, sa, sb):
    """Output shape for an elementwise op under leading-batch expansion."""
    if sa == sb:
        return sa
    if sa == ():
        return sb
    if sb == ():
        return sa
    if len(sa) > len(sb) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise DiffError(f"{op}: shapes {sa} and {sb} are not leading-broadcastable")


def _reduce_to(grad: np.ndarray, shape) -> np.ndarray:
    """Collapse an output adjoint back to an operand's (smaller) shape."""
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    extra = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(extra)))


# ---------------------------------------------------------------------------
# primitives


def _binary_bwd(a, b, grad_a, grad_b):
    """Backward closure computing only the gradients of Tensor operands."""
    a_t, b_t = isinstance(a, Tensor), isinstance(b, Tensor)
    if a_t and b_t:
        return lambda g: (grad_a(g), grad_b(g))
    if a_t:
        return lambda g: (grad_a(g),)
    return lambda g: (grad_b(g),)


def add(a, b) -> Tensor:
    tape = _tape_of("add", (a, b))
    av, bv = _val(a), _val(b)
    _ew_out_shape("add", av.shape, bv.shape)

    def build():
        return _binary_bwd(a, b,
                           lambda g: _reduce_to(g, av.shape),
                           lambda g: _reduce_to(g, bv.shape))

    parents = [t for t in (a, b) if isinstance(t, Tensor)]
    return _emit("add", tape, av + bv, parents, build)


def sub(a, b) -> Tensor:
    tape = _tape_of("sub", (a, b))
    av, bv = _val(a), _val(b)
    _ew_out_shape("sub", av.shape, bv.shape)

    def build():
        return _binary_bwd(a, b,
                           lambda g: _reduce_to(g, av.shape),
                           lambda g: _reduce_to(-g, bv.shape))

    parents = [t for t in (a, b) if isinstance(t, Tensor)]
    return _emit("sub", tape, av - bv, parents, build)


def mul(a, b) -> Tensor:
    tape = _tape_of("mul", (a, b))
    av, bv = _val(a), _val(b)
    _ew_out_shape("mul", av.shape, bv.shape)

    def build():
        return _binary_bwd(a, b,
                           lambda g: _reduce_to(g * bv, av.shape),
                           lambda g: _reduce_to(g * av, bv.shape))

    parents = [t for t in (a, b) if isinstance(t, Tensor)]
    return _emit("mul", tape, av * bv, parents, build)


def matmul(a, b) -> Tensor:
    tape = _tape_of("matmul", (a, b))
    av, bv = _val(a), _val(b)
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2):
        raise DiffError(f"matmul: operands must be 1-D or 2-D, got {av.shape} @ {bv.shape}")
    if av.shape[-1] != bv.shape[0]:
        raise DiffError(f"matmul: inner dimensions mismatch {av.shape} @ {bv.shape}")
    value = av @ bv

    def build():
        if av.ndim == 2 and bv.ndim == 2:
            ga = lambda g: g @ bv.T
            gb = lambda g: av.T @ g
        elif av.ndim == 2 and bv.ndim == 1:
            ga = lambda g: g[:, None] * bv[None, :]
            gb = lambda g: av.T @ g
        elif av.ndim == 1 and bv.ndim == 2:
            ga = lambda g: bv @ g
            gb = lambda g: av[:, None] * g[None, :]
        else:
            ga = lambda g: g * bv
            gb = lambda g: g * av
        return _binary_bwd(a, b, ga, gb)

    parents = [t for t in (a, b) if isinstance(t, Tensor)]
    return _emit("matmul", tape, value, parents, build)


def _unary(op: str, x, value, grad_fn, check=True) -> Tensor:
    tape = _tape_of(op, (x,))

    def build():
        def bwd(g):
            return (grad_fn(g),)

        return bwd

    return _emit(op, tape, value, [x], build, check=check)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(_val(x))
    return _unary("tanh", x, out, lambda g: g * (1.0 - out * out))


def sigmoid(x: Tensor) -> Tensor:
    xv = _val(x)
    out = 1.0 / (1.0 + np.exp(-xv))
    return _unary("sigmoid", x, out, lambda g: g * out * (1.0 - out))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(_val(x))
    return _unary("exp", x, out, lambda g: g * out)


def log(x: Tensor) -> Tensor:
    xv = _val(x)
    if np.any(xv <= 0.0):
        raise DiffError("log: non-positive input")
    return _unary("log", x, np.log(xv), lambda g: g / xv)


def square(x: Tensor) -> Tensor:
    xv = _val(x)
    return _unary("square", x, xv * xv, lambda g: g * (2.0 * xv))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only where unclipped."""
    xv = _val(x)
    mask = (xv >= lo) & (xv <= hi)
    return _unary("clip", x, np.clip(xv, lo, hi), lambda g: g * mask)


def softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis, numerically stabilized."""
    xv = _val(x)
    if xv.ndim == 0:
        raise DiffError("softmax: scalar input has no axis to reduce")
    shifted = xv - xv.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (g - dot) * out

    return _unary("softmax", x, out, grad)


def sum(x: Tensor) -> Tensor:
    xv = _val(x)
    return _unary("sum", x, np.asarray(xv.sum()), lambda g: np.full(xv.shape, float(g)))


def mean(x: Tensor) -> Tensor:
    xv = _val(x)
    n = xv.size
    return _unary("mean", x, np.asarray(xv.mean()), lambda g: np.full(xv.shape, float(g) / n))


def reshape(x: Tensor, shape) -> Tensor:
    xv = _val(x)
    try:
        out = xv.reshape(shape)
    except ValueError as err:
        raise DiffError(f"reshape: cannot view {xv.shape} as {shape}") from err
    return _unary("reshape", x, out, lambda g: g.reshape(xv.shape), check=False)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` entries along `axis`."""
    xv = _val(x)
    if not (0 <= axis < xv.ndim):
        raise DiffError(f"narrow: axis {axis} out of range for shape {xv.shape}")
    if start < 0 or length <= 0 or start + length > xv.shape[axis]:
        raise DiffError(
            f"narrow: window [{start}, {start + length}) exceeds extent "
            f"{xv.shape[axis]} along axis {axis}"
        )
    index = [slice(None)] * xv.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = xv[index].copy()

    def grad(g):
        full = np.zeros(xv.shape)
        full[index] = g
        return full

    return _unary("narrow", x, out, grad, check=False)


def concat(parts, axis: int = 0) -> Tensor:
    parts = list(parts)
    tape = _tape_of("concat", parts)
    vals = [_val(p) for p in parts]
    nd = vals[0].ndim
    for v in vals[1:]:
        if v.ndim != nd or v.shape[:axis] + v.shape[axis + 1:] != vals[0].shape[:axis] + vals[0].shape[axis + 1:]:
            raise DiffError(f"concat: incompatible part shapes {[v.shape for v in vals]}")
    value = np.concatenate(vals, axis=axis)
    tensor_parents = [p for p in parts if isinstance(p, Tensor)]

    def build():
        offsets = np.cumsum([0] + [v.shape[axis] for v in vals])

        def bwd(g):
            out = []
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if isinstance(p, Tensor):
                    index = [slice(None)] * nd
                    index[axis] = slice(lo, hi)
                    out.append(g[tuple(index)])
            return out

        return bwd

    return _emit("concat", tape, value, tensor_parents, build, check=False)


_PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "softmax": softmax,
    "concat": lambda *xs: concat(xs),
    "slice": narrow,
    "sum": sum,
    "mean": mean,
    "square": square,
}


def forward_op(op: str, *inputs) -> Tensor:
    """Apply a primitive by id, recording it on the operands' tape."""
    try:
        fn = _PRIMITIVES[op]
    except KeyError:
        raise DiffError(f"unknown primitive op {op!r}") from None
    return fn(*inputs)


# ---------------------------------------------------------------------------
# gated recurrent cell


def gru_cell(x, h: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor) -> Tensor:
    """One gated-recurrent update; returns the new hidden state.

    Gate blocks are stacked [reset; update; candidate] along axis 0 of w_x,
    w_h and b, so hidden width H implies parameter shapes (3H, in), (3H, H)
    and (3H,).
    """
    hv = _val(h)
    hid = hv.shape[0]
    xv = _val(x)
    if w_x.value.shape != (3 * hid, xv.shape[0]) or w_h.value.shape != (3 * hid, hid) \
            or b.value.shape != (3 * hid,):
        raise DiffError(
            f"gru_cell: width mismatch x{xv.shape} h{hv.shape} "
            f"w_x{w_x.value.shape} w_h{w_h.value.shape} b{b.value.shape}"
        )
    pre_x = add(matmul(w_x, x), b)
    pre_h = matmul(w_h, h)
    gates = sigmoid(add(narrow(pre_x, 0, 0, 2 * hid), narrow(pre_h, 0, 0, 2 * hid)))
    r = narrow(gates, 0, 0, hid)
    z = narrow(gates, 0, hid, hid)
    cand = tanh(add(narrow(pre_x, 0, 2 * hid, hid), mul(r, narrow(pre_h, 0, 2 * hid, hid))))
    return add(cand, mul(z, sub(h, cand)))
