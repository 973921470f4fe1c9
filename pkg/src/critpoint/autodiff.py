"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Usage::

    tape = Tape()
    x = tape.variable(np.array([1.0, 2.0]))
    y = (x * x).sum()
    grads = backward(tape, y)
    grads[x]        # array([2., 4.])

Operations whose inputs are all constants are evaluated eagerly and not
recorded, so frozen sub-graphs cost nothing on the backward pass.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import NumericError, ShapeError

POOL_KINDS = ("max", "average", "median", "sum")


class Tensor:
    __slots__ = ("data", "requires_grad", "tape", "__weakref__")

    def __init__(self, data, requires_grad=False, tape=None):
        self.data = data
        self.requires_grad = requires_grad
        self.tape = tape

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        kind = "variable" if self.requires_grad else "constant"
        return f"Tensor({kind}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul_scalar(_wrap(other, self.tape), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other, self.tape), mul_scalar(self, -1.0))

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return mul_scalar(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None):
        return reduce_sum(self, axis)


@dataclass
class Node:
    out: Tensor
    inputs: tuple
    backward: object  # callable(grad_out) -> tuple of grads (None = no grad)


@dataclass
class Tape:
    """Ordered record of executed primitives.

    Nodes are appended in execution order, which is a topological order,
    so walking the list backwards is a valid reverse traversal.
    """

    nodes: list = field(default_factory=list)

    def variable(self, array):
        arr = np.array(array, dtype=np.float64)
        _check_finite(arr, "variable")
        return Tensor(arr, True, self)

    def constant(self, array):
        return Tensor(np.asarray(array, dtype=np.float64), False, self)

    def record(self, data, inputs, backward_fn, op):
        _check_finite(data, op)
        if any(t.requires_grad for t in inputs):
            out = Tensor(data, True, self)
            self.nodes.append(Node(out, inputs, backward_fn))
            return out
        return Tensor(data, False, self)


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value produced by {op}")


def _wrap(x, tape):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64), False, tape)


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            return x.tape
    return Tape()


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------

def matmul(a, b):
    """``a @ b`` with ``a`` of shape (..., k) and ``b`` of shape (k, m)."""
    tape = _tape_of(a, b)
    a, b = _wrap(a, tape), _wrap(b, tape)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        ga = g @ b.data.T
        if a.ndim == 1:
            gb = np.outer(a.data, g)
        else:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return tape.record(out, (a, b), bwd, "matmul")


def add(a, b):
    """Elementwise sum; ``b`` may broadcast along leading dimensions."""
    tape = _tape_of(a, b)
    a, b = _wrap(a, tape), _wrap(b, tape)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    if out.shape != a.shape and out.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return tape.record(out, (a, b), bwd, "add")


def mul(a, b):
    """Elementwise product of equal-shape tensors."""
    tape = _tape_of(a, b)
    a, b = _wrap(a, tape), _wrap(b, tape)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")

    def bwd(g):
        return g * b.data, g * a.data

    return tape.record(a.data * b.data, (a, b), bwd, "mul")


def mul_scalar(a, s):
    tape = _tape_of(a)
    a = _wrap(a, tape)
    s = float(s)
    return tape.record(a.data * s, (a,), lambda g: (g * s,), "mul_scalar")


def relu(a):
    """ReLU. The backward rule is chosen at ``backward`` time (vanilla or guided)."""
    tape = _tape_of(a)
    a = _wrap(a, tape)
    out = np.maximum(a.data, 0.0)

    def bwd(g, guided=False):
        mask = a.data > 0.0
        if guided:
            mask &= g > 0.0
        return (g * mask,)

    bwd.is_relu = True
    return tape.record(out, (a,), bwd, "relu")


def reduce_sum(a, axis=None):
    tape = _tape_of(a)
    a = _wrap(a, tape)
    out = np.asarray(a.data.sum(axis=axis))

    def bwd(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return tape.record(out, (a,), bwd, "sum")


def reduce_points(a, kind):
    """Symmetric reduction over the point axis (-2).

    ``kind`` is one of ``max``, ``average``, ``median``, ``sum``. A 1-d input
    is treated as a single column. Max sends the gradient to the lowest
    index among ties; median of an even count averages the two middle
    elements and splits the gradient evenly between them.
    """
    tape = _tape_of(a)
    a = _wrap(a, tape)
    if kind not in POOL_KINDS:
        raise ValueError(f"unknown pooling kind {kind!r}")
    flat = a.ndim == 1
    x = a.data[:, None] if flat else a.data
    if x.ndim < 2 or x.shape[-2] == 0:
        raise ShapeError(f"reduce_points: need a nonempty point axis, got {a.shape}")
    n = x.shape[-2]

    if kind == "max":
        out, idx = _kernels.pool_max(x)

        def raw_bwd(g):
            gx = np.zeros(x.shape)
            np.put_along_axis(gx, idx[..., None, :], g[..., None, :], axis=-2)
            return gx
    elif kind == "median":
        out, lo, hi = _kernels.pool_median(x)

        def raw_bwd(g):
            gx = np.zeros(x.shape)
            half = 0.5 * g[..., None, :]
            np.put_along_axis(gx, lo[..., None, :], half, axis=-2)
            cur = np.take_along_axis(gx, hi[..., None, :], axis=-2)
            np.put_along_axis(gx, hi[..., None, :], cur + half, axis=-2)
            return gx
    elif kind == "average":
        out = x.mean(axis=-2)

        def raw_bwd(g):
            return np.broadcast_to(g[..., None, :] / n, x.shape).copy()
    else:
        out = x.sum(axis=-2)

        def raw_bwd(g):
            return np.broadcast_to(g[..., None, :], x.shape).copy()

    if flat:
        out = out[0]

        def bwd(g):
            return (raw_bwd(np.reshape(g, (1,)))[:, 0],)
    else:

        def bwd(g):
            return (raw_bwd(g),)

    return tape.record(np.asarray(out), (a,), bwd, f"reduce_{kind}")


def index(a, key):
    """Basic or integer-array indexing (``a[key]``); covers gather and masking."""
    tape = _tape_of(a)
    a = _wrap(a, tape)
    out = np.array(a.data[key])

    def bwd(g):
        ga = np.zeros(a.shape)
        np.add.at(ga, key, g)
        return (ga,)

    return tape.record(out, (a,), bwd, "index")


def scatter_rows(base, idx, rows):
    """Copy of ``base`` with rows ``idx`` of the point axis replaced by ``rows``."""
    tape = _tape_of(base, rows)
    base, rows = _wrap(base, tape), _wrap(rows, tape)
    idx = np.asarray(idx, dtype=np.int64)
    if rows.shape[-2] != len(idx) or rows.shape[-1] != base.shape[-1]:
        raise ShapeError(f"scatter_rows: rows {rows.shape} do not fit {len(idx)} slots of {base.shape}")
    out = base.data.copy()
    out[..., idx, :] = rows.data

    def bwd(g):
        gb = None
        if base.requires_grad:
            gb = g.copy()
            gb[..., idx, :] = 0.0
        return gb, g[..., idx, :]

    return tape.record(out, (base, rows), bwd, "scatter_rows")


def l2_norm(a):
    """Frobenius norm of the whole tensor; gradient at zero is defined as 0."""
    tape = _tape_of(a)
    a = _wrap(a, tape)
    nrm = float(np.sqrt(np.sum(a.data * a.data)))

    def bwd(g):
        if nrm == 0.0:
            return (np.zeros(a.shape),)
        return (g * a.data / nrm,)

    return tape.record(np.asarray(nrm), (a,), bwd, "l2_norm")


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of ``logits`` (B, C) or (C,) against integer labels."""
    tape = _tape_of(logits)
    logits = _wrap(logits, tape)
    z = logits.data if logits.ndim == 2 else logits.data[None]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if len(labels) != z.shape[0] or np.any(labels < 0) or np.any(labels >= z.shape[1]):
        raise ShapeError("softmax_cross_entropy: labels do not match logits")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(labels))
    loss = float(np.mean(logsum - shifted[rows, labels]))

    def bwd(g):
        p = np.exp(shifted - logsum[:, None])
        p[rows, labels] -= 1.0
        p *= g / len(labels)
        return (p.reshape(logits.shape),)

    return tape.record(np.asarray(loss), (logits,), bwd, "softmax_cross_entropy")


def chamfer(a, b):
    """Bidirectional Chamfer distance between point sets (n, 3) and (m, 3)."""
    tape = _tape_of(a, b)
    a, b = _wrap(a, tape), _wrap(b, tape)
    da, ia = _kernels.nearest(a.data, b.data)
    db, ib = _kernels.nearest(b.data, a.data)
    out = da.mean() + db.mean()

    def bwd(g):
        diff_a = a.data - b.data[ia]
        ua = np.divide(diff_a, da[:, None], out=np.zeros_like(diff_a), where=da[:, None] > 0)
        diff_b = b.data - a.data[ib]
        ub = np.divide(diff_b, db[:, None], out=np.zeros_like(diff_b), where=db[:, None] > 0)
        ga = ua * (g / len(da))
        gb = ub * (g / len(db))
        ga_total = ga.copy()
        np.add.at(ga_total, ib, -gb)
        gb_total = gb.copy()
        np.add.at(gb_total, ia, -ga)
        return ga_total, gb_total

    return tape.record(np.asarray(out), (a, b), bwd, "chamfer")


def hausdorff(a, b):
    """Bidirectional Hausdorff distance; gradient flows through the maximizing pair."""
    tape = _tape_of(a, b)
    a, b = _wrap(a, tape), _wrap(b, tape)
    da, ia = _kernels.nearest(a.data, b.data)
    db, ib = _kernels.nearest(b.data, a.data)
    i, j = int(np.argmax(da)), int(np.argmax(db))
    forward_wins = da[i] >= db[j]
    out = da[i] if forward_wins else db[j]

    def bwd(g):
        ga, gb = np.zeros(a.shape), np.zeros(b.shape)
        if out == 0.0:
            return ga, gb
        if forward_wins:
            u = (a.data[i] - b.data[ia[i]]) / out
            ga[i] += g * u
            gb[ia[i]] -= g * u
        else:
            u = (b.data[j] - a.data[ib[j]]) / out
            gb[j] += g * u
            ga[ib[j]] -= g * u
        return ga, gb

    return tape.record(np.asarray(out), (a, b), bwd, "hausdorff")


# --------------------------------------------------------------------------
# reverse pass
# --------------------------------------------------------------------------

def backward(tape, output, relu_mode="vanilla", retain=False):
    """Gradients of scalar ``output`` for every variable recorded on ``tape``.

    Returns a dict keyed by the leaf tensors. With ``relu_mode="guided"`` each
    ReLU passes gradient only where both its input and the incoming gradient
    are positive. The tape is cleared afterwards unless ``retain`` is set.
    """
    if output.data.size != 1 or output.data.ndim != 0:
        raise ShapeError(f"backward: output must be a scalar, got shape {output.shape}")
    if relu_mode not in ("vanilla", "guided"):
        raise ValueError(f"unknown relu_mode {relu_mode!r}")
    guided = relu_mode == "guided"
    grads = {id(output): np.ones(())}
    leaves = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        if getattr(node.backward, "is_relu", False):
            in_grads = node.backward(g, guided=guided)
        else:
            in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                leaves.setdefault(key, inp)
    internal = {id(node.out) for node in tape.nodes}
    result = {t: grads[key] for key, t in leaves.items() if key in grads and key not in internal}
    if output.requires_grad and id(output) not in internal:
        result[output] = np.ones(())
    if not retain:
        tape.nodes.clear()
    return _ResultDict(result)


class _ResultDict(dict):
    """Dict keyed by tensor identity that returns zeros for untouched leaves."""

    def __missing__(self, key):
        if isinstance(key, Tensor):
            return np.zeros(key.shape)
        raise KeyError(key)


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls(np.zeros(np.shape(params)), np.zeros(np.shape(params)), 0)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update. Pure: returns ``(new_params, new_state)``."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if not (params.shape == grads.shape == state.m.shape == state.v.shape):
        raise ShapeError(
            f"adam_step: shapes params {params.shape}, grads {grads.shape}, "
            f"moments {state.m.shape}/{state.v.shape} differ"
        )
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new, AdamState(m, v, t)
