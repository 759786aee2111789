"""Dense 2-D float64 tensors with tape-based reverse-mode differentiation.

Every differentiable quantity in the package (encoder activations, loss
values) is a `Tensor`. Operations record their local gradient rule on the
active `Tape`; `backward` replays the tape in reverse and populates `.grad`
on every input that was marked `requires_grad`. Broadcasting is restricted
to scalars and row/column vectors against matrices.
"""

from __future__ import annotations

import threading

import numpy as np

from ._errors import ContractError, DimensionError, NumericError

_tls = threading.local()


def _tape_stack():
    if not hasattr(_tls, "stack"):
        _tls.stack = []
    return _tls.stack


def active_tape():
    """The innermost open Tape on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A rows x cols matrix of float64 with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got ndim={arr.ndim}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data[0, 0])

    def detach(self):
        """A gradient-free view of the same values."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        return out

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def zeros(rows, cols, requires_grad=False):
    return Tensor(np.zeros((rows, cols)), requires_grad=requires_grad)


def full(rows, cols, value, requires_grad=False):
    return Tensor(np.full((rows, cols), float(value)), requires_grad=requires_grad)


class Tape:
    """Append-only record of one forward pass.

    Each entry holds the output tensor, its operand tensors, and a rule
    mapping the output gradient to per-operand gradients. Used as a context
    manager; tapes nest per-thread.
    """

    def __init__(self):
        self._records = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tape stack corrupted: exiting a non-innermost tape")
        stack.pop()
        return False

    def record(self, output, inputs, rule):
        self._records.append((output, tuple(inputs), rule))

    def __len__(self):
        return len(self._records)


def _maybe_record(output, inputs, rule):
    tape = active_tape()
    if tape is None:
        return output
    if any(t.requires_grad for t in inputs):
        output.requires_grad = True
        tape.record(output, inputs, rule)
    return output


def backward(output, tape):
    """Populate `.grad` on every gradient-requiring input recorded on `tape`.

    `output` must be a 1x1 tensor produced during the taped forward pass.
    Gradients accumulate into any pre-existing `.grad` arrays.
    """
    if output.shape != (1, 1):
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    grads = {id(output): np.ones((1, 1))}
    keepalive = {id(output): output}
    for out, inputs, rule in reversed(tape._records):
        g = grads.get(id(out))
        if g is None:
            continue
        for t, gin in zip(inputs, rule(g)):
            if gin is None or not t.requires_grad:
                continue
            key = id(t)
            keepalive[key] = t
            if key in grads:
                grads[key] = grads[key] + gin
            else:
                grads[key] = gin
    for key, t in keepalive.items():
        if t.requires_grad:
            g = grads[key]
            t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# broadcasting helpers

def _check_broadcast(a, b, opname):
    sa, sb = a.shape, b.shape
    for da, db in zip(sa, sb):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"{opname}: shapes {sa} and {sb} do not broadcast")


def _unbroadcast(grad, shape):
    # sum gradient over axes that were expanded during broadcasting
    for axis in (0, 1):
        if shape[axis] == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and linear-algebra primitives

def add(a, b):
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _maybe_record(out, (a, b), rule)


def sub(a, b):
    _check_broadcast(a, b, "sub")
    out = Tensor(a.data - b.data)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _maybe_record(out, (a, b), rule)


def mul(a, b):
    _check_broadcast(a, b, "mul")
    out = Tensor(a.data * b.data)

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _maybe_record(out, (a, b), rule)


def neg(a):
    out = Tensor(-a.data)
    return _maybe_record(out, (a,), lambda g: (-g,))


def scale(a, c):
    c = float(c)
    out = Tensor(a.data * c)
    return _maybe_record(out, (a,), lambda g: (g * c,))


def add_scalar(a, c):
    out = Tensor(a.data + float(c))
    return _maybe_record(out, (a,), lambda g: (g,))


def matmul(a, b):
    if a.cols != b.rows:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)

    def rule(g):
        return g @ b.data.T, a.data.T @ g

    return _maybe_record(out, (a, b), rule)


def spmm(p, a):
    """Multiply a constant sparse row-operator `p` (scipy CSR) into `a`.

    The operator itself is not differentiated; gradients flow through `a`
    via the transpose.
    """
    if p.shape[1] != a.rows:
        raise DimensionError(f"spmm: operator {p.shape} x tensor {a.shape}")
    out = Tensor(p @ a.data)
    pt = p.T.tocsr()
    return _maybe_record(out, (a,), lambda g: (pt @ g,))


def tanh(a):
    t = np.tanh(a.data)
    out = Tensor(t)
    return _maybe_record(out, (a,), lambda g: (g * (1.0 - t * t),))


def prelu(a, slope):
    """Parametric ReLU with one learnable 1x1 slope for the negative side."""
    if slope.shape != (1, 1):
        raise DimensionError(f"prelu slope must be 1x1, got {slope.shape}")
    s = slope.data[0, 0]
    pos = a.data > 0.0
    out = Tensor(np.where(pos, a.data, s * a.data))

    def rule(g):
        ga = g * np.where(pos, 1.0, s)
        gs = np.array([[np.sum(g * np.where(pos, 0.0, a.data))]])
        return ga, gs

    return _maybe_record(out, (a, slope), rule)


def absolute(a):
    out = Tensor(np.abs(a.data))
    sign = np.sign(a.data)
    return _maybe_record(out, (a,), lambda g: (g * sign,))


def exp(a):
    e = np.exp(a.data)
    if not np.all(np.isfinite(e)):
        raise NumericError("exp overflowed; rescale inputs or use logsumexp")
    out = Tensor(e)
    return _maybe_record(out, (a,), lambda g: (g * e,))


def log(a):
    if np.any(a.data <= 0.0):
        raise NumericError("log of non-positive value")
    out = Tensor(np.log(a.data))
    return _maybe_record(out, (a,), lambda g: (g / a.data,))


def pow_const(a, p):
    p = float(p)
    v = np.power(a.data, p)
    if not np.all(np.isfinite(v)):
        raise NumericError(f"pow_const produced non-finite values (exponent {p})")
    out = Tensor(v)

    def rule(g):
        return (g * p * np.power(a.data, p - 1.0),)

    return _maybe_record(out, (a,), rule)


def total_sum(a):
    out = Tensor([[a.data.sum()]])
    return _maybe_record(out, (a,), lambda g: (np.full(a.shape, g[0, 0]),))


def mean(a):
    n = a.data.size
    out = Tensor([[a.data.sum() / n]])
    return _maybe_record(out, (a,), lambda g: (np.full(a.shape, g[0, 0] / n),))


def sum_rows(a):
    """Column vector of per-row sums (n x m -> n x 1)."""
    out = Tensor(a.data.sum(axis=1, keepdims=True))
    return _maybe_record(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def take_rows(a, indices):
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError("take_rows expects a flat index list")
    if idx.size and (idx.min() < 0 or idx.max() >= a.rows):
        raise ContractError(f"take_rows: index out of range for {a.rows} rows")
    out = Tensor(a.data[idx])

    def rule(g):
        ga = np.zeros(a.shape)
        np.add.at(ga, idx, g)
        return (ga,)

    return _maybe_record(out, (a,), rule)


def gather_cols(a, col_indices):
    """Per-row column pick: out[i, 0] = a[i, col_indices[i]]."""
    cols = np.asarray(col_indices, dtype=np.int64)
    if cols.shape != (a.rows,):
        raise DimensionError(f"gather_cols needs {a.rows} indices, got {cols.shape}")
    if cols.size and (cols.min() < 0 or cols.max() >= a.cols):
        raise ContractError(f"gather_cols: class index out of range for {a.cols} columns")
    rows = np.arange(a.rows)
    out = Tensor(a.data[rows, cols].reshape(-1, 1))

    def rule(g):
        ga = np.zeros(a.shape)
        np.add.at(ga, (rows, cols), g[:, 0])
        return (ga,)

    return _maybe_record(out, (a,), rule)


def concat_cols(a, b):
    if a.rows != b.rows:
        raise DimensionError(f"concat_cols: row counts differ, {a.shape} vs {b.shape}")
    out = Tensor(np.concatenate([a.data, b.data], axis=1))
    na = a.cols

    def rule(g):
        return g[:, :na], g[:, na:]

    return _maybe_record(out, (a, b), rule)


# ---------------------------------------------------------------------------
# numerically stable reductions

def logsumexp(a, axis=None):
    """log(sum(exp(a))) with max-subtraction; axis=None reduces all entries
    to 1x1, axis=1 reduces each row to a column vector."""
    if a.data.size == 0:
        raise ContractError("logsumexp of empty tensor")
    if axis is None:
        m = a.data.max()
        s = np.exp(a.data - m).sum()
        out = Tensor([[m + np.log(s)]])
        w = np.exp(a.data - out.data[0, 0])
        return _maybe_record(out, (a,), lambda g: (g[0, 0] * w,))
    if axis != 1:
        raise ContractError("logsumexp supports axis=None or axis=1")
    m = a.data.max(axis=1, keepdims=True)
    s = np.exp(a.data - m).sum(axis=1, keepdims=True)
    out = Tensor(m + np.log(s))
    w = np.exp(a.data - out.data)
    return _maybe_record(out, (a,), lambda g: (g * w,))


def softmax(a):
    """Row-wise softmax."""
    m = a.data.max(axis=1, keepdims=True)
    e = np.exp(a.data - m)
    p = e / e.sum(axis=1, keepdims=True)
    out = Tensor(p)

    def rule(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - dot),)

    return _maybe_record(out, (a,), rule)


def rowwise_l2_normalize(a, eps=1e-8):
    """Divide each row by max(||row||_2, eps)."""
    if eps <= 0.0:
        raise ContractError("eps must be positive")
    norms = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))
    denom = np.maximum(norms, eps)
    r = a.data / denom
    out = Tensor(r)
    clamped = norms < eps

    def rule(g):
        # free rows: project out the radial component; clamped rows are a
        # plain division by eps
        dots = (g * r).sum(axis=1, keepdims=True)
        ga = np.where(clamped, g / eps, (g - r * dots) / denom)
        return (ga,)

    return _maybe_record(out, (a,), rule)


def dropout(a, rate, rng):
    """Inverted dropout with a mask drawn from `rng`. Callers skip this op
    entirely in evaluation mode."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return a
    keep = (rng.random(a.shape) >= rate).astype(np.float64) / (1.0 - rate)
    out = Tensor(a.data * keep)
    return _maybe_record(out, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# gradient checking

def finite_diff_check(f, x, step=1e-5):
    """Max relative disagreement between taped gradients of `f` and central
    finite differences at `x`.

    `f` maps a Tensor to a scalar Tensor using ops from this module. The
    relative error per coordinate is |analytic - numeric| divided by
    max(|analytic|, 1e-8); the maximum over coordinates is returned.
    """
    if step <= 0.0:
        raise ContractError("step must be positive")
    probe = Tensor(x.data, requires_grad=True)
    with Tape() as tape:
        out = f(probe)
    if out.shape != (1, 1):
        raise ContractError(f"finite_diff_check needs a scalar function, got {out.shape}")
    backward(out, tape)
    analytic = probe.grad if probe.grad is not None else np.zeros(probe.shape)

    numeric = np.zeros(probe.shape)
    flat = probe.data.ravel()
    nflat = numeric.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(probe).item()
        flat[i] = orig - step
        lo = f(probe).item()
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError("function is non-finite at a perturbed point")
        nflat[i] = (hi - lo) / (2.0 * step)

    denom = np.maximum(np.abs(analytic), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
