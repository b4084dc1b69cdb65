"""Minimal reverse-mode autodiff on a linear tape of numpy arrays.

Forward evaluation is eager: every primitive computes its value when
recorded and appends one node to the tape, so node ids are already in
topological order and backward() is a single reverse sweep.

Randomness is never a primitive.  Noise draws are sampled outside the
tape and fed in as constants, which makes every recorded program a
deterministic function of (parameters, noise); stochastic gradients are
then plain gradients of that deterministic function.

Double precision only.  A Tape is single-owner: record into it from one
context at a time.  Independent tapes are fully independent.
"""

from __future__ import annotations

import math

import numpy as np

from . import transform as _transform

_LOG_2PI = math.log(2.0 * math.pi)

PRIMITIVES = frozenset(
    {
        "add",
        "sub",
        "elementwise-mul",
        "scalar-mul",
        "matmul",
        "diag-scale",
        "fwht",
        "concat",
        "slice",
        "pad",
        "reshape",
        "relu",
        "tanh",
        "cos",
        "exp",
        "log",
        "softplus",
        "sum",
        "mean",
        "gaussian-nll",
        "softmax-cross-entropy",
    }
)


def _sigmoid(x):
    # tanh form is stable for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _unbroadcast(grad, shape):
    """Sum grad down to `shape`, undoing numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _fwht_last(x, normalized):
    if x.ndim == 1:
        return _transform.fwht(x, normalized=normalized)
    d = x.shape[-1]
    return _transform.fwht_batch(x.reshape(-1, d), normalized=normalized).reshape(
        x.shape
    )


def _broadcast_or_raise(op, *shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ValueError(f"shape mismatch for '{op}': {' vs '.join(map(str, shapes))}")


def _normalize_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


# ---------------------------------------------------------------------------
# forward rules


def _fwd_add(vals, attrs):
    _broadcast_or_raise("add", vals[0].shape, vals[1].shape)
    return vals[0] + vals[1]


def _fwd_sub(vals, attrs):
    _broadcast_or_raise("sub", vals[0].shape, vals[1].shape)
    return vals[0] - vals[1]


def _fwd_emul(vals, attrs):
    _broadcast_or_raise("elementwise-mul", vals[0].shape, vals[1].shape)
    return vals[0] * vals[1]


def _fwd_smul(vals, attrs):
    return vals[0] * attrs["c"]


def _fwd_matmul(vals, attrs):
    a, b = vals
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(
            f"matmul requires ndim >= 2 operands, got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"shape mismatch for 'matmul': {a.shape} @ {b.shape}")
    _broadcast_or_raise("matmul", a.shape[:-2], b.shape[:-2])
    return a @ b


def _fwd_diag_scale(vals, attrs):
    x, d = vals
    if d.ndim != 1 or x.shape[-1] != d.shape[0]:
        raise ValueError(
            f"diag-scale needs a 1-d scale matching the last axis, got {x.shape} and {d.shape}"
        )
    return x * d


def _fwd_fwht(vals, attrs):
    return _fwht_last(vals[0], attrs["normalized"])


def _fwd_concat(vals, attrs):
    try:
        return np.concatenate(vals, axis=attrs["axis"])
    except ValueError as exc:
        raise ValueError(f"shape mismatch for 'concat': {exc}")


def _fwd_slice(vals, attrs):
    return np.asarray(vals[0][attrs["key"]], dtype=np.float64)


def _fwd_pad(vals, attrs):
    return np.pad(vals[0], attrs["pad_width"])


def _fwd_reshape(vals, attrs):
    try:
        return vals[0].reshape(attrs["shape"])
    except ValueError:
        raise ValueError(
            f"shape mismatch for 'reshape': {vals[0].shape} -> {attrs['shape']}"
        )


def _fwd_relu(vals, attrs):
    return np.maximum(vals[0], 0.0)


def _fwd_tanh(vals, attrs):
    return np.tanh(vals[0])


def _fwd_cos(vals, attrs):
    return np.cos(vals[0])


def _fwd_exp(vals, attrs):
    return np.exp(vals[0])


def _fwd_log(vals, attrs):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(vals[0])


def _fwd_softplus(vals, attrs):
    return np.logaddexp(0.0, vals[0])


def _fwd_sum(vals, attrs):
    return np.asarray(vals[0].sum(axis=attrs["axis"]))


def _fwd_mean(vals, attrs):
    return np.asarray(vals[0].mean(axis=attrs["axis"]))


def _fwd_gaussian_nll(vals, attrs):
    y, mu, logvar = vals
    _broadcast_or_raise("gaussian-nll", y.shape, mu.shape, logvar.shape)
    r = y - mu
    return 0.5 * (_LOG_2PI + logvar + r * r * np.exp(-logvar))


def _fwd_sce(vals, attrs):
    logits, onehot = vals
    if logits.ndim != 2 or logits.shape != onehot.shape:
        raise ValueError(
            f"softmax-cross-entropy needs matching 2-d arrays, got {logits.shape} and {onehot.shape}"
        )
    m = logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(logits - m).sum(axis=-1)) + m[:, 0]
    return lse - (onehot * logits).sum(axis=-1)


_FORWARD = {
    "add": _fwd_add,
    "sub": _fwd_sub,
    "elementwise-mul": _fwd_emul,
    "scalar-mul": _fwd_smul,
    "matmul": _fwd_matmul,
    "diag-scale": _fwd_diag_scale,
    "fwht": _fwd_fwht,
    "concat": _fwd_concat,
    "slice": _fwd_slice,
    "pad": _fwd_pad,
    "reshape": _fwd_reshape,
    "relu": _fwd_relu,
    "tanh": _fwd_tanh,
    "cos": _fwd_cos,
    "exp": _fwd_exp,
    "log": _fwd_log,
    "softplus": _fwd_softplus,
    "sum": _fwd_sum,
    "mean": _fwd_mean,
    "gaussian-nll": _fwd_gaussian_nll,
    "softmax-cross-entropy": _fwd_sce,
}


# ---------------------------------------------------------------------------
# backward rules: (grad_out, input_values, out_value, attrs) -> per-input grads


def _bwd_add(g, vals, out, attrs):
    return [_unbroadcast(g, vals[0].shape), _unbroadcast(g, vals[1].shape)]


def _bwd_sub(g, vals, out, attrs):
    return [_unbroadcast(g, vals[0].shape), _unbroadcast(-g, vals[1].shape)]


def _bwd_emul(g, vals, out, attrs):
    a, b = vals
    return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]


def _bwd_smul(g, vals, out, attrs):
    return [g * attrs["c"]]


def _bwd_matmul(g, vals, out, attrs):
    a, b = vals
    ga = g @ np.swapaxes(b, -1, -2)
    gb = np.swapaxes(a, -1, -2) @ g
    return [_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)]


def _bwd_diag_scale(g, vals, out, attrs):
    x, d = vals
    gx = g * d
    gd = g * x
    if gd.ndim > 1:
        gd = gd.sum(axis=tuple(range(gd.ndim - 1)))
    return [gx, gd]


def _bwd_fwht(g, vals, out, attrs):
    # H is symmetric, so the adjoint is the same transform (same convention).
    return [_fwht_last(g, attrs["normalized"])]


def _bwd_concat(g, vals, out, attrs):
    axis = attrs["axis"]
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return list(np.split(g, sizes, axis=axis))


def _bwd_slice(g, vals, out, attrs):
    gx = np.zeros_like(vals[0])
    gx[attrs["key"]] = g
    return [gx]


def _bwd_pad(g, vals, out, attrs):
    sl = tuple(
        slice(b, b + s) for (b, _), s in zip(attrs["pad_width"], vals[0].shape)
    )
    return [g[sl]]


def _bwd_reshape(g, vals, out, attrs):
    return [g.reshape(vals[0].shape)]


def _bwd_relu(g, vals, out, attrs):
    return [g * (vals[0] > 0.0)]


def _bwd_tanh(g, vals, out, attrs):
    return [g * (1.0 - out * out)]


def _bwd_cos(g, vals, out, attrs):
    return [-g * np.sin(vals[0])]


def _bwd_exp(g, vals, out, attrs):
    return [g * out]


def _bwd_log(g, vals, out, attrs):
    return [g / vals[0]]


def _bwd_softplus(g, vals, out, attrs):
    return [g * _sigmoid(vals[0])]


def _expand_reduced(g, shape, axis):
    if axis is None:
        return np.broadcast_to(g, shape)
    for a in axis:
        g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def _bwd_sum(g, vals, out, attrs):
    return [_expand_reduced(g, vals[0].shape, attrs["axis"]).copy()]


def _bwd_mean(g, vals, out, attrs):
    x = vals[0]
    axis = attrs["axis"]
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in axis]))
    return [_expand_reduced(g, x.shape, axis) / count]


def _bwd_gaussian_nll(g, vals, out, attrs):
    y, mu, logvar = vals
    r = (y - mu) * np.exp(-logvar)
    gy = g * r
    gmu = -g * r
    glv = g * 0.5 * (1.0 - (y - mu) * r)
    return [
        _unbroadcast(gy, y.shape),
        _unbroadcast(gmu, mu.shape),
        _unbroadcast(glv, logvar.shape),
    ]


def _bwd_sce(g, vals, out, attrs):
    logits, onehot = vals
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    p = e / e.sum(axis=-1, keepdims=True)
    return [g[:, None] * (p - onehot), g[:, None] * (-logits)]


_BACKWARD = {
    "add": _bwd_add,
    "sub": _bwd_sub,
    "elementwise-mul": _bwd_emul,
    "scalar-mul": _bwd_smul,
    "matmul": _bwd_matmul,
    "diag-scale": _bwd_diag_scale,
    "fwht": _bwd_fwht,
    "concat": _bwd_concat,
    "slice": _bwd_slice,
    "pad": _bwd_pad,
    "reshape": _bwd_reshape,
    "relu": _bwd_relu,
    "tanh": _bwd_tanh,
    "cos": _bwd_cos,
    "exp": _bwd_exp,
    "log": _bwd_log,
    "softplus": _bwd_softplus,
    "sum": _bwd_sum,
    "mean": _bwd_mean,
    "gaussian-nll": _bwd_gaussian_nll,
    "softmax-cross-entropy": _bwd_sce,
}


# ---------------------------------------------------------------------------
# tape and variables


class Variable:
    """Handle to one tape node."""

    __slots__ = ("tape", "id")

    def __init__(self, tape, node_id):
        self.tape = tape
        self.id = node_id

    @property
    def value(self):
        return self.tape._values[self.id]

    @property
    def shape(self):
        return self.tape._values[self.id].shape

    @property
    def grad(self):
        if self.tape._grads is None:
            return None
        return self.tape._grads[self.id]

    # operator sugar; python scalars go through scalar-mul / constants

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(self.tape, other), self)

    def __mul__(self, other):
        if isinstance(other, Variable):
            return mul(self, other)
        return scalar_mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __truediv__(self, c):
        if isinstance(c, Variable):
            raise TypeError("divide by a Variable via exp(-log(v)) composition")
        return scalar_mul(self, 1.0 / c)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return self.tape.record("slice", [self], key=key)

    def sum(self, axis=None):
        return self.tape.record(
            "sum", [self], axis=_normalize_axis(axis, self.value.ndim)
        )

    def mean(self, axis=None):
        return self.tape.record(
            "mean", [self], axis=_normalize_axis(axis, self.value.ndim)
        )

    def reshape(self, shape):
        return self.tape.record("reshape", [self], shape=tuple(shape))

    def __repr__(self):
        return f"Variable(id={self.id}, shape={self.shape})"


class Tape:
    """Linear record of one eager forward program."""

    def __init__(self):
        self._values = []
        self._tags = []
        self._inputs = []
        self._attrs = []
        self._requires = []
        self._grads = None

    def __len__(self):
        return len(self._values)

    def _append(self, tag, input_ids, attrs, value, requires):
        self._values.append(value)
        self._tags.append(tag)
        self._inputs.append(tuple(input_ids))
        self._attrs.append(attrs)
        self._requires.append(requires)
        return Variable(self, len(self._values) - 1)

    def leaf(self, value, requires_grad=True):
        """Differentiable input; the value is copied."""
        arr = np.array(value, dtype=np.float64)
        return self._append("leaf", (), {}, arr, requires_grad)

    def constant(self, value):
        """Non-differentiable input (data, noise draws, masks)."""
        arr = np.asarray(value, dtype=np.float64)
        return self._append("leaf", (), {}, arr, False)

    def record(self, op, inputs, **attrs):
        if op not in PRIMITIVES:
            raise ValueError(f"unsupported op '{op}'")
        vars_in = [_lift(self, v) for v in inputs]
        for v in vars_in:
            if v.tape is not self:
                raise ValueError("all inputs must live on the same tape")
        vals = [v.value for v in vars_in]
        value = np.asarray(_FORWARD[op](vals, attrs), dtype=np.float64)
        requires = any(self._requires[v.id] for v in vars_in)
        return self._append(op, (v.id for v in vars_in), attrs, value, requires)


def _lift(tape, x):
    return x if isinstance(x, Variable) else tape.constant(x)


def record(tape, op, inputs, **attrs):
    return tape.record(op, inputs, **attrs)


def backward(tape, loss):
    """Reverse sweep from `loss`; leaves end up holding d loss / d leaf.

    Gradients are freshly zero-initialized on every call, so repeated
    backward passes over the same tape are deterministic and identical.
    """
    if not isinstance(loss, Variable) or loss.tape is not tape:
        raise ValueError("loss must be a Variable recorded on this tape")
    if loss.value.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    grads = [None] * len(tape)
    grads[loss.id] = np.ones_like(loss.value)
    for i in range(loss.id, -1, -1):
        g = grads[i]
        if g is None or not tape._requires[i] or tape._tags[i] == "leaf":
            continue
        vals = [tape._values[j] for j in tape._inputs[i]]
        contribs = _BACKWARD[tape._tags[i]](g, vals, tape._values[i], tape._attrs[i])
        for j, c in zip(tape._inputs[i], contribs):
            if c is None or not tape._requires[j]:
                continue
            if grads[j] is None:
                grads[j] = np.zeros_like(tape._values[j])
            grads[j] += c
    tape._grads = grads


# ---------------------------------------------------------------------------
# functional wrappers


def add(a, b):
    t = a.tape if isinstance(a, Variable) else b.tape
    return t.record("add", [a, b])


def sub(a, b):
    t = a.tape if isinstance(a, Variable) else b.tape
    return t.record("sub", [a, b])


def mul(a, b):
    t = a.tape if isinstance(a, Variable) else b.tape
    return t.record("elementwise-mul", [a, b])


def scalar_mul(x, c):
    return x.tape.record("scalar-mul", [x], c=float(c))


def matmul(a, b):
    t = a.tape if isinstance(a, Variable) else b.tape
    return t.record("matmul", [a, b])


def diag_scale(x, d):
    t = x.tape if isinstance(x, Variable) else d.tape
    return t.record("diag-scale", [x, d])


def fwht(x, normalized=True):
    return x.tape.record("fwht", [x], normalized=bool(normalized))


def concat(xs, axis=0):
    tapes = [x.tape for x in xs if isinstance(x, Variable)]
    return tapes[0].record("concat", list(xs), axis=int(axis))


def pad(x, pad_width):
    ndim = x.value.ndim
    pw = pad_width
    if ndim == 1 and len(pw) == 2 and np.isscalar(pw[0]):
        pw = (tuple(pw),)
    pw = tuple((int(b), int(a)) for b, a in pw)
    if len(pw) != ndim:
        raise ValueError(f"pad needs one (before, after) pair per axis, got {pw}")
    return x.tape.record("pad", [x], pad_width=pw)


def relu(x):
    return x.tape.record("relu", [x])


def tanh(x):
    return x.tape.record("tanh", [x])


def cos(x):
    return x.tape.record("cos", [x])


def exp(x):
    return x.tape.record("exp", [x])


def log(x):
    return x.tape.record("log", [x])


def softplus(x):
    return x.tape.record("softplus", [x])


def gaussian_nll(y, mu, logvar):
    for v in (y, mu, logvar):
        if isinstance(v, Variable):
            return v.tape.record("gaussian-nll", [y, mu, logvar])
    raise TypeError("at least one input must be a Variable")


def softmax_cross_entropy(logits, onehot):
    return logits.tape.record("softmax-cross-entropy", [logits, onehot])


def sqrt_positive(x, shift=1e-30):
    """sqrt of a nonnegative Variable as exp(0.5 log(x + shift)).

    The tiny shift keeps log finite at exact zeros; there the output and
    its gradient contributions vanish in the uses below (the zero always
    multiplies the downstream factor), so no NaN can leak in.
    """
    return exp(scalar_mul(log(add(x, x.tape.constant(shift))), 0.5))


# ---------------------------------------------------------------------------
# verification oracle


def finite_diff_check(f, x, eps=1e-5):
    """Max relative error between backward() and central differences.

    `f` maps a leaf Variable (fresh tape) to a scalar Variable on the same
    tape.  Any randomness inside f must be frozen so that the probes see
    the same function.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    x = np.array(x, dtype=np.float64)

    def run(arr):
        tape = Tape()
        v = tape.leaf(arr)
        loss = f(v)
        if loss.value.size != 1:
            raise ValueError("finite_diff_check requires a scalar-valued f")
        return tape, v, loss, float(loss.value.reshape(()))

    tape, v, loss, base = run(x)
    if not np.isfinite(base):
        raise FloatingPointError(f"non-finite loss {base} at the base point")
    backward(tape, loss)
    ana = v.grad
    ana = np.zeros_like(x) if ana is None else ana
    gmax = float(np.max(np.abs(ana))) if ana.size else 0.0

    num = np.zeros_like(x)
    flat = x.reshape(-1)
    nflat = num.reshape(-1)
    for i in range(flat.size):
        vals = {}
        for sgn in (1.0, -1.0):
            probe = flat.copy()
            probe[i] += sgn * eps
            _, _, _, val = run(probe.reshape(x.shape))
            if not np.isfinite(val):
                raise FloatingPointError(
                    f"non-finite loss {val} at probe coordinate {i}"
                )
            vals[sgn] = val
        nflat[i] = (vals[1.0] - vals[-1.0]) / (2.0 * eps)

    if x.size == 0:
        return 0.0
    denom = np.maximum(
        np.maximum(np.abs(ana), np.abs(num)), max(1e-3 * gmax, 1e-12)
    )
    return float(np.max(np.abs(ana - num) / denom))
