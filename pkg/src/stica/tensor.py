"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation records an entry on the active
:class:`ComputationRecord` (a tape). ``backward(loss)`` walks the tape in
reverse and accumulates gradients into the ``grad`` buffers of leaf
tensors created with ``requires_grad=True``. Operations on tensors that
do not require gradients are computed eagerly and never recorded.

Non-positive ``log`` and zero-divisor ``div`` are rejected by default;
``set_strict_math(False)`` lets them propagate IEEE non-finite values
instead.
"""

from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "ComputationRecord",
    "ShapeError",
    "NumericError",
    "tensor",
    "concat",
    "matmul",
    "softmax",
    "masked_softmax",
    "logsumexp",
    "relu",
    "backward",
    "grad_check",
    "recording",
    "active_record",
    "no_grad",
    "set_strict_math",
]


class ShapeError(ValueError):
    """Operand shapes do not conform to the operation's rule."""


class NumericError(ArithmeticError):
    """Invalid numeric domain (log of non-positive, division by zero, ...)."""


_STRICT_MATH = True


def set_strict_math(flag):
    """Toggle rejection of log/div domain violations (default: reject)."""
    global _STRICT_MATH
    _STRICT_MATH = bool(flag)


class _RecordEntry:
    __slots__ = ("out", "inputs", "backward_fn", "index")

    def __init__(self, out, inputs, backward_fn, index):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.index = index


class ComputationRecord:
    """Ordered tape of executed primitives; entry k only consumes earlier outputs."""

    def __init__(self):
        self.entries = []

    def append(self, out, inputs, backward_fn):
        entry = _RecordEntry(out, inputs, backward_fn, len(self.entries))
        self.entries.append(entry)
        out._entry = entry
        out._record = self
        return entry

    def clear(self):
        self.entries.clear()

    def __len__(self):
        return len(self.entries)

    def live_bytes(self):
        """Bytes held by distinct arrays reachable from the tape (outputs + leaves)."""
        seen = set()
        total = 0
        for e in self.entries:
            for t in (e.out, *e.inputs):
                key = id(t.data)
                if key not in seen:
                    seen.add(key)
                    total += t.data.nbytes
        return total


_RECORDS = [ComputationRecord()]
_GRAD_ENABLED = [True]


def active_record():
    return _RECORDS[-1]


@contextmanager
def recording(record=None):
    """Push a fresh (or given) record for the duration of the block."""
    rec = record if record is not None else ComputationRecord()
    _RECORDS.append(rec)
    try:
        yield rec
    finally:
        _RECORDS.pop()


@contextmanager
def no_grad():
    """Disable recording; forward values only."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_entry", "_record")

    def __init__(self, data, requires_grad=False):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._entry = None
        self._record = None

    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        t.data = arr if arr.dtype == np.float64 else arr.astype(np.float64)
        t.requires_grad = False
        t.grad = None
        t._entry = None
        t._record = None
        return t

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def needs_grad(self):
        return self.requires_grad or self._entry is not None

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def detach(self):
        return Tensor._wrap(self.data)

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow_(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    # method forms used all over the model code
    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def broadcast_to(self, shape):
        return broadcast_to(self, shape)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def _apply(out_data, inputs, backward_fn):
    out = Tensor._wrap(out_data)
    if _GRAD_ENABLED[-1] and any(t.needs_grad() for t in inputs):
        active_record().append(out, tuple(inputs), backward_fn)
    return out


def _unbroadcast(g, shape):
    """Sum `g` back down to `shape` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_elementwise(a, b, opname):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise primitives --------------------------------------------------

def add(a, b):
    a, b = _lift(a), _lift(b)
    _check_elementwise(a, b, "add")
    return _apply(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _lift(a), _lift(b)
    _check_elementwise(a, b, "sub")
    return _apply(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _lift(a), _lift(b)
    _check_elementwise(a, b, "mul")
    return _apply(a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape),
                             _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = _lift(a), _lift(b)
    _check_elementwise(a, b, "div")
    if _STRICT_MATH and np.any(b.data == 0.0):
        raise NumericError("div: zero divisor")
    out = a.data / b.data
    return _apply(out, (a, b),
                  lambda g: (_unbroadcast(g / b.data, a.shape),
                             _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a):
    a = _lift(a)
    return _apply(-a.data, (a,), lambda g: (-g,))


def exp(a):
    a = _lift(a)
    out = np.exp(a.data)
    return _apply(out, (a,), lambda g: (g * out,))


def log(a):
    a = _lift(a)
    if _STRICT_MATH and np.any(a.data <= 0.0):
        raise NumericError("log: non-positive operand")
    return _apply(np.log(a.data), (a,), lambda g: (g / a.data,))


def pow_(a, exponent):
    a = _lift(a)
    p = float(exponent)
    out = a.data ** p
    return _apply(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def relu(a):
    a = _lift(a)
    # subgradient at 0 is 0
    return _apply(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0.0),))


# -- reductions ---------------------------------------------------------------

def _norm_axis(axis, ndim, opname):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    axis = tuple(a % ndim if -ndim <= a < ndim else _axis_err(a, ndim, opname) for a in axis)
    return axis


def _axis_err(a, ndim, opname):
    raise ShapeError(f"{opname}: axis {a} invalid for {ndim} dims")


def _restore_dims(g, shape, axis, keepdims):
    if keepdims or axis is None and g.ndim == len(shape):
        return g
    full = list(shape)
    if axis is None:
        return np.broadcast_to(g, shape)
    gshape = list(g.shape)
    for a in sorted(axis):
        gshape.insert(a, 1)
    return g.reshape(gshape)


def sum_(a, axis=None, keepdims=False):
    a = _lift(a)
    ax = _norm_axis(axis, a.ndim, "sum")
    out = a.data.sum(axis=ax, keepdims=keepdims)

    def bwd(g):
        g = _restore_dims(np.asarray(g), a.shape, ax, keepdims)
        return (np.broadcast_to(g, a.shape),)

    return _apply(np.asarray(out), (a,), bwd)


def mean_(a, axis=None, keepdims=False):
    a = _lift(a)
    ax = _norm_axis(axis, a.ndim, "mean")
    count = a.size if ax is None else int(np.prod([a.shape[i] for i in ax]))
    out = a.data.mean(axis=ax, keepdims=keepdims)

    def bwd(g):
        g = _restore_dims(np.asarray(g), a.shape, ax, keepdims)
        return (np.broadcast_to(g, a.shape) / count,)

    return _apply(np.asarray(out), (a,), bwd)


def max_(a, axis=None, keepdims=False):
    """Max over axis; gradient routes to the first maximum along the axis."""
    a = _lift(a)
    ax = _norm_axis(axis, a.ndim, "max")
    if ax is not None and len(ax) != 1:
        raise ShapeError("max: a single axis or None")
    out = a.data.max(axis=ax[0] if ax else None, keepdims=keepdims)

    def bwd(g):
        g = _restore_dims(np.asarray(g), a.shape, ax, keepdims)
        if ax is None:
            mask = np.zeros(a.shape, dtype=bool)
            mask.reshape(-1)[np.argmax(a.data)] = True
            return (np.where(mask, g, 0.0),)
        axis0 = ax[0]
        idx = np.expand_dims(np.argmax(a.data, axis=axis0), axis0)
        mask = np.zeros(a.shape, dtype=bool)
        np.put_along_axis(mask, idx, True, axis=axis0)
        return (np.where(mask, np.broadcast_to(g, a.shape), 0.0),)

    return _apply(np.asarray(out), (a,), bwd)


# -- structural primitives -----------------------------------------------------

def broadcast_to(a, shape):
    a = _lift(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast: {a.shape} -> {shape}") from None
    return _apply(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def reshape(a, shape):
    a = _lift(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: {a.shape} -> {shape}") from None
    return _apply(np.ascontiguousarray(out), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = _lift(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = np.argsort(axes)
    return _apply(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                  lambda g: (g.transpose(inv),))


def slice_(a, key):
    """Basic slicing (slices and ints); gradient scatters into the region."""
    a = _lift(a)
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not isinstance(k, (slice, int, np.integer)):
            raise ShapeError(f"slice: unsupported index {k!r}")
    out = a.data[key]

    def bwd(g):
        gx = np.zeros(a.shape)
        gx[key] = g
        return (gx,)

    return _apply(np.ascontiguousarray(out), (a,), bwd)


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input list")
    datas = [t.data for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: shapes {[t.shape for t in tensors]} on axis {axis}") from None
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _apply(out, tuple(tensors), bwd)


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: ranks {a.ndim} x {b.ndim}, need >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _apply(out, (a, b), bwd)


# -- softmax family ------------------------------------------------------------

def softmax(x, axis=-1):
    """Numerically stable softmax along `axis`; rejects non-finite input."""
    x = _lift(x)
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax: non-finite input")
    ax = _norm_axis(axis, x.ndim, "softmax")[0]
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=ax, keepdims=True)

    def bwd(g):
        return ((g - (g * y).sum(axis=ax, keepdims=True)) * y,)

    return _apply(y, (x,), bwd)


def masked_softmax(x, mask, axis=-1):
    """Softmax where positions with mask False get exactly zero weight.

    `mask` is a constant boolean array broadcastable to x along `axis`;
    at least one position per row must be True.
    """
    x = _lift(x)
    ax = _norm_axis(axis, x.ndim, "masked_softmax")[0]
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not np.all(mask.any(axis=ax)):
        raise NumericError("masked_softmax: a row is fully masked")
    neg = np.where(mask, x.data, -np.inf)
    shifted = neg - neg.max(axis=ax, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    y = e / e.sum(axis=ax, keepdims=True)

    def bwd(g):
        return ((g - (g * y).sum(axis=ax, keepdims=True)) * y,)

    return _apply(y, (x,), bwd)


def logsumexp(x, axis=-1, keepdims=False):
    """log(sum(exp(x))) with max subtraction, composed so the gradient is softmax."""
    x = _lift(x)
    m = max_(x, axis=axis, keepdims=True)
    s = log(sum_(exp(sub(x, m)), axis=axis, keepdims=True)) + m
    if not keepdims:
        ax = _norm_axis(axis, x.ndim, "logsumexp")[0]
        s = reshape(s, tuple(d for i, d in enumerate(s.shape) if i != ax))
    return s


# -- backward pass ---------------------------------------------------------------

def backward(loss):
    """Accumulate dLoss/dLeaf into every reachable requires_grad leaf."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._entry is None:
        if loss.requires_grad:
            if loss.grad is None:
                loss.grad = np.zeros_like(loss.data)
            loss.grad += 1.0
        return
    record = loss._record
    grads = {id(loss): [loss, np.ones_like(loss.data)]}
    for entry in reversed(record.entries[: loss._entry.index + 1]):
        got = grads.pop(id(entry.out), None)
        if got is None:
            continue
        gout = got[1]
        gins = entry.backward_fn(gout)
        for t, gin in zip(entry.inputs, gins):
            if gin is None or not t.needs_grad():
                continue
            prev = grads.get(id(t))
            if prev is None:
                buf = np.ascontiguousarray(gin, dtype=np.float64)
                if not buf.flags.writeable:
                    buf = buf.copy()
                grads[id(t)] = [t, buf]
            else:
                prev[1] += gin
    for t, g in grads.values():
        if t.requires_grad:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g


def grad_check(f, inputs, eps=1e-6):
    """Max relative error between analytic and central-difference gradients.

    `f` maps the input tensors to a scalar Tensor. Entries where a
    perturbed evaluation is non-finite contribute an infinite error.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    with recording():
        out = f(*inputs)
        backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    max_err = 0.0

    def _eval():
        try:
            return f(*inputs).item()
        except NumericError:
            return np.nan

    with no_grad():
        for t, an in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            aflat = an.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = _eval()
                flat[i] = orig - eps
                fm = _eval()
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    max_err = np.inf
                    continue
                numeric = (fp - fm) / (2.0 * eps)
                err = abs(aflat[i] - numeric) / max(1e-12, abs(aflat[i]) + abs(numeric))
                max_err = max(max_err, err)
    return max_err
