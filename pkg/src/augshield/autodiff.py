"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Every op whose inputs require gradients appends a record to the active
:class:`Tape`. :func:`grad` replays the tape backwards. Backward rules are
themselves written with differentiable ops, so ``grad(..., create_graph=True)``
records the backward pass onto the same tape and a second :func:`grad` call
differentiates through it (reverse-over-reverse). Ops that only have a numpy
backward (conv, pooling) raise :class:`SecondOrderUnsupported` when asked to
record their backward.
"""

import threading
from contextlib import contextmanager

import numpy as np


class TapeError(RuntimeError):
    """Misuse of a tape: consumed, foreign, or missing."""


class SecondOrderUnsupported(RuntimeError):
    """An op without a differentiable backward was asked for one."""


class Tape:
    """Ordered op records; append order is a topological order."""

    def __init__(self):
        self.records = []
        self.consumed = False

    def __len__(self):
        return len(self.records)

    def __enter__(self):
        _state().stack.append(self)
        return self

    def __exit__(self, *exc):
        _state().stack.pop()
        return False


class _Record:
    __slots__ = ("op", "inputs", "out", "backward")

    def __init__(self, op, inputs, out, backward):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward = backward


class _State(threading.local):
    def __init__(self):
        self.stack = []
        self.default = Tape()
        self.recording = True


_local = _State()


def _state():
    return _local


def current_tape():
    st = _local
    if st.stack:
        return st.stack[-1]
    if st.default.consumed:
        st.default = Tape()
    return st.default


@contextmanager
def no_grad():
    """Run ops without recording them."""
    st = _local
    prev = st.recording
    st.recording = False
    try:
        yield
    finally:
        st.recording = prev


def is_recording():
    return _local.recording


class Tensor:
    """A float64 array plus its place on a tape."""

    __slots__ = ("data", "requires_grad", "tape", "index", "__weakref__")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.tape = None
        self.index = -1

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # operator sugar
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

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op, value, inputs, backward):
    """Wrap ``value``; record it when any input needs a gradient."""
    out = Tensor(value)
    if not _local.recording:
        return out
    if not any(t.requires_grad for t in inputs):
        return out
    tape = current_tape()
    for t in inputs:
        if t.tape is not None and t.tape is not tape:
            raise TapeError(f"{op}: input recorded on a different tape")
    if tape.consumed:
        raise TapeError(f"{op}: tape already consumed")
    out.requires_grad = True
    out.tape = tape
    out.index = len(tape.records)
    tape.records.append(_Record(op, inputs, out, backward))
    return out


# ------------------------------------------------------------------ shape ops


def sum_to(g, shape):
    """Reduce a broadcast gradient back to ``shape``."""
    g = as_tensor(g)
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and g.shape[i + lead] != 1
    )
    value = g.data.sum(axis=axes, keepdims=True)
    if lead:
        value = value.reshape(value.shape[lead:])
    value = value.reshape(shape)

    def backward(gout):
        return (broadcast_to(gout, g.shape),)

    return _emit("sum_to", value, (g,), backward)


def broadcast_to(x, shape):
    x = as_tensor(x)
    if x.shape == tuple(shape):
        return x
    src = x.shape

    def backward(gout):
        return (sum_to(gout, src),)

    return _emit("broadcast_to", np.broadcast_to(x.data, shape).copy(), (x,), backward)


def reshape(x, shape):
    x = as_tensor(x)
    src = x.shape

    def backward(gout):
        return (reshape(gout, src),)

    return _emit("reshape", x.data.reshape(shape), (x,), backward)


def transpose(x):
    x = as_tensor(x)

    def backward(gout):
        return (transpose(gout),)

    return _emit("transpose", x.data.T, (x,), backward)


def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    src = x.shape
    value = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(gout):
        if axis is not None and not keepdims:
            kshape = list(src)
            for a in np.atleast_1d(axis):
                kshape[a] = 1
            gout = reshape(gout, tuple(kshape))
        elif axis is None:
            gout = reshape(gout, (1,) * len(src))
        return (broadcast_to(gout, src),)

    return _emit("sum", value, (x,), backward)


def take_rows(x, idx):
    """``x[idx]`` along the first axis."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    n = x.shape[0]

    def backward(gout):
        return (scatter_rows(gout, idx, n),)

    return _emit("take_rows", x.data[idx], (x,), backward)


def scatter_rows(g, idx, n):
    """Adjoint of :func:`take_rows`: add rows of ``g`` into ``n`` zero rows."""
    g = as_tensor(g)
    value = np.zeros((n,) + g.shape[1:])
    np.add.at(value, idx, g.data)

    def backward(gout):
        return (take_rows(gout, idx),)

    return _emit("scatter_rows", value, (g,), backward)


# ------------------------------------------------------------- arithmetic ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(gout):
        return sum_to(gout, sa), sum_to(gout, sb)

    return _emit("add", a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(gout):
        return sum_to(gout, sa), sum_to(neg(gout), sb)

    return _emit("sub", a.data - b.data, (a, b), backward)


def neg(a):
    a = as_tensor(a)

    def backward(gout):
        return (neg(gout),)

    return _emit("neg", -a.data, (a,), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(gout):
        ga = sum_to(mul(gout, b), sa) if a.requires_grad else None
        gb = sum_to(mul(gout, a), sb) if b.requires_grad else None
        return ga, gb

    return _emit("mul", a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(gout):
        ga = sum_to(div(gout, b), sa) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = sum_to(neg(div(mul(gout, a), mul(b, b))), sb)
        return ga, gb

    return _emit("div", a.data / b.data, (a, b), backward)


def sqrt(a):
    a = as_tensor(a)

    def backward(gout):
        return (div(gout, mul(out, 2.0)),)

    out = _emit("sqrt", np.sqrt(a.data), (a,), backward)
    return out


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(gout):
        ga = matmul(gout, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), gout) if b.requires_grad else None
        return ga, gb

    return _emit("matmul", a.data @ b.data, (a, b), backward)


def relu(x):
    """ReLU; the derivative mask is a constant, so the second derivative is 0."""
    x = as_tensor(x)
    mask = Tensor((x.data > 0).astype(np.float64))

    def backward(gout):
        return (mul(gout, mask),)

    return _emit("relu", x.data * mask.data, (x,), backward)


def softmax(z):
    z = as_tensor(z)
    shifted = z.data - z.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=-1, keepdims=True)

    def backward(gout):
        inner = sum_(mul(gout, out), axis=-1, keepdims=True)
        return (mul(out, sub(gout, inner)),)

    out = _emit("softmax", value, (z,), backward)
    return out


def log_softmax_np(z):
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def softmax_xent_rows(logits, labels):
    """Per-row ``-sum_k y_k log softmax(z)_k``, fused and log-sum-exp stable."""
    logits, labels = as_tensor(logits), as_tensor(labels)
    logp = log_softmax_np(logits.data)
    value = -(labels.data * logp).sum(axis=-1)
    n = logits.shape[0]

    def backward(gout):
        gcol = reshape(gout, (n, 1))
        gz = mul(sub(softmax(logits), labels), gcol) if logits.requires_grad else None
        gy = None
        if labels.requires_grad:
            gy = mul(neg(Tensor(logp)), gcol)
        return gz, gy

    return _emit("softmax_xent", value, (logits, labels), backward)


# --------------------------------------------------------------- first-order


def first_order_op(op, value, inputs, backward_np):
    """Record an op whose backward exists only as numpy code.

    ``backward_np`` maps the upstream gradient array to a tuple of input
    gradient arrays (or ``None``).
    """

    def backward(gout):
        if _local.recording:
            raise SecondOrderUnsupported(f"{op} has no second-order backward")
        return tuple(None if g is None else Tensor(g) for g in backward_np(gout.data))

    return _emit(op, value, inputs, backward)


# ----------------------------------------------------------------- backward


def grad(output, wrt, create_graph=False):
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    Tensors in ``wrt`` that ``output`` does not depend on get zeros. Without
    ``create_graph`` the tape is consumed and released; calling again on it
    raises :class:`TapeError`.
    """
    if output.size != 1:
        raise ValueError(f"grad needs a scalar output, got shape {output.shape}")
    wrt = list(wrt)
    tape = output.tape
    if tape is None:
        return [Tensor(np.zeros(t.shape)) for t in wrt]
    if tape.consumed:
        raise TapeError("tape already consumed by an earlier backward pass")
    grads = {id(output): Tensor(np.ones(output.shape))}
    records = tape.records
    st = _local
    prev = st.recording
    st.recording = create_graph
    if create_graph:
        st.stack.append(tape)
    try:
        for i in range(output.index, -1, -1):
            rec = records[i]
            g = grads.get(id(rec.out))
            if g is None:
                continue
            in_grads = rec.backward(g)
            for inp, gi in zip(rec.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                prior = grads.get(key)
                grads[key] = gi if prior is None else add(prior, gi)
    finally:
        if create_graph:
            st.stack.pop()
        st.recording = prev
    out = [grads.get(id(t)) for t in wrt]
    out = [Tensor(np.zeros(t.shape)) if g is None else g for g, t in zip(out, wrt)]
    if not create_graph:
        tape.consumed = True
        tape.records = []
    return out
