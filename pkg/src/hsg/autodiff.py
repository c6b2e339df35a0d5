"""Dense f64 tensors with tape-based reverse-mode automatic differentiation.

Every operation records a backward closure on the thread's active ``Tape``.
Running ``backward(tape, root)`` replays the tape in reverse and accumulates
``d root / d input`` into the ``grad`` field of every reachable tensor.
Repeated ``backward`` calls without clearing grads accumulate on top of the
previous pass.  There is no broadcasting beyond scalars: shapes must match
exactly or one operand must have a single element.
"""

import math
import threading

import numpy as np

__all__ = [
    "Tensor", "Tape", "DimensionError", "ContractError",
    "tensor", "constant", "parameter", "no_grad", "backward", "grad_check",
    "add", "sub", "mul", "neg", "matmul", "dot", "concat", "tensor_sum",
    "tensor_mean", "tanh", "sigmoid", "exp", "softmax", "log_softmax",
    "max_elementwise", "vec_max", "pick", "row", "affine", "affine_rows",
    "squared_l2",
]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(ValueError):
    """Raised when an operation's precondition is violated."""


_STATE = threading.local()


def _tape_stack():
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Append-only record of operations, replayed in reverse by backward().

    Node inputs always precede the node itself, so a single reverse sweep
    visits every node exactly once.
    """

    def __init__(self):
        self.nodes = []
        self.backward_visits = 0

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False


class no_grad:
    """Context manager that suspends tape recording (pure forward mode)."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False


class Tensor:
    """A dense array of 64-bit floats with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = -1

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, data={self.data!r})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def constant(data):
    return Tensor(data)


def parameter(data):
    return Tensor(data, requires_grad=True)


def accumulate(t, g):
    """Add g into t.grad, allocating the buffer on first touch."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def record(fn, *outs):
    """Register a backward closure producing the given output tensors.

    Only records when a tape is active; returns True if recorded so callers
    can skip building backward state in pure-forward mode.
    """
    tape = active_tape()
    if tape is None:
        return False
    for o in outs:
        o.requires_grad = True
        o.node_id = len(tape.nodes)
    tape.nodes.append((fn, outs))
    return True


def _tracing(*inputs):
    """True when an op should record: tape active and some input needs grad."""
    if active_tape() is None:
        return False
    return any(t.requires_grad for t in inputs)


def defer_flush(fn):
    """Schedule fn to run once after the current backward sweep finishes.

    Backward rules use this to batch repeated weight-gradient contributions
    (one GEMM at the end instead of one outer product per time step).
    """
    getattr(_STATE, "flush", None).append(fn)


def backward(tape, root):
    """Populate grads of everything reachable from the scalar root.

    Visits each tape node exactly once in reverse order.  Gradients of
    intermediate results are consumed and released as the sweep passes them;
    leaf gradients persist, so calling backward again without zeroing adds
    one more copy of the gradient on top.
    """
    if root.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    if root.grad is None:
        root.grad = np.ones_like(root.data)
    else:
        root.grad = root.grad + np.ones_like(root.data)
    _STATE.flush = flush = []
    try:
        for fn, outs in reversed(tape.nodes):
            tape.backward_visits += 1
            fired = False
            for o in outs:
                if o.grad is not None:
                    fired = True
                    break
            if fired:
                fn()
                for o in outs:
                    o.grad = None
        for fn in flush:
            fn()
    finally:
        _STATE.flush = None


def _check_same_shape(a, b, opname):
    if a.data.shape != b.data.shape:
        raise DimensionError(
            f"{opname}: shapes {a.data.shape} and {b.data.shape} do not match")


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _binary_prep(a, b, opname):
    """Validate exact-shape or scalar pairing for an elementwise op."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.data.shape != b.data.shape and a.data.size != 1 and b.data.size != 1:
        raise DimensionError(
            f"{opname}: shapes {a.data.shape} and {b.data.shape} are not "
            "exact-match or scalar")
    return a, b


def _unbroadcast(g, shape):
    """Sum a gradient down to a scalar operand's shape if needed."""
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=np.float64).reshape(shape)


def add(a, b):
    a, b = _binary_prep(a, b, "add")
    out = Tensor(a.data + b.data)
    if _tracing(a, b):
        def bwd():
            g = out.grad
            accumulate(a, _unbroadcast(g, a.data.shape))
            accumulate(b, _unbroadcast(g, b.data.shape))
        record(bwd, out)
    return out


def sub(a, b):
    a, b = _binary_prep(a, b, "sub")
    out = Tensor(a.data - b.data)
    if _tracing(a, b):
        def bwd():
            g = out.grad
            accumulate(a, _unbroadcast(g, a.data.shape))
            accumulate(b, _unbroadcast(-g, b.data.shape))
        record(bwd, out)
    return out


def mul(a, b):
    a, b = _binary_prep(a, b, "mul")
    out = Tensor(a.data * b.data)
    if _tracing(a, b):
        ad, bd = a.data, b.data
        def bwd():
            g = out.grad
            accumulate(a, _unbroadcast(g * bd, ad.shape))
            accumulate(b, _unbroadcast(g * ad, bd.shape))
        record(bwd, out)
    return out


def neg(a):
    a = _as_tensor(a)
    out = Tensor(-a.data)
    if _tracing(a):
        def bwd():
            accumulate(a, -out.grad)
        record(bwd, out)
    return out


def matmul(a, b):
    """Matrix product for 2-D operands; either side may be a vector."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise DimensionError(
            f"matmul: expected 1-D or 2-D operands, got {a.data.shape} and {b.data.shape}")
    inner_a = a.data.shape[-1]
    inner_b = b.data.shape[0]
    if inner_a != inner_b:
        raise DimensionError(
            f"matmul: inner dimensions of {a.data.shape} and {b.data.shape} do not match")
    out = Tensor(a.data @ b.data)
    if _tracing(a, b):
        ad, bd = a.data, b.data
        def bwd():
            g = out.grad
            if a.requires_grad:
                if ad.ndim == 2 and bd.ndim == 2:
                    accumulate(a, g @ bd.T)
                elif ad.ndim == 2 and bd.ndim == 1:
                    accumulate(a, g[:, None] * bd)
                elif ad.ndim == 1 and bd.ndim == 2:
                    accumulate(a, bd @ g)
                else:
                    accumulate(a, g * bd)
            if b.requires_grad:
                if ad.ndim == 2 and bd.ndim == 2:
                    accumulate(b, ad.T @ g)
                elif ad.ndim == 2 and bd.ndim == 1:
                    accumulate(b, ad.T @ g)
                elif ad.ndim == 1 and bd.ndim == 2:
                    accumulate(b, ad[:, None] * g)
                else:
                    accumulate(b, g * ad)
        record(bwd, out)
    return out


def dot(a, b):
    """Inner product of two equal-length vectors, returns a scalar tensor."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise DimensionError(
            f"dot: expected matching vectors, got {a.data.shape} and {b.data.shape}")
    out = Tensor(np.dot(a.data, b.data))
    if _tracing(a, b):
        ad, bd = a.data, b.data
        def bwd():
            g = out.grad
            accumulate(a, g * bd)
            accumulate(b, g * ad)
        record(bwd, out)
    return out


def concat(parts):
    """Concatenate scalars and 1-D tensors into one vector."""
    parts = [_as_tensor(p) for p in parts]
    for p in parts:
        if p.data.ndim > 1:
            raise DimensionError(f"concat: expected scalar or 1-D parts, got shape {p.data.shape}")
    if not parts:
        raise DimensionError("concat: no parts given")
    out = Tensor(np.concatenate([np.atleast_1d(p.data) for p in parts]))
    if _tracing(*parts):
        sizes = [p.data.size for p in parts]
        def bwd():
            g = out.grad
            off = 0
            for p, n in zip(parts, sizes):
                accumulate(p, g[off:off + n].reshape(p.data.shape))
                off += n
        record(bwd, out)
    return out


def tensor_sum(a):
    a = _as_tensor(a)
    out = Tensor(a.data.sum())
    if _tracing(a):
        def bwd():
            accumulate(a, np.full(a.data.shape, float(out.grad)))
        record(bwd, out)
    return out


def tensor_mean(a):
    a = _as_tensor(a)
    n = a.data.size
    if n == 0:
        raise DimensionError("mean: empty tensor")
    out = Tensor(a.data.mean())
    if _tracing(a):
        def bwd():
            accumulate(a, np.full(a.data.shape, float(out.grad) / n))
        record(bwd, out)
    return out


def tanh(a):
    a = _as_tensor(a)
    y = np.tanh(a.data)
    out = Tensor(y)
    if _tracing(a):
        def bwd():
            accumulate(a, out.grad * (1.0 - y * y))
        record(bwd, out)
    return out


def sigmoid(a):
    a = _as_tensor(a)
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(y)
    if _tracing(a):
        def bwd():
            accumulate(a, out.grad * y * (1.0 - y))
        record(bwd, out)
    return out


def exp(a):
    a = _as_tensor(a)
    y = np.exp(a.data)
    out = Tensor(y)
    if _tracing(a):
        def bwd():
            accumulate(a, out.grad * y)
        record(bwd, out)
    return out


def softmax(a):
    """Stable softmax over a 1-D tensor (max subtraction before exp)."""
    a = _as_tensor(a)
    if a.data.ndim != 1:
        raise DimensionError(f"softmax: expected a vector, got shape {a.data.shape}")
    if a.data.size == 0:
        raise DimensionError("softmax: empty axis")
    z = a.data - a.data.max()
    e = np.exp(z)
    y = e / e.sum()
    out = Tensor(y)
    if _tracing(a):
        def bwd():
            g = out.grad
            accumulate(a, (g - np.dot(g, y)) * y)
        record(bwd, out)
    return out


def log_softmax(a):
    a = _as_tensor(a)
    if a.data.ndim != 1:
        raise DimensionError(f"log_softmax: expected a vector, got shape {a.data.shape}")
    if a.data.size == 0:
        raise DimensionError("log_softmax: empty axis")
    m = a.data.max()
    z = a.data - m
    lse = math.log(np.exp(z).sum())
    y = z - lse
    out = Tensor(y)
    if _tracing(a):
        sm = np.exp(y)
        def bwd():
            g = out.grad
            accumulate(a, g - sm * g.sum())
        record(bwd, out)
    return out


def max_elementwise(a, b):
    """Elementwise max; on ties the gradient is routed to the first input."""
    a, b = _binary_prep(a, b, "max_elementwise")
    take_a = a.data >= b.data
    out = Tensor(np.where(take_a, a.data, b.data))
    if _tracing(a, b):
        def bwd():
            g = out.grad
            accumulate(a, _unbroadcast(np.where(take_a, g, 0.0), a.data.shape))
            accumulate(b, _unbroadcast(np.where(take_a, 0.0, g), b.data.shape))
        record(bwd, out)
    return out


def vec_max(a):
    """Max over a vector as a scalar; ties route gradient to the lowest index."""
    a = _as_tensor(a)
    if a.data.ndim != 1 or a.data.size == 0:
        raise DimensionError(f"vec_max: expected a non-empty vector, got shape {a.data.shape}")
    idx = int(np.argmax(a.data))
    out = Tensor(a.data[idx])
    if _tracing(a):
        def bwd():
            g = np.zeros(a.data.shape)
            g[idx] = float(out.grad)
            accumulate(a, g)
        record(bwd, out)
    return out


def pick(a, index):
    """Select one element of a vector as a scalar tensor."""
    a = _as_tensor(a)
    if a.data.ndim != 1:
        raise DimensionError(f"pick: expected a vector, got shape {a.data.shape}")
    if not 0 <= index < a.data.shape[0]:
        raise ContractError(f"pick: index {index} out of range for length {a.data.shape[0]}")
    out = Tensor(a.data[index])
    if _tracing(a):
        def bwd():
            g = np.zeros(a.data.shape)
            g[index] = float(out.grad)
            accumulate(a, g)
        record(bwd, out)
    return out


def row(m, index):
    """Select one row of a matrix (embedding lookup)."""
    m = _as_tensor(m)
    if m.data.ndim != 2:
        raise DimensionError(f"row: expected a matrix, got shape {m.data.shape}")
    if not 0 <= index < m.data.shape[0]:
        raise ContractError(f"row: index {index} out of range for {m.data.shape[0]} rows")
    out = Tensor(m.data[index].copy())
    if _tracing(m):
        def bwd():
            if m.grad is None:
                m.grad = np.zeros_like(m.data)
            m.grad[index] += out.grad
        record(bwd, out)
    return out


def affine(w, x, b):
    """Fused w @ x + b for a vector x."""
    w = _as_tensor(w)
    x = _as_tensor(x)
    b = _as_tensor(b)
    if w.data.ndim != 2 or x.data.ndim != 1 or w.data.shape[1] != x.data.shape[0]:
        raise DimensionError(
            f"affine: shapes {w.data.shape} and {x.data.shape} do not match")
    if b.data.shape != (w.data.shape[0],):
        raise DimensionError(
            f"affine: bias shape {b.data.shape} does not match output {w.data.shape[0]}")
    out = Tensor(w.data @ x.data + b.data)
    if _tracing(w, x, b):
        wd, xd = w.data, x.data
        def bwd():
            g = out.grad
            if w.requires_grad:
                accumulate(w, g[:, None] * xd)
            if x.requires_grad:
                accumulate(x, wd.T @ g)
            accumulate(b, g)
        record(bwd, out)
    return out


def affine_rows(w, m, b):
    """Fused m @ w.T + b applied row-wise to a matrix of inputs."""
    w = _as_tensor(w)
    m = _as_tensor(m)
    b = _as_tensor(b)
    if m.data.ndim != 2 or w.data.ndim != 2 or m.data.shape[1] != w.data.shape[1]:
        raise DimensionError(
            f"affine_rows: shapes {m.data.shape} and {w.data.shape} do not match")
    out = Tensor(m.data @ w.data.T + b.data)
    if _tracing(w, m, b):
        wd, md = w.data, m.data
        def bwd():
            g = out.grad
            if w.requires_grad:
                accumulate(w, g.T @ md)
            if m.requires_grad:
                accumulate(m, g @ wd)
            accumulate(b, g.sum(axis=0))
        record(bwd, out)
    return out


def squared_l2(a, b):
    """Sum of squared differences between two equal-shape tensors."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    _check_same_shape(a, b, "squared_l2")
    d = a.data - b.data
    out = Tensor(np.dot(d.reshape(-1), d.reshape(-1)))
    if _tracing(a, b):
        def bwd():
            g = 2.0 * float(out.grad) * d
            accumulate(a, g)
            accumulate(b, -g)
        record(bwd, out)
    return out


def grad_check(f, inputs, eps=1e-5):
    """Compare analytic gradients of a scalar-valued f against central differences.

    f is called as f(*inputs) and must build its result from the given input
    tensors.  Returns the worst relative error over every coordinate of every
    input, with denominator max(|analytic|, |numeric|, 1e-8).
    """
    inputs = list(inputs)
    for t in inputs:
        t.zero_grad()
    with Tape() as tape:
        out = f(*inputs)
        if out.size != 1:
            raise ContractError("grad_check: f must return a scalar")
        backward(tape, out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in inputs]

    worst = 0.0
    for t, ana in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                f_plus = f(*inputs).item()
            flat[i] = orig - eps
            with no_grad():
                f_minus = f(*inputs).item()
            flat[i] = orig
            num = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(ana_flat[i]), abs(num), 1e-8)
            worst = max(worst, abs(ana_flat[i] - num) / denom)
    for t in inputs:
        t.zero_grad()
    return worst
