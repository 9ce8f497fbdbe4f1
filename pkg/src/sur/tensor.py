"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable quantity in the package is a :class:`Tensor`. Operations
executed while a :class:`Tape` is active record a node with a local backward
rule; :func:`backward` replays the tape once, in reverse, and populates the
``grad`` field of every tensor that was created with ``requires_grad=True``.

Values are numpy float64 arrays. The tape holds plain Python closures, so a
graph is cheap to build and deterministic to replay: the node list order is
the execution order, nothing is hashed or re-sorted.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import DimensionError, NumericError, TapeError

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense n-dimensional float64 array, optionally gradient-tracked.

    ``data`` is the backing numpy array (row-major). ``grad`` stays ``None``
    until :func:`backward` runs over a tape this tensor participates in with
    ``requires_grad=True``. Tensors are treated as immutable after creation;
    only the trainer mutates parameter data, between steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # keeps 0-d scalars 0-d
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of differentiable operations.

    Used as a context manager::

        with Tape() as tape:
            loss = mse(pred, target)
        backward(loss, tape)

    Nodes are appended in execution order, so inputs always precede the node
    that consumes them. A tape can be backpropagated once; build a fresh tape
    for the next step.
    """

    __slots__ = ("nodes", "consumed")

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape context exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def _tracked(t: Tensor, tape) -> bool:
    return t.requires_grad or (t._tape is tape and tape is not None)


def _record(out: Tensor, inputs: tuple, vjp) -> Tensor:
    """Attach a node to the active tape if any input is gradient-relevant.

    ``vjp(gout)`` must return one gradient array per input (``None`` for
    inputs that need no gradient).
    """
    tape = _active_tape()
    if tape is None or not any(_tracked(t, tape) for t in inputs):
        return out
    tape.nodes.append((out, inputs, vjp))
    out._tape = tape
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` on every tracked tensor reachable from ``loss``.

    ``loss`` must be a scalar produced through ``tape``. Each node is visited
    exactly once, in reverse execution order, so the result is deterministic.
    A tape may be consumed only once.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is not tape:
        raise TapeError("loss was not produced through this tape")
    if tape.consumed:
        raise TapeError("backward already ran on this tape")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {}
    for out, inputs, vjp in reversed(tape.nodes):
        gout = grads.pop(id(out), None)
        if gout is None:
            continue
        for t, g in zip(inputs, vjp(gout)):
            if g is None or not _tracked(t, tape):
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = np.array(g, dtype=np.float64, copy=True)
                holders[key] = t
    # everything left unpopped is a leaf; publish where gradients were asked for
    for key, g in grads.items():
        t = holders.get(key)
        if t is not None and t.requires_grad:
            t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors, with d a = g b^T and d b = a^T g."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} x {b.shape} do not agree")
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _record(out, (a, b), vjp)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {x.shape}")
    out = Tensor(x.data.T)

    def vjp(g):
        return (g.T,)

    return _record(out, (x,), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add shapes {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)

    def vjp(g):
        return g, g

    return _record(out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub shapes {a.shape} vs {b.shape}")
    out = Tensor(a.data - b.data)

    def vjp(g):
        return g, -g

    return _record(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data

    def vjp(g):
        return g * bd, g * ad

    return _record(out, (a, b), vjp)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(x.data * c)

    def vjp(g):
        return (g * c,)

    return _record(out, (x,), vjp)


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """Add a length-n vector to every row of an m-by-n matrix."""
    if x.data.ndim != 2 or v.data.ndim != 1 or x.shape[1] != v.shape[0]:
        raise DimensionError(f"add_rowvec shapes {x.shape} + {v.shape}")
    out = Tensor(x.data + v.data[None, :])

    def vjp(g):
        return g, g.sum(axis=0)

    return _record(out, (x, v), vjp)


def tanh(x: Tensor) -> Tensor:
    out = Tensor(np.tanh(x.data))
    od = out.data

    def vjp(g):
        return (g * (1.0 - od * od),)

    return _record(out, (x,), vjp)


def row_softmax(x: Tensor) -> Tensor:
    """Per-row softmax with max subtraction, so huge logits cannot overflow."""
    if x.data.ndim != 2:
        raise DimensionError(f"row_softmax needs a matrix, got shape {x.shape}")
    if not np.isfinite(x.data).all():
        raise NumericError("row_softmax input contains non-finite values")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    out = Tensor(s)

    def vjp(g):
        dot = (g * s).sum(axis=1, keepdims=True)
        return ((g - dot) * s,)

    return _record(out, (x,), vjp)


def _log_softmax_1d(v: np.ndarray, tau: float) -> np.ndarray:
    z = v / tau
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def kl_div(p_logits: Tensor, q_logits: Tensor, tau: float = 1.0) -> Tensor:
    """KL(softmax(p/tau) || softmax(q/tau)) for two logit vectors.

    The first argument is the target (teacher) distribution. Both operands
    are passed through a temperature-scaled softmax, which makes the value
    well-defined and non-negative for arbitrary feature vectors; it is zero
    exactly when the logits differ by a constant shift. Differentiable with
    respect to both inputs.
    """
    if p_logits.data.ndim != 1 or q_logits.data.ndim != 1:
        raise DimensionError("kl_div operands must be vectors")
    if p_logits.shape != q_logits.shape:
        raise DimensionError(f"kl_div lengths {p_logits.shape} vs {q_logits.shape}")
    tau = float(tau)
    if tau <= 0.0:
        raise ValueError(f"tau must be positive, got {tau}")
    if not (np.isfinite(p_logits.data).all() and np.isfinite(q_logits.data).all()):
        raise NumericError("kl_div input contains non-finite values")
    lp = _log_softmax_1d(p_logits.data, tau)
    lq = _log_softmax_1d(q_logits.data, tau)
    p = np.exp(lp)
    q = np.exp(lq)
    val = float(np.dot(p, lp - lq))
    out = Tensor(val)

    def vjp(g):
        gf = float(g)
        gp = gf * p * ((lp - lq) - val) / tau
        gq = gf * (q - p) / tau
        return gp, gq

    return _record(out, (p_logits, q_logits), vjp)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared elementwise difference, reduced over all elements."""
    if a.shape != b.shape:
        raise DimensionError(f"mse shapes {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    out = Tensor(float((diff * diff).sum() / n))

    def vjp(g):
        base = (2.0 / n) * float(g) * diff
        return base, -base

    return _record(out, (a, b), vjp)


def mean_rows(x: Tensor) -> Tensor:
    """Arithmetic mean over the row axis of an m-by-n matrix (m >= 1)."""
    if x.data.ndim != 2:
        raise DimensionError(f"mean_rows needs a matrix, got shape {x.shape}")
    m = x.shape[0]
    if m == 0:
        raise DimensionError("mean_rows of an empty matrix")
    out = Tensor(x.data.mean(axis=0))

    def vjp(g):
        return (np.tile(g / m, (m, 1)),)

    return _record(out, (x,), vjp)


def slice_rows(x: Tensor, k: int) -> Tensor:
    """First k rows of a matrix; backward scatters into the original shape."""
    if x.data.ndim != 2:
        raise DimensionError(f"slice_rows needs a matrix, got shape {x.shape}")
    if not 1 <= k <= x.shape[0]:
        raise DimensionError(f"slice_rows count {k} outside 1..{x.shape[0]}")
    out = Tensor(x.data[:k].copy())
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        full[:k] = g
        return (full,)

    return _record(out, (x,), vjp)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(float(x.data.sum()))
    shape = x.shape

    def vjp(g):
        return (np.full(shape, float(g)),)

    return _record(out, (x,), vjp)


def concat_cols(parts: list[Tensor]) -> Tensor:
    """Concatenate 1-by-n row matrices along columns."""
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != 1:
            raise DimensionError(f"concat_cols needs 1-row matrices, got {p.shape}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    widths = [p.shape[1] for p in parts]

    def vjp(g):
        grads = []
        at = 0
        for w in widths:
            grads.append(g[:, at:at + w])
            at += w
        return tuple(grads)

    return _record(out, tuple(parts), vjp)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    if int(np.prod(shape)) != x.data.size:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}")
    out = Tensor(x.data.reshape(shape))
    orig = x.shape

    def vjp(g):
        return (g.reshape(orig),)

    return _record(out, (x,), vjp)


def mean_of(parts: list[Tensor]) -> Tensor:
    """Mean of k scalar tensors; used for batch reduction of losses."""
    for p in parts:
        if p.data.size != 1:
            raise DimensionError("mean_of expects scalar tensors")
    k = len(parts)
    if k == 0:
        raise DimensionError("mean_of needs at least one term")
    out = Tensor(float(sum(float(p.data.reshape(())) for p in parts)) / k)

    def vjp(g):
        share = float(g) / k
        return tuple(np.asarray(share) for _ in parts)

    return _record(out, tuple(parts), vjp)
