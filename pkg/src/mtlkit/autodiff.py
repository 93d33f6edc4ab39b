"""Reverse-mode automatic differentiation over dense float64 tensors.

Supplies exactly the operations the network and losses need: broadcasting
elementwise arithmetic, matmul, conv2d, pooling, reductions, and a softmax
cross-entropy primitive. Operations executed while a Tape is active record
nodes; backward() runs one reverse sweep and populates gradients on the
requires_grad leaves.
"""

import numpy as np

from . import kernels as _K
from .errors import DomainError, StructuralError

_TAPES = []


class Tape:
    """Ordered record of operations, topological by construction.

    Single-threaded use only. `replay()` re-executes every node in order,
    refreshing each stored output in place; on identical leaf data the
    results are bitwise identical.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.pop()
        assert popped is self

    def __len__(self):
        return len(self.nodes)

    def replay(self):
        for node in self.nodes:
            node.recompute()

    def backward(self, loss):
        backward(loss)

    def release(self):
        """Drop every recorded node, including saved forward buffers.

        The graph objects form reference cycles (tensor -> node -> tensor),
        so without an explicit break they wait for the cycle collector while
        holding large conv workspaces. Call once gradients are consumed; the
        tape is empty afterwards, as if freshly constructed.
        """
        for node in self.nodes:
            if node.output is not None:
                node.output._node = None
                node.output._tape = None
            node.inputs = ()
            node.output = None
            node.saved = None
            node.fwd = None
            node.bwd = None
        self.nodes.clear()


def _active_tape():
    return _TAPES[-1] if _TAPES else None


class Tensor:
    """Dense float64 value grid with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise StructuralError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def is_leaf(self) -> bool:
        return self._node is None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}{flag})"


class Node:
    __slots__ = ("kind", "inputs", "output", "fwd", "bwd", "saved")

    def __init__(self, kind, inputs, output, fwd, bwd, saved):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.fwd = fwd
        self.bwd = bwd
        self.saved = saved

    def recompute(self):
        out, saved = self.fwd(*(t.data for t in self.inputs))
        # same normalization as Tensor.__init__, so replay is bitwise stable
        self.output.data = np.ascontiguousarray(np.asarray(out, dtype=np.float64))
        self.saved = saved


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _record(kind, inputs, fwd, bwd) -> Tensor:
    out_data, saved = fwd(*(t.data for t in inputs))
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        node = Node(kind, tuple(inputs), out, fwd, bwd, saved)
        tape.nodes.append(node)
        out._tape = tape
        out._node = node
    return out


def backward(loss: Tensor):
    """Reverse sweep from a scalar root; accumulates grads on requires_grad leaves."""
    if loss.size != 1:
        raise StructuralError(f"backward root must be scalar, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or not tape.nodes:
        raise StructuralError("backward needs a loss recorded on a nonempty tape")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(tape.nodes):
        gy = grads.pop(id(node.output), None)
        if gy is None:
            continue
        needs = tuple(t.requires_grad for t in node.inputs)
        gs = node.bwd(gy, tuple(t.data for t in node.inputs), node.saved, needs)
        for t, g in zip(node.inputs, gs):
            if g is None or not t.requires_grad:
                continue
            if t._node is not None and t._tape is tape:
                key = id(t)
                grads[key] = grads[key] + g if key in grads else g
            else:
                leaves.setdefault(id(t), [t, None])
                slot = leaves[id(t)]
                slot[1] = g if slot[1] is None else slot[1] + g
    for t, g in leaves.values():
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    # reduce a broadcast gradient back to the operand's shape
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(kind, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise StructuralError(
            f"{kind}: shapes {a.shape} and {b.shape} do not broadcast"
        ) from None


# ---------------------------------------------------------------- binary ops

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)

    def fwd(x, y):
        return x + y, None

    def bwd(gy, inputs, saved, needs):
        x, y = inputs
        return (
            _unbroadcast(gy, x.shape) if needs[0] else None,
            _unbroadcast(gy, y.shape) if needs[1] else None,
        )

    return _record("add", (a, b), fwd, bwd)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)

    def fwd(x, y):
        return x - y, None

    def bwd(gy, inputs, saved, needs):
        x, y = inputs
        return (
            _unbroadcast(gy, x.shape) if needs[0] else None,
            _unbroadcast(-gy, y.shape) if needs[1] else None,
        )

    return _record("sub", (a, b), fwd, bwd)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)

    def fwd(x, y):
        return x * y, None

    def bwd(gy, inputs, saved, needs):
        x, y = inputs
        return (
            _unbroadcast(gy * y, x.shape) if needs[0] else None,
            _unbroadcast(gy * x, y.shape) if needs[1] else None,
        )

    return _record("mul", (a, b), fwd, bwd)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a, b)
    if np.any(b.data == 0.0):
        raise DomainError("div: division by zero")

    def fwd(x, y):
        return x / y, None

    def bwd(gy, inputs, saved, needs):
        x, y = inputs
        return (
            _unbroadcast(gy / y, x.shape) if needs[0] else None,
            _unbroadcast(-gy * x / (y * y), y.shape) if needs[1] else None,
        )

    return _record("div", (a, b), fwd, bwd)


# ----------------------------------------------------------------- unary ops

def relu(a):
    a = _as_tensor(a)

    def fwd(x):
        return np.maximum(x, 0.0), None

    def bwd(gy, inputs, saved, needs):
        (x,) = inputs
        return (gy * (x > 0.0) if needs[0] else None,)

    return _record("relu", (a,), fwd, bwd)


def exp(a):
    a = _as_tensor(a)

    def fwd(x):
        out = np.exp(x)
        return out, out

    def bwd(gy, inputs, saved, needs):
        return (gy * saved if needs[0] else None,)

    return _record("exp", (a,), fwd, bwd)


def log(a):
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log: input must be strictly positive")

    def fwd(x):
        return np.log(x), None

    def bwd(gy, inputs, saved, needs):
        (x,) = inputs
        return (gy / x if needs[0] else None,)

    return _record("log", (a,), fwd, bwd)


def absolute(a):
    a = _as_tensor(a)

    def fwd(x):
        return np.abs(x), None

    def bwd(gy, inputs, saved, needs):
        (x,) = inputs
        # subgradient 0 at exactly 0
        return (gy * np.sign(x) if needs[0] else None,)

    return _record("abs", (a,), fwd, bwd)


def square(a):
    a = _as_tensor(a)

    def fwd(x):
        return x * x, None

    def bwd(gy, inputs, saved, needs):
        (x,) = inputs
        return (gy * 2.0 * x if needs[0] else None,)

    return _record("square", (a,), fwd, bwd)


def negate(a):
    a = _as_tensor(a)

    def fwd(x):
        return -x, None

    def bwd(gy, inputs, saved, needs):
        return (-gy if needs[0] else None,)

    return _record("negate", (a,), fwd, bwd)


def scale(a, constant):
    """Multiply by a fixed python number; no gradient flows into the constant."""
    a = _as_tensor(a)
    c = float(constant)

    def fwd(x):
        return x * c, None

    def bwd(gy, inputs, saved, needs):
        return (gy * c if needs[0] else None,)

    return _record("scale", (a,), fwd, bwd)


def clamp_min(a, floor):
    """max(a, floor) elementwise; gradient passes only where a > floor."""
    a = _as_tensor(a)
    c = float(floor)

    def fwd(x):
        return np.maximum(x, c), None

    def bwd(gy, inputs, saved, needs):
        (x,) = inputs
        return (gy * (x > c) if needs[0] else None,)

    return _record("clamp_min", (a,), fwd, bwd)


def sigmoid(a):
    a = _as_tensor(a)

    def fwd(x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out, out

    def bwd(gy, inputs, saved, needs):
        return (gy * saved * (1.0 - saved) if needs[0] else None,)

    return _record("sigmoid", (a,), fwd, bwd)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "relu": relu,
    "exp": exp,
    "log": log,
    "abs": absolute,
    "square": square,
    "negate": negate,
    "scale": scale,
    "scale-by-constant": scale,
}

_BINARY_KINDS = {"add", "sub", "mul", "div"}


def elementwise(kind: str, a, b=None):
    """Dispatch by kind string. Binary kinds need b; scale needs a constant b."""
    try:
        op = _ELEMENTWISE[kind]
    except KeyError:
        raise StructuralError(f"elementwise: unknown kind {kind!r}") from None
    if kind in _BINARY_KINDS or op is scale:
        if b is None:
            raise StructuralError(f"elementwise: kind {kind!r} needs a second operand")
        return op(a, b)
    if b is not None:
        raise StructuralError(f"elementwise: kind {kind!r} takes one operand")
    return op(a)


# ----------------------------------------------------------------- reductions

def sum_all(a):
    a = _as_tensor(a)

    def fwd(x):
        return np.asarray(x.sum()), None

    def bwd(gy, inputs, saved, needs):
        (x,) = inputs
        return (np.full(x.shape, gy.item()) if needs[0] else None,)

    return _record("sum", (a,), fwd, bwd)


def mean_all(a):
    a = _as_tensor(a)

    def fwd(x):
        return np.asarray(x.mean()), None

    def bwd(gy, inputs, saved, needs):
        (x,) = inputs
        return (np.full(x.shape, gy.item() / x.size) if needs[0] else None,)

    return _record("mean", (a,), fwd, bwd)


# ------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise StructuralError(
            f"matmul: expects two matrices, got ranks {a.ndim} and {b.ndim}"
        )
    if a.shape[1] != b.shape[0]:
        raise StructuralError(
            f"matmul: inner dimensions disagree, {a.shape} vs {b.shape}"
        )

    def fwd(x, y):
        return x @ y, None

    def bwd(gy, inputs, saved, needs):
        x, y = inputs
        return (
            gy @ y.T if needs[0] else None,
            x.T @ gy if needs[1] else None,
        )

    return _record("matmul", (a, b), fwd, bwd)


# ------------------------------------------------------------------ conv/pool

def conv2d(x, w, stride: int = 1, padding: int = 0):
    """Cross-correlation of x with kernels w (C_out, C_in, kh, kw).

    x may be (C, H, W) for a single sample or (B, C, H, W) batched; the
    output keeps the input's rank. Output sizes must come out integral.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if w.ndim != 4:
        raise StructuralError(f"conv2d: kernels must be rank 4, got {w.ndim}")
    single = x.ndim == 3
    if x.ndim not in (3, 4):
        raise StructuralError(f"conv2d: input must be rank 3 or 4, got {x.ndim}")
    stride = int(stride)
    padding = int(padding)
    if stride < 1:
        raise StructuralError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise StructuralError(f"conv2d: padding must be >= 0, got {padding}")
    c_in = x.shape[0] if single else x.shape[1]
    if c_in != w.shape[1]:
        raise StructuralError(
            f"conv2d: input channels {c_in} != kernel channels {w.shape[1]}"
        )
    H, W = x.shape[-2], x.shape[-1]
    kh, kw = w.shape[2], w.shape[3]
    for name, dim, k in (("height", H, kh), ("width", W, kw)):
        span = dim + 2 * padding - k
        if span < 0:
            raise StructuralError(
                f"conv2d: kernel {name} {k} exceeds padded input {dim + 2 * padding}"
            )
        if span % stride != 0:
            raise StructuralError(
                f"conv2d: non-integral output {name}: "
                f"({dim} + 2*{padding} - {k}) not divisible by stride {stride}"
            )

    def fwd(xd, wd):
        xb = xd[None] if single else xd
        out = _K.conv2d_forward(xb, wd, stride, padding)
        return (out[0] if single else out), None

    def bwd(gy, inputs, saved, needs):
        xd, wd = inputs
        xb = xd[None] if single else xd
        gyb = gy[None] if single else gy
        gx = gw = None
        if needs[0]:
            gx = _K.conv2d_backward_input(gyb, wd, stride, padding, (H, W))
            if single:
                gx = gx[0]
        if needs[1]:
            gw = _K.conv2d_backward_kernels(gyb, xb, wd.shape, stride, padding)
        return gx, gw

    return _record("conv2d", (x, w), fwd, bwd)


def _promote_hw(x):
    # normalize rank 2/3/4 to (B, C, H, W) plus a restorer
    if x.ndim == 2:
        return x.reshape((1, 1) + x.shape), 2
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), 3
    if x.ndim == 4:
        return x, 4
    raise StructuralError(f"pooling expects rank 2..4, got {x.ndim}")


def maxpool2d(x, kernel: int, stride: int):
    """Max pooling with square window and stride; first-index tie-break."""
    x = _as_tensor(x)
    k, s = int(kernel), int(stride)
    if k < 1 or s < 1:
        raise StructuralError(f"maxpool2d: kernel/stride must be >= 1, got {k},{s}")
    _, rank = _promote_hw(x.data)
    H, W = x.shape[-2], x.shape[-1]
    if H < k or W < k:
        raise StructuralError(f"maxpool2d: window {k} larger than input {H}x{W}")
    if (H - k) % s != 0 or (W - k) % s != 0:
        raise StructuralError(
            f"maxpool2d: non-integral output for input {H}x{W}, window {k}, stride {s}"
        )

    def fwd(xd):
        xb, _ = _promote_hw(xd)
        y, idx = _K.maxpool2d_forward(xb, k, k, s, s)
        if rank == 2:
            return y[0, 0], idx
        if rank == 3:
            return y[0], idx
        return y, idx

    def bwd(gy, inputs, saved, needs):
        if not needs[0]:
            return (None,)
        (xd,) = inputs
        xb, _ = _promote_hw(xd)
        gyb, _ = _promote_hw(gy)
        gx = _K.maxpool2d_backward(gyb, saved, xb.shape, k, k, s, s)
        if rank == 2:
            return (gx[0, 0],)
        if rank == 3:
            return (gx[0],)
        return (gx,)

    return _record("maxpool2d", (x,), fwd, bwd)


def global_avg_pool(x):
    """Average over the spatial dims: (B,C,H,W) -> (B,C), or (C,H,W) -> (C,)."""
    x = _as_tensor(x)
    if x.ndim not in (3, 4):
        raise StructuralError(f"global_avg_pool: expects rank 3 or 4, got {x.ndim}")

    def fwd(xd):
        return xd.mean(axis=(-2, -1)), None

    def bwd(gy, inputs, saved, needs):
        (xd,) = inputs
        if not needs[0]:
            return (None,)
        H, W = xd.shape[-2], xd.shape[-1]
        g = np.broadcast_to((gy / (H * W))[..., None, None], xd.shape)
        return (np.ascontiguousarray(g),)

    return _record("global_avg_pool", (x,), fwd, bwd)


def pool_and_reduce(kind: str, x, kernel=None, stride=None):
    """Dispatcher over the pooling/reduction family."""
    if kind == "maxpool2d":
        if kernel is None or stride is None:
            raise StructuralError("pool_and_reduce: maxpool2d needs kernel and stride")
        return maxpool2d(x, kernel, stride)
    if kernel is not None or stride is not None:
        raise StructuralError(f"pool_and_reduce: kind {kind!r} takes no window args")
    if kind == "global_avg_pool":
        return global_avg_pool(x)
    if kind == "mean":
        return mean_all(x)
    if kind == "sum":
        return sum_all(x)
    raise StructuralError(f"pool_and_reduce: unknown kind {kind!r}")


# ---------------------------------------------------------------- losses

def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of row-wise softmax against integer labels."""
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise StructuralError(f"softmax_cross_entropy: logits must be rank 2, got {logits.ndim}")
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise StructuralError(
            f"softmax_cross_entropy: labels shape {labels.shape} does not match "
            f"batch {logits.shape[0]}"
        )
    if not np.issubdtype(labels.dtype, np.integer):
        raise StructuralError("softmax_cross_entropy: labels must be integers")
    n_classes = logits.shape[1]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise StructuralError(
            f"softmax_cross_entropy: label outside [0, {n_classes})"
        )
    labels = labels.copy()

    def fwd(z):
        zs = z - z.max(axis=1, keepdims=True)
        ez = np.exp(zs)
        p = ez / ez.sum(axis=1, keepdims=True)
        logp = zs - np.log(ez.sum(axis=1, keepdims=True))
        loss = -logp[np.arange(z.shape[0]), labels].mean()
        return np.asarray(loss), p

    def bwd(gy, inputs, saved, needs):
        if not needs[0]:
            return (None,)
        p = saved.copy()
        p[np.arange(p.shape[0]), labels] -= 1.0
        return (p * (gy.item() / p.shape[0]),)

    return _record("softmax_cross_entropy", (logits,), fwd, bwd)
