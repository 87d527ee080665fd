"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op builds a node holding its parents and a closure that pushes the
output adjoint back to them. ``backward`` topologically sorts the graph
reachable from a scalar output (the tape for that pass) and runs each
closure exactly once, in reverse order.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (sampling, evaluation)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    """An op received NaN or infinite input it cannot handle."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    # make numpy defer to our reflected operators
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.data, b.data)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.data, b.data)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.data, b.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a.data, b.data)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: _accum(a, g * c))


def neg(a) -> Tensor:
    return scale(a, -1.0)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    out = a.data ** p
    return _make(out, (a,), lambda g: _accum(a, g * p * a.data ** (p - 1.0)))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: _accum(a, g * out))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: _accum(a, g / a.data))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: _accum(a, g * 0.5 / out))


def norm(a, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at a zero vector is taken as 0."""
    a = as_tensor(a)
    out = np.sqrt((a.data * a.data).sum(axis=axis))

    def bw(g):
        n = np.expand_dims(out, axis)
        unit = np.divide(a.data, n, out=np.zeros_like(a.data), where=n > 0)
        _accum(a, np.expand_dims(g, axis) * unit)

    return _make(out, (a,), bw)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: _accum(a, g * (1.0 - out * out)))


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.sin(a.data), (a,), lambda g: _accum(a, g * np.cos(a.data)))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.cos(a.data), (a,), lambda g: _accum(a, -g * np.sin(a.data)))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: _accum(a, g * mask))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """tanh-form GELU; smooth everywhere, so finite differences never hit a kink."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x  # x**3 through pow() is an order of magnitude slower
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        _accum(a, g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner))

    return _make(out, (a,), bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}") from None

    if b.ndim == 2 and a.ndim > 2:
        # shared right operand (a weight matrix): fold the batch axes into rows
        k = a.shape[-1]

        def bw_flat(g):
            if a.requires_grad:
                _accum(a, g @ b.data.T)
            if b.requires_grad:
                _accum(b, a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))

        out = (a.data.reshape(-1, k) @ b.data).reshape(*a.shape[:-1], b.shape[-1])
        return _make(out, (a, b), bw_flat)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), bw)


def transpose(a, axes=None) -> Tensor:
    """Swap the last two axes, or permute by ``axes``."""
    a = as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise ShapeError(f"transpose needs rank >= 2, got {a.shape}")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: _accum(a, np.transpose(g, inv)))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {old} into {tuple(shape)}") from None
    return _make(out, (a,), lambda g: _accum(a, g.reshape(old)))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty sequence")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(
            t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax
        ):
            raise ShapeError(
                f"concat along axis {axis}: shapes {ts[0].shape} and {t.shape} differ off-axis"
            )
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * nd
                sl[ax] = slice(lo, hi)
                _accum(t, g[tuple(sl)])

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise ShapeError(f"stack needs equal shapes, got {sorted(shapes)}")
    out = np.stack([t.data for t in ts], axis=axis)
    ax = axis % out.ndim

    def bw(g):
        for i, t in enumerate(ts):
            if t.requires_grad:
                _accum(t, np.take(g, i, axis=ax))

    return _make(out, ts, bw)


def getitem(a, idx) -> Tensor:
    """Basic and advanced indexing; the adjoint scatters with ``np.add.at``."""
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.int64)
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accum(a, full)

    return _make(np.array(out, dtype=np.float64), (a,), bw)


def slice_axis(a, start: int, stop: int, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def bw(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        _accum(a, full)

    return _make(a.data[sl].copy(), (a,), bw)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(
        np.broadcast_to(a.data, shape).copy(), (a,), lambda g: _accum(a, _unbroadcast(g, old))
    )


# ---------------------------------------------------------------- reductions

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _make(np.asarray(out, dtype=np.float64), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(tsum(a, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------- fused nn ops

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError("softmax input contains non-finite values")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accum(x, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (x,), bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        p = np.exp(out)
        _accum(x, g - p * g.sum(axis=axis, keepdims=True))

    return _make(out, (x,), bw)


def layer_norm(x, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    x = as_tensor(x)
    if x.shape[-1] < 2:
        raise ShapeError(f"layer_norm needs last-axis extent >= 2, got {x.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw_norm(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv * (g - gm - xhat * gx))

    out = _make(xhat, (x,), bw_norm)
    if gain is not None:
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


def huber(residual, delta: float = 1.0) -> Tensor:
    """Mean over elements of the Huber penalty with threshold ``delta``."""
    r = as_tensor(residual)
    if delta <= 0:
        raise ValueError("delta must be positive")
    d = r.data
    ad = np.abs(d)
    quad = ad <= delta
    vals = np.where(quad, 0.5 * d * d, delta * (ad - 0.5 * delta))
    n = max(d.size, 1)

    def bw(g):
        dd = np.where(quad, d, delta * np.sign(d))
        _accum(r, g * dd / n)

    return _make(np.asarray(vals.sum() / n), (r,), bw)


def cross_entropy(logits, labels: np.ndarray, axis: int = -1) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    ax = axis % logits.ndim
    if labels.shape != logits.shape[:ax] + logits.shape[ax + 1:]:
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape} on axis {axis}")
    lp = log_softmax(logits, axis=ax)
    picked = np.take_along_axis(lp.data, np.expand_dims(labels, ax), axis=ax)
    n = labels.size

    def bw(g):
        grad = np.zeros_like(lp.data)
        np.put_along_axis(grad, np.expand_dims(labels, ax), -g / n, axis=ax)
        _accum(lp, grad)

    return _make(np.asarray(-picked.sum() / n), (lp,), bw)


def cross3(a, b) -> Tensor:
    """Cross product along the last axis (extent 3)."""
    a, b = as_tensor(a), as_tensor(b)
    ax, ay, az = a[..., 0], a[..., 1], a[..., 2]
    bx, by, bz = b[..., 0], b[..., 1], b[..., 2]
    return stack([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], axis=-1)


# ---------------------------------------------------------------- dispatcher

PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "scale": scale,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "slice": slice_axis,
    "transpose": transpose,
    "relu_like_activation": gelu,
    "relu": relu,
    "sum": tsum,
    "mean": mean,
}


def apply_primitive(kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}; expected one of {sorted(PRIMITIVES)}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------- backward pass

class Tape:
    """Topologically ordered nodes reachable from an output."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack_: list[tuple[Tensor, bool]] = [(output, False)]
        while stack_:
            node, done = stack_.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack_.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n._backward is None and n.requires_grad]


def backward(output: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Accumulate d(output)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns a map leaf -> gradient. Tensors listed in ``wrt`` that the output
    does not depend on map to zeros.
    """
    if output.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    tape = Tape.record(output)
    if output._backward is None:
        _accum(output, np.ones_like(output.data))
    else:
        output.grad = np.ones_like(output.data)
    for node in reversed(tape.nodes):
        if node._backward is None or node.grad is None:
            continue
        node._backward(node.grad)
        # interior adjoints are transient
        node.grad = None
    grads = {leaf: leaf.grad for leaf in tape.leaves() if leaf.grad is not None}
    if wrt is not None:
        for t in wrt:
            if t not in grads:
                grads[t] = t.grad if t.grad is not None else np.zeros_like(t.data)
    return grads


# ---------------------------------------------------------------- gradient checking

class GradCheckResult(float):
    """Max relative error, carrying the coordinates skipped as kinks."""

    kinks: list[tuple[int, ...]]
    worst: tuple[int, ...] | None

    def __new__(cls, value, kinks=(), worst=None):
        obj = super().__new__(cls, value)
        obj.kinks = list(kinks)
        obj.worst = worst
        return obj


def grad_check(
    fn: Callable[[Tensor], Tensor],
    point: np.ndarray,
    step: float = 1e-6,
    coords: Sequence[tuple[int, ...]] | None = None,
    kink_tol: float = 1e-3,
) -> GradCheckResult:
    """Compare the analytic gradient of scalar ``fn`` at ``point`` to central differences.

    Error per coordinate is |analytic - fd| / max(1, |fd|). Coordinates where the
    one-sided differences disagree by more than ``kink_tol`` (relative) sit on a
    nondifferentiable point; they are reported in ``.kinks`` and excluded.
    """
    point = np.array(point, dtype=np.float64)
    x = Tensor(point, requires_grad=True)
    out = fn(x)
    if out.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
    f0 = float(out.data)
    if not np.isfinite(f0):
        raise FloatingPointError("fn is non-finite at the base point")
    analytic = backward(out, wrt=[x])[x]
    if coords is None:
        coords = list(np.ndindex(point.shape))

    def ev(p):
        with no_grad():
            return float(fn(Tensor(p)).data)

    worst, where, kinks = 0.0, None, []
    for c in coords:
        c = tuple(int(i) for i in c)
        xp = point.copy()
        xm = point.copy()
        xp[c] += step
        xm[c] -= step
        fp, fm = ev(xp), ev(xm)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"fn is non-finite near coordinate {c}")
        fd = (fp - fm) / (2 * step)
        fwd, bwd = (fp - f0) / step, (f0 - fm) / step
        if abs(fwd - bwd) > kink_tol * max(1.0, abs(fd)):
            kinks.append(c)
            continue
        err = abs(analytic[c] - fd) / max(1.0, abs(fd))
        if err > worst:
            worst, where = err, c
    return GradCheckResult(worst, kinks, where)
