"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable primitive records one entry on the active
:class:`ComputationTape`. ``backward`` replays the tape in reverse and
accumulates gradients into leaf tensors. The engine is deliberately small:
it covers exactly the graph needed by the backbone, the hypernetwork, the
prototype path and the distillation losses.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class DomainError(ValueError):
    """An op was evaluated outside its mathematical domain."""


class ContractError(RuntimeError):
    """An engine-level precondition was violated."""


_local = threading.local()


def _tape_stack() -> list["ComputationTape"]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = [ComputationTape()]
        _local.tapes = stack
    return stack


def current_tape() -> "ComputationTape":
    return _tape_stack()[-1]


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording them."""
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


@dataclass
class TapeEntry:
    name: str
    output: "Tensor"
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class ComputationTape:
    """Ordered record of executed primitives.

    Used as a context manager, the tape becomes the active recording target
    for the current thread; the previous tape is restored on exit.
    """

    def __init__(self) -> None:
        self.entries: list[TapeEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    def __enter__(self) -> "ComputationTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack[-1] is not self:
            raise ContractError("tapes must be exited in LIFO order")
        stack.pop()

    def clear(self) -> None:
        self.entries.clear()

    def record(self, name, output, inputs, backward) -> None:
        output._tape = self
        self.entries.append(TapeEntry(name, output, tuple(inputs), backward))

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        seed = np.ones_like(loss.data)
        if loss.is_leaf:
            if loss.requires_grad:
                loss._accumulate(seed)
            return
        if loss._tape is not self:
            raise ContractError("loss was not produced by ops on this tape")

        pending: dict[int, np.ndarray] = {id(loss): seed}
        for entry in reversed(self.entries):
            g = pending.pop(id(entry.output), None)
            if g is None:
                continue
            grads = entry.backward(g)
            for t, gi in zip(entry.inputs, grads):
                if gi is None or not t.requires_grad:
                    continue
                if t.is_leaf:
                    t._accumulate(gi)
                elif id(t) in pending:
                    pending[id(t)] = pending[id(t)] + gi
                else:
                    pending[id(t)] = gi


def backward(loss: "Tensor") -> None:
    """Backpropagate a scalar loss through the tape that produced it."""
    tape = loss._tape if loss._tape is not None else current_tape()
    tape.backward(loss)


class Tensor:
    """A numpy array that can take part in reverse-mode differentiation."""

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if dtype is None and arr.dtype.kind in "biu":
            arr = arr.astype(np.float64)
        if arr.dtype.kind != "f":
            raise TypeError(f"tensor data must be real, got {arr.dtype}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.is_leaf = True
        self.name = name
        self._tape: ComputationTape | None = None

    # -- basic protocol -----------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    def _accumulate(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=self.data.dtype).reshape(self.data.shape)
        self.grad = g.copy() if self.grad is None else self.grad + g

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _make(name: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._tape = None
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    out.is_leaf = not needs
    if needs:
        current_tape().record(name, out, inputs, backward_fn)
    return out


# -- broadcasting -------------------------------------------------------------
def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    short, long_ = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(short) < len(long_) and long_[len(long_) - len(short):] == short:
        return
    raise ShapeError(f"{op}: shapes {sa} and {sb} are not trailing-dimension compatible")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


# -- primitives ---------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def back(g):
        return (g @ B.T if a.requires_grad else None,
                A.T @ g if b.requires_grad else None)

    return _make("matmul", A @ B, (a, b), back)


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("add needs at least one tensor")
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast("add", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("sub needs at least one tensor")
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast("sub", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make("sub", a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast("mul", a, b)
    A, B = a.data, b.data

    def back(g):
        return (_unbroadcast(g * B, a.shape) if a.requires_grad else None,
                _unbroadcast(g * A, b.shape) if b.requires_grad else None)

    return _make("mul", A * B, (a, b), back)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scale", x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # np.maximum keeps NaN visible to divergence checks
    return _make("relu", np.maximum(x.data, 0).astype(x.dtype), (x,),
                 lambda g: (_relu_backward(g, mask),))


def _relu_backward(g: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return g * mask


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log: input has non-positive entries")
    X = x.data
    return _make("log", np.log(X), (x,), lambda g: (g / X,))


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    return axis % ndim


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    axis = _norm_axis(axis, x.ndim)
    shape = x.shape

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", np.asarray(x.data.sum(axis=axis)), (x,), back)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    axis = _norm_axis(axis, x.ndim)
    n = x.size if axis is None else x.shape[axis]
    shape = x.shape

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make("mean", np.asarray(x.data.mean(axis=axis)), (x,), back)


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax with max subtraction."""
    if x.ndim != 2:
        raise ShapeError(f"log_softmax expects [batch, C], got {x.shape}")
    if x.shape[1] < 2:
        raise ShapeError("log_softmax needs at least 2 classes")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)

    def back(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return _make("log_softmax", out, (x,), back)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {src} as {shape}") from exc
    return _make("reshape", out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {x.shape}")
    return _make("transpose", x.data.T.copy(), (x,), lambda g: (g.T,))


def narrow(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``x[start:stop]`` along the leading axis."""
    n = x.shape[0]
    if not 0 <= start <= stop <= n:
        raise ShapeError(f"narrow: [{start}:{stop}] out of range for leading dim {n}")
    shape = x.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return _make("narrow", x.data[start:stop].copy(), (x,), back)


def concat(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the leading axis."""
    xs = list(xs)
    if not xs:
        raise ShapeError("concat of an empty list")
    tail = xs[0].shape[1:]
    for t in xs:
        if t.shape[1:] != tail:
            raise ShapeError(f"concat: trailing shapes differ ({xs[0].shape} vs {t.shape})")
    bounds = np.cumsum([0] + [t.shape[0] for t in xs])

    def back(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return _make("concat", np.concatenate([t.data for t in xs], axis=0), xs, back)


def stack(xs: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    xs = list(xs)
    if not xs:
        raise ShapeError("stack of an empty list")
    for t in xs:
        if t.shape != xs[0].shape:
            raise ShapeError(f"stack: shapes differ ({xs[0].shape} vs {t.shape})")

    def back(g):
        return tuple(g[i] for i in range(len(xs)))

    return _make("stack", np.stack([t.data for t in xs]), xs, back)


def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row ``i`` holds the bilinear weights of output pixel ``i`` (align_corners=False)."""
    if n_in < 1 or n_out < 1:
        raise ShapeError("interpolation sizes must be positive")
    M = np.zeros((n_out, n_in))
    ratio = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * ratio - 0.5, 0.0)
        lo = min(int(np.floor(src)), n_in - 1)
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        M[i, lo] += 1.0 - frac
        M[i, hi] += frac
    return M


def resize_bilinear(x: Tensor, h: int, w: int) -> Tensor:
    """Bilinearly resize the last two axes of ``x`` to ``(h, w)``."""
    if x.ndim < 2:
        raise ShapeError(f"resize needs at least 2 dims, got {x.shape}")
    H, W = x.shape[-2:]
    Mh = interpolation_matrix(H, h).astype(x.dtype)
    Mw = interpolation_matrix(W, w).astype(x.dtype)
    out = np.einsum("ih,...hw,jw->...ij", Mh, x.data, Mw)

    def back(g):
        return (np.einsum("ih,...ij,jw->...hw", Mh, g, Mw),)

    return _make("resize_bilinear", out, (x,), back)


PRIMITIVES: tuple[str, ...] = (
    "matmul", "add", "sub", "mul", "scale", "relu", "exp", "log", "sum", "mean",
    "log_softmax", "reshape", "transpose", "narrow", "concat", "stack", "resize_bilinear",
)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> float:
    """Max relative gap between the analytic gradient of ``f`` and central differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    ``f`` may close over other tensors; only ``x`` is perturbed, in place,
    and restored afterwards.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    saved_flag, saved_grad = x.requires_grad, x.grad
    x.requires_grad, x.grad = True, None
    try:
        with ComputationTape() as tape:
            out = f(x)
            if not isinstance(out, Tensor) or out.size != 1:
                raise ContractError("grad_check: f must return a scalar tensor")
            tape.backward(out)
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

        base = x.data.copy()
        flat = x.data.reshape(-1)
        numeric = np.empty(flat.size)
        with no_grad():
            for i in range(flat.size):
                flat[i] = base.flat[i] + eps
                fp = f(x).item()
                flat[i] = base.flat[i] - eps
                fm = f(x).item()
                flat[i] = base.flat[i]
                numeric[i] = (fp - fm) / (2 * eps)
        x.data[...] = base
        err = np.abs(analytic.reshape(-1) - numeric) / np.maximum(1.0, np.abs(numeric))
        return float(err.max()) if err.size else 0.0
    finally:
        x.requires_grad, x.grad = saved_flag, saved_grad


def parameters_with_grad(params: Iterable[Tensor]) -> list[Tensor]:
    return [p for p in params if p.grad is not None]
