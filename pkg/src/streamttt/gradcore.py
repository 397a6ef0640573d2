"""Minimal dense-tensor engine with reverse-mode autodiff and Adam.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their inputs requires a gradient. Outside a tape nothing is recorded,
which is how inference and finite-difference evaluation stay cheap.

All arithmetic is float64. Broadcasting is limited to scalar-with-tensor.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class GradcoreError(Exception):
    pass


class ShapeError(GradcoreError, ValueError):
    pass


class NumericError(GradcoreError, ArithmeticError):
    """Non-finite value produced or consumed by an operation."""


class DomainError(NumericError):
    """log/div applied outside their domain."""


class TapeError(GradcoreError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor values must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # trusted constructor for op outputs; finiteness is checked by the caller
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def zeros_like(a: Tensor) -> Tensor:
    return Tensor(np.zeros_like(a.data))


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Records operations in execution order (hence topologically sorted).

    Use as a context manager around a forward pass, then call
    :meth:`backward` on the scalar loss.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: dict[int, int] = {}
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape stack corrupted")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        for t in inputs:
            if t.requires_grad and id(t) not in self._produced:
                self._leaves.setdefault(id(t), t)
        self._produced[id(out)] = len(self.nodes)
        self.nodes.append(_Node(out, inputs, backward))

    @property
    def leaves(self) -> list[Tensor]:
        return list(self._leaves.values())

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> list[np.ndarray]:
        """Reverse sweep from ``loss``.

        Every requires_grad leaf seen by the tape gets ``.grad`` set (zeros if
        the loss does not depend on it). If ``wrt`` is given, gradients for
        those tensors are returned in order; tensors absent from the tape get
        zeros.
        """
        if loss.data.size != 1 or loss.data.ndim != 0:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise TapeError("loss is not on this tape (detached or constant)")

        grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
        for node in reversed(self.nodes[: self._produced[id(loss)] + 1]):
            g_out = grads.pop(id(node.out), None)
            if g_out is None:
                continue
            for inp, g in zip(node.inputs, node.backward(g_out)):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g

        for key, leaf in self._leaves.items():
            g = grads.get(key)
            leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=np.float64).reshape(leaf.shape)
        if wrt is None:
            return []
        out = []
        for t in wrt:
            g = grads.get(id(t))
            out.append(np.zeros_like(t.data) if g is None else np.asarray(g).reshape(t.shape).copy())
        return out


def backward(tape: Tape, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> list[np.ndarray]:
    return tape.backward(loss, wrt)


def _result(arr: np.ndarray, inputs: tuple[Tensor, ...], backward, opname: str) -> Tensor:
    if not np.isfinite(arr).all():
        raise NumericError(f"{opname} produced a non-finite value")
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, requires_grad=needs)
    if needs:
        tape.record(out, inputs, backward)
    return out


# --------------------------------------------------------------------------
# Elementwise
# --------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    # scalar operand: gradient is the total
    return np.asarray(g.sum()).reshape(shape)


def _binary_operands(a, b, opname: str) -> tuple[Tensor, Tensor]:
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(f"{opname}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    if np.any(b.data == 0.0):
        raise DomainError("div: division by zero")
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape))

    return _result(out, (a, b), bw, "div")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log: non-positive argument")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def abs_(a: Tensor) -> Tensor:
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0.0
    return _result(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    if lo > hi:
        raise ValueError("clamp: lo > hi")
    # boundary counts as inside: unit gradient at exactly lo or hi
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clamp")


_UNARY = {"exp": exp, "log": log, "square": square, "abs": abs_, "relu": relu,
          "tanh": tanh, "sigmoid": sigmoid}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a, b=None, *, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Dispatch by name, e.g. ``elementwise("clamp", x, lo=-1, hi=1)``."""
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](_as_tensor(a))
    if kind == "clamp":
        if lo is None or hi is None:
            raise ValueError("clamp needs lo and hi")
        return clamp(_as_tensor(a), lo, hi)
    raise ValueError(f"unknown elementwise op {kind!r}")


# --------------------------------------------------------------------------
# Structural
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ {a.shape} @ {b.shape}")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def reduce(kind: str, a: Tensor) -> Tensor:
    if a.data.size == 0:
        raise ShapeError("reduce on an empty tensor")
    if kind == "sum":
        return _result(np.asarray(a.data.sum()), (a,),
                       lambda g: (np.full(a.shape, float(g)),), "sum")
    if kind == "mean":
        n = a.data.size
        return _result(np.asarray(a.data.mean()), (a,),
                       lambda g: (np.full(a.shape, float(g) / n),), "mean")
    raise ValueError(f"unknown reduction {kind!r}")


def sum_(a: Tensor) -> Tensor:
    return reduce("sum", a)


def mean(a: Tensor) -> Tensor:
    return reduce("mean", a)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def take(a: Tensor, index) -> Tensor:
    """Basic (slice) indexing; gradient scatters back into a zero array."""
    out = a.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    def bw(g):
        full = np.zeros_like(a.data)
        full[index] += g
        return (full,)

    return _result(np.array(out, dtype=np.float64), (a,), bw, "take")


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    scratch: list[np.ndarray] | None = field(default=None, repr=False, compare=False)

    @classmethod
    def fresh(cls, params: Sequence[Tensor], beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params], 0, beta1, beta2, eps)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, applied in place to ``params``."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if not (len(params) == len(grads) == len(state.m)):
        raise ShapeError("params, grads and optimizer state differ in length")
    for p, g, m in zip(params, grads, state.m):
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"adam: shape mismatch for parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("adam: non-finite gradient, step aborted")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    # sqrt(v / bc2) == sqrt(v) / sqrt(bc2); the factored form needs fewer passes
    step_scale = lr / (1.0 - b1 ** state.t)
    inv_sqrt_bc2 = 1.0 / np.sqrt(1.0 - b2 ** state.t)
    if state.scratch is None:
        state.scratch = [np.empty_like(m) for m in state.m]
    for p, g, m, v, tmp in zip(params, grads, state.m, state.v, state.scratch):
        m *= b1
        np.multiply(g, 1.0 - b1, out=tmp)
        m += tmp
        v *= b2
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - b2
        v += tmp
        if lr == 0.0:
            continue
        np.sqrt(v, out=tmp)
        tmp *= inv_sqrt_bc2
        tmp += state.eps
        np.divide(m, tmp, out=tmp)
        tmp *= step_scale
        p.data -= tmp


class Adam:
    """Thin stateful wrapper over :func:`adam_step`."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState.fresh(self.params, beta1, beta2, eps)

    def step(self, grads: Sequence[np.ndarray], lr: float | None = None) -> None:
        adam_step(self.params, grads, self.state, self.lr if lr is None else lr)


# --------------------------------------------------------------------------
# Gradient checking
# --------------------------------------------------------------------------

def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
               n_samples: int | None = None, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` must be a pure function of ``params`` (it reads them through
    closure). With ``n_samples`` only that many randomly chosen coordinates
    are differenced.
    """
    if not 0.0 < h <= 1e-3:
        raise ValueError("h must lie in (0, 1e-3]")
    base = fn().item()
    if fn().item() != base:
        raise GradcoreError("function under test is not deterministic")
    with Tape() as tape:
        loss = fn()
    if id(loss) in tape._produced:
        analytic = tape.backward(loss, params)
    else:
        analytic = [np.zeros_like(p.data) for p in params]

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    if n_samples is not None and n_samples < len(coords):
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    worst = 0.0
    for i, j in coords:
        flat = params[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + h
        fp = fn().item()
        flat[j] = orig - h
        fm = fn().item()
        flat[j] = orig
        numeric = (fp - fm) / (2.0 * h)
        a = analytic[i].reshape(-1)[j]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
