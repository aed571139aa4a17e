"""Dense tensor with a reverse-mode computation tape.

Every differentiable op appends one node to the tape of the current thread.
``backward`` walks the tape in exact reverse execution order and clears it.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

_state = threading.local()


class Tape:
    """Ordered record of executed ops: ``(output, parents, backward_fn)``."""

    def __init__(self) -> None:
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def record(self, out: "Tensor", parents: tuple["Tensor", ...], fn: Callable) -> None:
        self.nodes.append((out, parents, fn))

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


def current_tape() -> Tape:
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = _state.tape = Tape()
    return tape


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class NonFiniteError(FloatingPointError):
    pass


_debug = {"check_finite": False}


def set_debug(check_finite: bool) -> None:
    """Enable NaN/Inf detection on every op output."""
    _debug["check_finite"] = bool(check_finite)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_produced", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._produced = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic sugar; the ops live in functional
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import functional as F
        return F.div(self, other)

    def __rtruediv__(self, other):
        from . import functional as F
        return F.div(other, self)

    def __neg__(self):
        from . import functional as F
        return F.neg(self)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def __getitem__(self, idx):
        from . import functional as F
        return F.getitem(self, idx)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        from . import functional as F
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import functional as F
        return F.mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def make(out: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result; record a tape node when any parent needs a gradient."""
    if _debug["check_finite"] and not np.all(np.isfinite(out)):
        raise NonFiniteError("non-finite value produced by a tensor op")
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    t = Tensor(out)
    if needs:
        t.requires_grad = True
        t._produced = True
        current_tape().record(t, tuple(parents), backward_fn)
    return t


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``; clears the tape.

    Leaf gradients accumulate across calls, as with a fan-out inside one graph.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = current_tape()
    if not loss.requires_grad:
        tape.clear()
        return
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    try:
        for out, parents, fn in reversed(tape.nodes):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            pgrads = fn(g)
            for p, pg in zip(parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                if p._produced:
                    prev = pending.get(id(p))
                    pending[id(p)] = pg if prev is None else prev + pg
                else:
                    pg = np.asarray(pg, dtype=p.dtype).reshape(p.shape)
                    p.grad = pg.copy() if p.grad is None else p.grad + pg
        if id(loss) in pending and not loss._produced:
            loss.grad = pending.pop(id(loss))
    finally:
        tape.clear()
