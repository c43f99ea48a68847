"""Dense 4-D tensors with tape-based reverse-mode differentiation.

Every tensor is a contiguous (N, C, H, W) array of 32-bit reals, optionally
carrying a gradient buffer of identical shape.  Ops record their backward rule
on the innermost active :class:`GradTape`; replaying the tape in reverse
accumulates gradients additively into every tensor that requires them.

Reductions here (and the convolutions in :mod:`cfsr.layers`) accumulate in
float64 before casting back to the storage dtype.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable

import numpy as np

from .errors import ShapeError

_default_dtype = np.dtype(np.float32)
_tape_stack: list["GradTape"] = []


def default_dtype() -> np.dtype:
    """Storage dtype of newly constructed tensors (float32 unless overridden)."""
    return _default_dtype


@contextmanager
def compute_dtype(dtype):
    """Run a block with a different storage dtype.

    The gradient-oracle tests build their graphs under float64 so central
    finite differences are not drowned by float32 rounding; production code
    never changes the default.
    """
    global _default_dtype
    previous = _default_dtype
    _default_dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _default_dtype = previous


class Tensor:
    """Dense (N, C, H, W) value, optionally carrying a same-shape gradient."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=_default_dtype)
        if arr.ndim != 4:
            raise ShapeError(
                f"tensors are 4-D (N,C,H,W); got {arr.ndim}-D data with shape {arr.shape}"
            )
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def numel(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class GradTape:
    """Ordered record of differentiable ops, replayed in reverse by backward().

    Used as a context manager; ops executed inside the block are recorded.
    Accumulation is additive, so a tensor consumed twice receives the sum of
    both gradient contributions.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "GradTape":
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _tape_stack.pop()
        return False

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, backprop: Callable[[np.ndarray], None]) -> None:
        self._records.append((out, backprop))


def active_tape() -> GradTape | None:
    return _tape_stack[-1] if _tape_stack else None


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    """Add ``g`` into ``t.grad``, allocating the buffer on first use."""
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def tape_record(out: Tensor, wants_grad: bool, backprop: Callable[[np.ndarray], None]) -> Tensor:
    """Attach a backward rule to ``out`` when a tape is active and needed."""
    tape = active_tape()
    if tape is not None and wants_grad:
        out.requires_grad = True
        tape.record(out, backprop)
    return out


def backward(loss: Tensor, tape: GradTape) -> None:
    """Fill ``.grad`` on every recorded tensor reachable from a scalar loss."""
    if loss.shape != (1, 1, 1, 1):
        raise ShapeError(f"backward needs a scalar loss of shape (1,1,1,1); got {loss.shape}")
    accumulate_grad(loss, np.ones((1, 1, 1, 1), dtype=loss.data.dtype))
    for out, backprop in reversed(tape._records):
        if out.grad is not None:
            backprop(out.grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def scalar(value: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full((1, 1, 1, 1), value, dtype=np.float64), requires_grad=requires_grad)


def _broadcast_kind(a: Tensor, b: Tensor) -> str:
    """Elementwise ops take equal shapes, or a (1,C,1,1) second operand."""
    if a.shape == b.shape:
        return "same"
    if b.shape == (1, a.shape[1], 1, 1):
        return "channel"
    raise ShapeError(
        f"shapes {a.shape} and {b.shape} are not compatible: "
        "need equal shapes or a (1,C,1,1) second operand"
    )


def _reduce_to_channel(g: np.ndarray) -> np.ndarray:
    return g.sum(axis=(0, 2, 3), keepdims=True, dtype=np.float64)


def add(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b)
    out = Tensor(a.data + b.data)

    def backprop(g: np.ndarray) -> None:
        if a.requires_grad:
            accumulate_grad(a, g)
        if b.requires_grad:
            accumulate_grad(b, g if kind == "same" else _reduce_to_channel(g))

    return tape_record(out, a.requires_grad or b.requires_grad, backprop)


def sub(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b)
    out = Tensor(a.data - b.data)

    def backprop(g: np.ndarray) -> None:
        if a.requires_grad:
            accumulate_grad(a, g)
        if b.requires_grad:
            accumulate_grad(b, -g if kind == "same" else -_reduce_to_channel(g))

    return tape_record(out, a.requires_grad or b.requires_grad, backprop)


def mul_elementwise(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b)
    out = Tensor(a.data * b.data)
    a_val, b_val = a.data, b.data

    def backprop(g: np.ndarray) -> None:
        if a.requires_grad:
            accumulate_grad(a, g * b_val)
        if b.requires_grad:
            gb = g * a_val
            accumulate_grad(b, gb if kind == "same" else _reduce_to_channel(gb))

    return tape_record(out, a.requires_grad or b.requires_grad, backprop)


def sum_all(x: Tensor) -> Tensor:
    total = x.data.sum(dtype=np.float64)
    out = Tensor(np.full((1, 1, 1, 1), total))

    def backprop(g: np.ndarray) -> None:
        if x.requires_grad:
            accumulate_grad(x, np.full_like(x.data, g.reshape(-1)[0]))

    return tape_record(out, x.requires_grad, backprop)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    total = x.data.sum(dtype=np.float64) / n
    out = Tensor(np.full((1, 1, 1, 1), total))

    def backprop(g: np.ndarray) -> None:
        if x.requires_grad:
            accumulate_grad(x, np.full_like(x.data, g.reshape(-1)[0] / n))

    return tape_record(out, x.requires_grad, backprop)


def abs_val(x: Tensor) -> Tensor:
    """|x| with subgradient 0 at exact ties."""
    out = Tensor(np.abs(x.data))
    sign = np.sign(x.data)

    def backprop(g: np.ndarray) -> None:
        if x.requires_grad:
            accumulate_grad(x, g * sign)

    return tape_record(out, x.requires_grad, backprop)
