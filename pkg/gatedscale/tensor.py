"""Dense 4-D tensors and the tape that differentiates them.

A Tensor is always (N, C, H, W). Operations record themselves on the
active Tape (set with ``with Tape():``) when any input requires a
gradient; ``backward(loss)`` replays the recorded rules in reverse order.
"""

from __future__ import annotations

import contextlib
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from gatedscale.errors import ShapeError, TapeError

DTYPES = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}

BackwardRule = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A (batch, channel, height, width) array with an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPES.values():
            arr = arr.astype(np.float64)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are 4-D (N, C, H, W), got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __add__(self, other: Tensor) -> Tensor:
        from gatedscale import ops

        return ops.add(self, other)

    def __mul__(self, other) -> Tensor:
        from gatedscale import ops

        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, float(other))

    __rmul__ = __mul__

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


@dataclass
class Op:
    """One recorded operation: inputs, output, and how to send gradients back."""

    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardRule


_active: ContextVar["Tape | None"] = ContextVar("gatedscale_tape", default=None)


class Tape:
    """Ordered record of operations. Single-threaded; one per forward pass.

    A tape may be replayed once. A second ``backward`` raises TapeError until
    ``reset()`` is called.
    """

    def __init__(self):
        self.ops: list[Op] = []
        self.consumed = False
        self._tokens: list = []

    def record(self, op: Op) -> None:
        if self.consumed:
            raise TapeError("tape was already replayed; call reset() before recording")
        op.output._tape = self
        self.ops.append(op)

    def reset(self) -> None:
        for op in self.ops:
            op.output._tape = None
        self.ops.clear()
        self.consumed = False

    def __len__(self) -> int:
        return len(self.ops)

    def __enter__(self) -> Tape:
        self._tokens.append(_active.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _active.reset(self._tokens.pop())


def current_tape() -> Tape | None:
    return _active.get()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording anything."""
    token = _active.set(None)
    try:
        yield
    finally:
        _active.reset(token)


def record(name: str, inputs: Sequence[Tensor], data: np.ndarray, rule: BackwardRule) -> Tensor:
    """Wrap an op result in a Tensor and put it on the active tape if needed."""
    out = Tensor(data)
    tape = _active.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(Op(name, tuple(inputs), out, rule))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires_grad tensor that ``loss`` depends on.

    Gradients are added to any gradient already present, so parameters should
    be zeroed between steps (ParamStore.zero_grad does that).
    """
    if loss.shape != (1, 1, 1, 1):
        raise ShapeError(f"backward needs a scalar (1,1,1,1) loss, got {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss was not produced by a recorded operation")
    if tape.consumed:
        raise TapeError("backward already ran on this tape; reset it first")

    end = next((i for i in range(len(tape.ops) - 1, -1, -1) if tape.ops[i].output is loss), None)
    if end is None:
        raise TapeError("loss is no longer on its tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    touched: dict[int, Tensor] = {id(loss): loss}
    for op in reversed(tape.ops[: end + 1]):
        g = grads.get(id(op.output))
        if g is None:
            continue
        in_grads = op.backward(g)
        for t, gi in zip(op.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise ShapeError(
                    f"backward rule of {op.name} returned shape {gi.shape} for input {t.shape}"
                )
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                touched[key] = t
    tape.consumed = True

    for key, t in touched.items():
        g = np.asarray(grads[key], dtype=t.dtype)
        t.grad = g.copy() if t.grad is None else t.grad + g
    # tensors on the tape that the loss does not depend on
    for op in tape.ops:
        for t in op.inputs:
            if t.requires_grad and t.grad is None:
                t.zero_grad()
