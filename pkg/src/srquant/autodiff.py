"""Reverse-mode automatic differentiation over dense float32 arrays.

A :class:`Tape` records every primitive executed while it is active, together
with a closure computing the primitive's vector-Jacobian product.
:func:`backward` replays the records in exact reverse order and accumulates
gradients into the leaves. :class:`Parameter` leaves carry two named gradient
buffers (``grad_r`` and ``grad_v``) so that two losses computed from the same
forward pass can be differentiated separately; plain :class:`Tensor` leaves
receive their gradient in ``.grad``.

The engine is single threaded per tape. Distinct tapes never share state and
may be driven from different threads.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractViolation, UsageError

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "backward",
    "record_op",
    "active_tape",
]


class Tensor:
    """A dense float32 array plus an optional gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data) -> None:
        arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def require_finite(self, context: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise ContractViolation(f"{context}: non-finite values present")
        return self

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"


class Parameter(Tensor):
    """Trainable leaf with separate gradient buffers for two losses.

    ``grad_r`` collects gradients of the reconstruction objective and
    ``grad_v`` those of the variance regularizer. Both buffers always exist,
    always match ``data`` in shape, and must be zeroed between optimizer
    steps via :meth:`zero_grad`.
    """

    __slots__ = ("name", "grad_r", "grad_v", "_populated")

    def __init__(self, data, name: str = "") -> None:
        super().__init__(data)
        self.name = name
        self.grad_r = np.zeros_like(self.data)
        self.grad_v = np.zeros_like(self.data)
        self._populated = False

    def zero_grad(self) -> None:
        self.grad_r[...] = 0.0
        self.grad_v[...] = 0.0
        self._populated = False

    @property
    def grads_populated(self) -> bool:
        """True once a backward pass has written into a gradient buffer."""
        return self._populated

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.data.shape})"


# A VJP takes the upstream gradient array and returns one gradient array (or
# None) per recorded input, in input order.
Vjp = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of primitives for one forward pass.

    Entering the tape as a context manager makes it the active recording
    target. By default a tape is consumed by its first backward pass;
    ``backward(..., retain=True)`` keeps it replayable so a second loss from
    the same forward can be differentiated.
    """

    def __init__(self) -> None:
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Vjp]] = []
        self._outputs: set[int] = set()
        self._consumed = False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Vjp) -> None:
        self._records.append((out, inputs, vjp))
        self._outputs.add(id(out))

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._records)


_TAPE_STACK: list[Tape] = []


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record_op(out: Tensor, inputs: tuple[Tensor, ...], vjp: Vjp) -> None:
    """Record a primitive on the active tape, if any.

    This is the extension point for modules that contribute their own
    gradient rules (the fake quantizer registers its straight-through rule
    here).
    """
    tape = active_tape()
    if tape is not None:
        tape.record(out, inputs, vjp)


def backward(tape: Tape, loss: Tensor, slot: str = "r", retain: bool = False) -> None:
    """Accumulate vector-Jacobian products of ``loss`` through ``tape``.

    ``slot`` selects the Parameter buffer that receives gradients ("r" or
    "v"). Plain Tensor leaves get their gradient written to ``.grad``
    regardless of the slot. Unless ``retain`` is true the tape is consumed
    and a second call raises :class:`UsageError`.
    """
    if tape._consumed:
        raise UsageError("backward on an already-consumed tape")
    if loss.data.size != 1:
        raise UsageError(f"loss must be a scalar, got shape {loss.data.shape}")
    if tape._records and id(loss) not in tape._outputs:
        raise UsageError("loss was not produced under this tape")
    if slot not in ("r", "v"):
        raise UsageError(f"unknown gradient slot {slot!r}")

    # id -> (tensor, accumulated gradient); outputs are popped as their
    # record is replayed, so only leaves remain at the end.
    grads: dict[int, tuple[Tensor, np.ndarray]] = {
        id(loss): (loss, np.ones_like(loss.data))
    }
    for out, inputs, vjp in reversed(tape._records):
        entry = grads.pop(id(out), None)
        if entry is None:
            continue
        upstream = entry[1]
        contribs = vjp(upstream)
        for tensor, contrib in zip(inputs, contribs):
            if contrib is None:
                continue
            held = grads.get(id(tensor))
            if held is None:
                grads[id(tensor)] = (tensor, np.array(contrib, dtype=np.float32))
            else:
                held[1][...] += contrib

    for tensor, grad in grads.values():
        if isinstance(tensor, Parameter):
            buf = tensor.grad_r if slot == "r" else tensor.grad_v
            buf += grad
            tensor._populated = True
        else:
            tensor.grad = grad

    if not retain:
        tape._consumed = True
