"""Dense float64 tensors recorded on a reverse-mode differentiation tape.

Layout convention for 4-D data is [batch N, channels C, height H, width W].
Ops live in :mod:`mgunet.ops`; they call :func:`record` so that every
differentiable operation lands on the currently active tape in execution
order, which is automatically topological for define-by-run graphs.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError

__all__ = ["Tensor", "Tape", "TapeEntry", "record", "backward", "no_grad", "active_tape"]


class Tensor:
    """N-dimensional float64 array, optionally tracked for gradients.

    ``grad`` is allocated lazily by the backward pass and always matches the
    shape of ``data``.  Tensors are treated as immutable once created; the
    optimizer's parameter update is the single sanctioned exception.
    """

    __slots__ = ("data", "grad", "requires_grad", "_node_id", "_node_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._node_id = None
        self._node_tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def node_id(self):
        return self._node_id

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class TapeEntry:
    """One recorded operation: inputs, output and its vector-Jacobian rule.

    ``backward_fn(grad_out)`` returns one gradient array (or None) per input,
    in input order.
    """

    __slots__ = ("op", "inputs", "output", "backward_fn", "in_ids", "out_id")

    def __init__(self, op, inputs, output, backward_fn, in_ids, out_id):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.in_ids = in_ids
        self.out_id = out_id


class Tape:
    """Execution-ordered record of operations; a context manager.

    Invariant: every input of a recorded op was assigned its node id before
    the op's output, so entry order is a topological order of the graph.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._next_id = 0

    def _assign(self, t: Tensor) -> int:
        if t._node_tape is not self:
            t._node_id = self._next_id
            t._node_tape = self
            self._next_id += 1
        return t._node_id

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"
        return False

    def __len__(self):
        return len(self.entries)


_TAPE_STACK: list = []


def active_tape():
    """The innermost active tape, or None when not recording."""
    if _TAPE_STACK and _TAPE_STACK[-1] is not None:
        return _TAPE_STACK[-1]
    return None


class no_grad:
    """Masks any active tape so ops inside run without being recorded."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False


def record(op: str, inputs, out_data: np.ndarray, backward_fn) -> Tensor:
    """Create the output tensor of an op, recording it if a tape is active.

    The output requires gradients iff any input does; ops whose inputs are
    all constant leave no trace on the tape.
    """
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        in_ids = tuple(tape._assign(t) for t in inputs)
        out_id = tape._assign(out)
        tape.entries.append(TapeEntry(op, tuple(inputs), out, backward_fn, in_ids, out_id))
    return out


def backward(loss: Tensor):
    """Populate ``grad`` on every tensor the scalar ``loss`` depends on.

    Visits each recorded op exactly once, in reverse execution order.
    Gradients accumulate additively, so a tensor used several times receives
    the sum of all its contributions.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    tape = loss._node_tape
    if tape is None:
        raise ContractError("loss was not recorded on any tape (no grad to propagate)")

    loss.grad = np.ones_like(loss.data)
    for entry in reversed(tape.entries):
        g = entry.output.grad
        if g is None:
            continue
        grads = entry.backward_fn(g)
        for t, gi in zip(entry.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = np.array(gi, dtype=np.float64, copy=True)
            else:
                t.grad += gi
