"""Dense tensor type and the gradient tape that records operations on it."""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape() -> Optional["Tape"]:
    """Return the innermost tape recording on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """N-dimensional real array that can take part in reverse-mode differentiation.

    Tensors produced by ops are never modified afterwards. Leaf tensors
    (parameters, inputs) may have their ``data`` replaced by an optimizer.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
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
        return float(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic forwards to the functional ops
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

    def __neg__(self):
        from . import functional as F
        return F.mul(self, -1.0)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def sum(self, axis=None):
        from . import functional as F
        return F.sum(self, axis=axis)

    def mean(self, axis=None):
        from . import functional as F
        return F.mean(self, axis=axis)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        from . import functional as F
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.transpose(self, axes or None)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


@dataclass
class Node:
    """One recorded op: its output, its inputs, and the rule mapping the
    output gradient to input gradients."""

    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Records differentiable ops executed inside its ``with`` block.

    Nodes are appended in execution order, which is already a topological
    order of the graph, so ``backward`` walks them in reverse exactly once.
    A tape can be consumed by a single ``backward`` call.

    Example:
        >>> w = Tensor([1.0, -2.0], requires_grad=True)
        >>> with Tape() as tape:
        ...     loss = (w * w).sum()
        >>> tape.backward(loss)
        >>> w.grad
        array([ 2., -4.])
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise RuntimeError("tape has already been consumed by backward()")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted: tapes must be exited in LIFO order")
        stack.pop()

    def record(self, node: Node) -> None:
        if self.consumed:
            raise RuntimeError("cannot record on a consumed tape")
        self.nodes.append(node)

    def _propagate(self, loss: Tensor) -> dict:
        if self.consumed:
            raise RuntimeError("backward() called twice on the same tape")
        self.consumed = True
        if loss.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")

        grads: dict[int, np.ndarray] = {}
        leaves: dict[int, Tensor] = {}
        if loss.requires_grad:
            grads[id(loss)] = np.ones_like(loss.data)
        produced = {id(node.output) for node in self.nodes}

        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                key = id(inp)
                if key not in produced:
                    leaves[key] = inp
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        # Loss could itself be a leaf (no ops recorded).
        if loss.requires_grad and id(loss) not in produced:
            leaves[id(loss)] = loss
        self.nodes = []
        return {key: (leaves[key], grads[key]) for key in leaves if key in grads}

    def backward(self, loss: Tensor) -> None:
        """Fill ``.grad`` on every leaf tensor that requires grad and influenced ``loss``.

        Existing ``.grad`` values are overwritten, not accumulated.
        """
        for leaf, g in self._propagate(loss).values():
            leaf.grad = g

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Return d(loss)/d(source) for each source; zeros where there is no path."""
        found = self._propagate(loss)
        out = []
        for src in sources:
            hit = found.get(id(src))
            out.append(hit[1] if hit is not None else np.zeros_like(src.data))
        return out


def record(op: str, out_data: np.ndarray, inputs: tuple, backward) -> Tensor:
    """Wrap ``out_data`` in a Tensor and log a node if any input needs a gradient."""
    tape = active_tape()
    needs = tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs, dtype=out_data.dtype if out_data.dtype.kind == "f" else None)
    if needs:
        tape.record(Node(op, inputs, out, backward))
    return out
