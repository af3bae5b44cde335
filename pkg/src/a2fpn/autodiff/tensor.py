"""Dense float64 tensors and the append-only tape that differentiates them.

Operations only record onto a tape while one is active (``with Tape() as tape``)
and at least one input has ``requires_grad``.  Outside a tape every op is a plain
numpy computation, which is what inference and finite differencing rely on.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import DimensionError, TapeError

MAX_RANK = 4

_TAPE_STACK: list = []


def active_tape() -> Optional["Tape"]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class no_grad:
    """Context manager that suspends recording, even inside an active tape."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


class _Node:
    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op: str, inputs: tuple, backward: Callable):
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Append-only record of differentiable operations.

    Node order is topological by construction, so ``backward`` simply walks the
    list in reverse.  A tape is single-use: after ``backward`` it must be
    ``reset`` before it records or differentiates again.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self):
        if self.consumed:
            raise TapeError("tape already consumed by backward(); call reset() first")
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        # tolerate exits out of order with nested no_grad blocks
        for i in range(len(_TAPE_STACK) - 1, -1, -1):
            if _TAPE_STACK[i] is self:
                del _TAPE_STACK[i]
                break
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, op: str, out: "Tensor", inputs: tuple, backward: Callable) -> None:
        if self.consumed:
            raise TapeError("cannot record onto a consumed tape; call reset() first")
        out._tape = self
        out._index = len(self.nodes)
        self.nodes.append(_Node(op, inputs, backward))

    def reset(self) -> None:
        self.nodes = []
        self.consumed = False

    def backward(self, loss: "Tensor", params: Optional[Sequence["Tensor"]] = None):
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

        If ``params`` is given, returns their gradients as a list of arrays, with
        zeros for parameters the loss does not depend on.
        """
        if self.consumed:
            raise TapeError("backward() already called on this tape; call reset() first")
        if loss.data.size != 1:
            raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not produced under this tape")

        grads = {loss._index: np.ones_like(loss.data)}
        for idx in range(loss._index, -1, -1):
            g = grads.pop(idx, None)
            if g is None:
                continue
            node = self.nodes[idx]
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t._tape is self:
                    prev = grads.get(t._index)
                    grads[t._index] = gi if prev is None else prev + gi
                elif t.grad is None:
                    t.grad = np.array(gi, dtype=np.float64)
                else:
                    t.grad += gi
        self.consumed = True
        self.nodes = []
        if params is not None:
            return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
        return None


class Tensor:
    """Float64 array of rank 0-4 with an optional handle into a tape."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} exceeds the supported maximum of {MAX_RANK}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None
        self._index = -1

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self._tape is None:
            raise TapeError("tensor was not produced under a tape")
        self._tape.backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic delegates to the functional layer (broadcasting allowed)
    def __add__(self, other):
        from . import functional as F

        return F.add(self, other, broadcast=True)

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

        return F.mul(self, -1.0)

    def __matmul__(self, other):
        from . import functional as F

        return F.matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        from . import functional as F

        return F.sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import functional as F

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        from . import functional as F

        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.permute(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
