"""Tensor values and the recording tape used for reverse-mode differentiation."""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

MAX_DIMS = 4

# Stack of active tapes; ``None`` entries come from ``no_grad`` blocks.
_TAPES: list["Tape | None"] = []


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class Tensor:
    """Dense float array with an optional link to the tape node that produced it.

    Data is float32 unless a float64 array is supplied (finite-difference
    oracles run in float64).
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = np.float64 if arr.dtype == np.float64 else np.float32
        arr = np.asarray(arr, dtype=dtype, order="C")
        if arr.ndim > MAX_DIMS:
            raise ShapeError(f"tensor rank {arr.ndim} exceeds {MAX_DIMS}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._node: Node | None = None

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # Operator sugar; the implementations live in ``functional``.
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
        if isinstance(other, Tensor):
            return F.div(self, other)
        return F.mul(self, 1.0 / other)

    def __neg__(self):
        from . import functional as F
        return F.mul(self, -1.0)

    def __getitem__(self, key):
        from . import functional as F
        return F.index(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        from . import functional as F
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import functional as F
        return F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)


class Node:
    __slots__ = ("out", "parents", "backward", "tape")

    def __init__(self, out: Tensor, parents: Sequence[Tensor], backward: Callable, tape: "Tape"):
        self.out = out
        self.parents = tuple(parents)
        self.backward = backward
        self.tape = tape


class Tape:
    """Ordered record of differentiable operations.

    Operations executed inside ``with Tape() as tape:`` are appended in
    execution order, which is also a valid topological order for the reverse
    sweep.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPES.pop()
        assert popped is self, "tape stack corrupted"

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, parents: Sequence[Tensor], backward: Callable) -> None:
        node = Node(out, parents, backward, self)
        out._node = node
        self.nodes.append(node)

    def backward(self, loss: Tensor, params: Iterable[Tensor] = ()) -> list[np.ndarray]:
        """Propagate d(loss)/d(.) to every leaf reachable from ``loss``.

        Leaf tensors receive ``.grad``. Tensors listed in ``params`` that are
        not reachable get a zero gradient. Returns the gradients of ``params``
        in order.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._node is None or loss._node.tape is not self:
            raise ValueError("loss was not recorded on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        leaf_grads: dict[int, np.ndarray] = {}
        stop = self.nodes.index(loss._node)
        for node in reversed(self.nodes[: stop + 1]):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._node is None or parent._node.tape is not self:
                    key = id(parent)
                    leaves[key] = parent
                    if key in leaf_grads:
                        leaf_grads[key] = leaf_grads[key] + pg
                    else:
                        leaf_grads[key] = pg
                else:
                    key = id(parent)
                    grads[key] = grads[key] + pg if key in grads else pg

        for key, leaf in leaves.items():
            leaf.grad = np.asarray(leaf_grads[key], dtype=leaf.dtype).reshape(leaf.shape)
        out = []
        for p in params:
            if id(p) not in leaves:
                p.grad = np.zeros_like(p.data)
            out.append(p.grad)
        return out


def current_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


@contextlib.contextmanager
def no_grad():
    """Suspend recording for the enclosed block."""
    _TAPES.append(None)
    try:
        yield
    finally:
        _TAPES.pop()


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as the output of an op; record it if any parent needs grad.

    ``backward`` maps the output gradient to a tuple with one entry (array or
    None) per parent.
    """
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, backward)
    return out


def backward(loss: Tensor, params: Iterable[Tensor] = ()) -> list[np.ndarray]:
    """Run the reverse sweep on the tape that recorded ``loss``."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise ValueError("loss is not on a tape")
    return loss._node.tape.backward(loss, params)
