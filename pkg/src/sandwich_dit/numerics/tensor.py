"""Dense tensor with a small reverse-mode tape.

Every differentiable operation is an :class:`OpDef` holding a forward rule and a
vector-Jacobian product. Applying an op to tensors that require gradients records
an :class:`OpNode` carrying exactly the activations the forward rule chose to
save; :func:`backward` replays the recorded nodes in reverse topological order.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Sequence

import numpy as np

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)


class NumericsError(Exception):
    pass


class ShapeError(NumericsError, ValueError):
    pass


class NonFiniteError(NumericsError, FloatingPointError):
    """Raised when an op produces NaN or Inf. The message names the op."""


class MissingVjpError(NumericsError, LookupError):
    pass


@dataclass(frozen=True)
class OpDef:
    name: str
    forward: Callable[..., tuple[np.ndarray, Any]]
    vjp: Callable[..., Sequence[np.ndarray | None]] | None
    # False for surrogate-gradient ops whose vjp is deliberately not the true derivative.
    checkable: bool = True


@dataclass(eq=False)
class OpNode:
    op: OpDef
    inputs: tuple["Tensor", ...]
    saved: Any
    attrs: dict[str, Any] = field(default_factory=dict)


_REGISTRY: dict[str, OpDef] = {}


def register_op(name, forward, vjp=None, *, checkable=True, replace=False) -> OpDef:
    if name in _REGISTRY and not replace:
        raise KeyError(f"op {name!r} already registered")
    opdef = OpDef(name, forward, vjp, checkable)
    _REGISTRY[name] = opdef
    return opdef


def unregister_op(name: str) -> None:
    _REGISTRY.pop(name, None)


def get_op(name: str) -> OpDef:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise MissingVjpError(f"no op registered under {name!r}") from None


def registered_ops() -> dict[str, OpDef]:
    return dict(_REGISTRY)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def grad_enabled() -> bool:
    return _grad_enabled.get()


def _as_float_array(data, dtype=None) -> np.ndarray:
    if dtype is not None:
        dtype = np.dtype(dtype)
        if dtype not in FLOAT_DTYPES:
            raise TypeError(f"unsupported dtype {dtype}; use float32 or float64")
        return np.asarray(data, dtype=dtype, order="C")
    arr = np.asarray(data)
    if arr.dtype not in FLOAT_DTYPES:
        arr = arr.astype(np.float64)
    return np.asarray(arr, order="C")


class Tensor:
    """Row-major float32/float64 array plus autograd bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: OpNode | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        backward(self, grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # Operator sugar. Imported lazily so the registry module has no cycle.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None and np.ndim(x) == 0 else None
    return Tensor(x, dtype=dtype)


def check_finite(opname: str, out: np.ndarray) -> None:
    if not np.isfinite(out).all():
        bad = int(np.size(out) - np.count_nonzero(np.isfinite(out)))
        raise NonFiniteError(f"op {opname!r} produced {bad} non-finite value(s) in output of shape {np.shape(out)}")


def apply(opdef: OpDef, inputs: Sequence, attrs: dict[str, Any]) -> Tensor:
    like = next((x for x in inputs if isinstance(x, Tensor)), None)
    tensors = tuple(as_tensor(x, like) for x in inputs)
    out, saved = opdef.forward(*(t.data for t in tensors), **attrs)
    out = np.asarray(out, order="C")
    check_finite(opdef.name, out)
    track = _grad_enabled.get() and any(t.requires_grad for t in tensors)
    result = Tensor(out, requires_grad=track)
    if track:
        result.node = OpNode(opdef, tensors, saved, attrs)
    return result


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(root: Tensor, grad=None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if not root.requires_grad:
        raise NumericsError("backward() on a tensor that does not require grad")
    if grad is None:
        if root.size != 1:
            raise ShapeError(f"implicit gradient only defined for scalars, got shape {root.shape}")
        grad = np.ones_like(root.data)
    grads: dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=root.dtype).reshape(root.shape)}
    for t in reversed(_topo_order(root)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        node = t.node
        if node.op.vjp is None:
            raise MissingVjpError(f"op {node.op.name!r} has no registered vjp")
        in_grads = node.op.vjp(g, node.saved, **node.attrs)
        for parent, pg in zip(node.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            if pg.shape != parent.shape:
                raise ShapeError(f"vjp of {node.op.name!r} returned shape {pg.shape} for input {parent.shape}")
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
