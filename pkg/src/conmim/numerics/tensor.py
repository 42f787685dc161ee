"""Dense tensors and a reverse-mode gradient tape.

Values are plain numpy arrays.  A :class:`Tensor` participates in
differentiation only when it ``requires_grad`` and a :class:`Tape` is
active; every op evaluated under the tape with at least one participating
input appends a node.  ``Tape.backward`` walks the nodes in reverse.
"""

from __future__ import annotations

import contextlib
import threading
import weakref
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Sequence

import numpy as np

_state = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


_default_dtype = np.float32
_strict = False


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _default_dtype = dtype.type


def default_dtype():
    return _default_dtype


@contextlib.contextmanager
def default_dtype_as(dtype) -> Iterator[None]:
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def set_strict(flag: bool) -> None:
    """In strict mode every op rejects non-finite inputs."""
    global _strict
    _strict = bool(flag)


def is_strict() -> bool:
    return _strict


@contextlib.contextmanager
def strict_mode(flag: bool = True) -> Iterator[None]:
    prev = _strict
    set_strict(flag)
    try:
        yield
    finally:
        set_strict(prev)


class NumericsError(ValueError):
    pass


class ShapeError(NumericsError):
    pass


class Tensor:
    """A dense row-major array with optional tape participation."""

    __slots__ = ("data", "requires_grad", "_tape", "_node", "grad", "name")

    def __init__(self, data: Any, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if not np.issubdtype(arr.dtype, np.floating):
                arr = arr.astype(_default_dtype)
        else:
            arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            raise NumericsError(f"unsupported tensor dtype {arr.dtype}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._tape: weakref.ref | None = None
        self._node = -1
        self.grad: np.ndarray | None = None
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

    @property
    def tape_id(self) -> int | None:
        """Node index on the active tape, or None if not participating."""
        tape = active_tape()
        if tape is None or not self.requires_grad:
            return None
        if self._tape is tape._ref:
            return self._node
        return tape._leaf_index.get(id(self))

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic sugar; every method routes through the op registry
    def __add__(self, other):
        return forward_eval("add", (self, other))

    def __radd__(self, other):
        return forward_eval("add", (other, self))

    def __sub__(self, other):
        return forward_eval("sub", (self, other))

    def __rsub__(self, other):
        return forward_eval("sub", (other, self))

    def __mul__(self, other):
        return forward_eval("mul", (self, other))

    def __rmul__(self, other):
        return forward_eval("mul", (other, self))

    def __truediv__(self, other):
        return forward_eval("div", (self, other))

    def __neg__(self):
        return forward_eval("neg", (self,))

    def __matmul__(self, other):
        return forward_eval("matmul", (self, other))

    def __getitem__(self, index):
        return forward_eval("getitem", (self,), index=index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return forward_eval("reshape", (self,), shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return forward_eval("transpose", (self,), axes=axes or None)

    def sum(self, axis=None, keepdims=False):
        return forward_eval("sum", (self,), axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return forward_eval("mean", (self,), axis=axis, keepdims=keepdims)


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    shape: tuple[int, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    differentiable: bool = True
    saved: Any = None


@dataclass
class Gradients:
    """Result of a backward pass, keyed by tensor identity."""

    _grads: dict[int, np.ndarray] = field(default_factory=dict)
    _shapes: dict[int, tuple[tuple[int, ...], Any]] = field(default_factory=dict)

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None:
            return np.zeros(t.shape, dtype=t.dtype)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._shapes

    def get(self, t: Tensor, default=None):
        if id(t) not in self._shapes:
            return default
        return self[t]

    def __len__(self) -> int:
        return len(self._shapes)


class Tape:
    """Append-only record of differentiable ops.

    Used as a context manager; tapes nest, the innermost one records.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._leaf_index: dict[int, int] = {}
        self._tensors: list[Tensor] = []
        # tensors hold a weak reference back, so a finished tape is freed by refcount
        self._ref = weakref.ref(self)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def watch(self, t: Tensor) -> int:
        """Register a requires_grad leaf; returns its node index."""
        if not t.requires_grad:
            raise NumericsError("cannot watch a tensor that does not require grad")
        if t._tape is self._ref:
            return t._node
        idx = self._leaf_index.get(id(t))
        if idx is None:
            idx = len(self.nodes)
            self.nodes.append(Node("leaf", (), t.shape, None))
            self._leaf_index[id(t)] = idx
            self._tensors.append(t)
        return idx

    def index_of(self, t: Tensor) -> int:
        if not t.requires_grad:
            return -1
        if t._tape is self._ref:
            return t._node
        return self.watch(t)

    def record(self, out: Tensor, op: str, inputs: tuple[int, ...], backward, differentiable=True, saved=None) -> None:
        for i in inputs:
            if i >= len(self.nodes):
                raise RuntimeError("tape order violated")
        out._tape = self._ref
        out._node = len(self.nodes)
        self.nodes.append(Node(op, inputs, out.shape, backward, differentiable, saved))
        self._tensors.append(out)

    def tensor_at(self, idx: int) -> Tensor:
        return self._tensors_by_node()[idx]

    def _tensors_by_node(self) -> dict[int, Tensor]:
        out = {}
        for t in self._tensors:
            if t._tape is self._ref:
                out[t._node] = t
            else:
                out[self._leaf_index[id(t)]] = t
        return out

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def backward(self, root: Tensor) -> Gradients:
        if root.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
        if root._tape is not self._ref:
            raise NumericsError("backward root is not on this tape")
        n = len(self.nodes)
        grads: list[np.ndarray | None] = [None] * n
        grads[root._node] = np.ones(root.shape, dtype=root.dtype)
        for idx in range(root._node, -1, -1):
            g = grads[idx]
            node = self.nodes[idx]
            if g is None or node.backward is None or not node.differentiable:
                continue
            in_grads = node.backward(g)
            for j, gi in zip(node.inputs, in_grads):
                if j < 0 or gi is None:
                    continue
                target = self.nodes[j]
                if gi.shape != target.shape:
                    raise ShapeError(
                        f"{node.op}: backward produced gradient of shape {gi.shape} for input of shape {target.shape}"
                    )
                if grads[j] is None:
                    grads[j] = gi
                else:
                    grads[j] = grads[j] + gi
        result = Gradients()
        for t in self._tensors:
            idx = t._node if t._tape is self._ref else self._leaf_index[id(t)]
            result._shapes[id(t)] = (t.shape, t.dtype)
            g = grads[idx]
            if g is None:
                g = np.zeros(t.shape, dtype=t.dtype)
            elif g.dtype != t.dtype:
                g = g.astype(t.dtype)
            result._grads[id(t)] = g
            if t._tape is not self._ref:
                t.grad = g
        return result


def backward_accumulate(root: Tensor) -> Gradients:
    """Backpropagate from a scalar on the active tape."""
    if root.data.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    tape = root._tape() if root._tape is not None else None
    if tape is None or not root.requires_grad:
        raise NumericsError("backward root is not on an active tape")
    return tape.backward(root)


@contextlib.contextmanager
def no_tape() -> Iterator[None]:
    """Suspend recording: ops evaluated inside never touch any tape."""
    stack = _tape_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


# ---------------------------------------------------------------------------
# op registry


@dataclass(frozen=True)
class OpDef:
    name: str
    forward: Callable[..., tuple[np.ndarray, Any]]
    backward: Callable[..., Sequence[np.ndarray | None]] | None
    arity: int | None
    differentiable: bool = True


OPS: dict[str, OpDef] = {}


def register(name: str, forward, backward=None, arity: int | None = None, differentiable: bool = True) -> None:
    OPS[name] = OpDef(name, forward, backward, arity, differentiable)


def as_tensor(x: Any, like: np.dtype | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if like is not None:
        arr = arr.astype(like, copy=False)
    elif not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(_default_dtype)
    return Tensor(arr)


def forward_eval(op: str, inputs: Sequence[Any], **attrs) -> Tensor:
    """Evaluate a registered op; record a node when a tape is active."""
    opdef = OPS.get(op)
    if opdef is None:
        raise NumericsError(f"unknown op {op!r}")
    if opdef.arity is not None and len(inputs) != opdef.arity:
        raise NumericsError(f"{op}: expected {opdef.arity} inputs, got {len(inputs)}")
    ref_dtype = next((x.dtype for x in inputs if isinstance(x, Tensor)), None)
    tensors = [as_tensor(x, ref_dtype) for x in inputs]
    arrays = [t.data for t in tensors]
    if _strict:
        for k, a in enumerate(arrays):
            if not np.all(np.isfinite(a)):
                raise NumericsError(f"{op}: non-finite values in input {k}")
    value, ctx = opdef.forward(*arrays, **attrs)
    out = Tensor(value)
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in tensors):
        return out
    idx = tuple(tape.index_of(t) for t in tensors)
    if not opdef.differentiable:
        # barrier: recorded for structure, never propagates
        tape.record(out, op, idx, None, differentiable=False)
        out.requires_grad = False
        return out
    out.requires_grad = True
    bwd = opdef.backward

    def backward(g, _ctx=ctx, _bwd=bwd):
        return _bwd(_ctx, g)

    tape.record(out, op, idx, backward)
    return out
