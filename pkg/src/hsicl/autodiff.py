"""Dense tensors with tape-based reverse-mode differentiation.

Only what fully connected networks and their losses need: matrix products,
affine maps, element-wise activations, dropout, log-softmax and row-wise
normalisation. Tensors are immutable numpy wrappers. Operations executed
inside a ``with Tape() as tape:`` block are recorded on that tape and
``tape.gradients(loss, params)`` replays them backwards.

Example::

    W = Tensor(rng.normal(size=(4, 3)))
    b = Tensor(np.zeros(4))
    with Tape() as tape:
        loss = mean(relu(affine(x, W, b)))
    gW, gb = tape.gradients(loss, [W, b])
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .exceptions import DegenerateInputError, ShapeError

DEFAULT_DTYPE = np.float32

_ACTIVE: list["Tape"] = []


class Tensor:
    """Immutable dense array.

    Floating input keeps its precision; anything else becomes float32.
    """

    __slots__ = ("data",)
    __array_priority__ = 100

    def __init__(self, data, dtype=None):
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype.kind == "f" else DEFAULT_DTYPE
        arr = np.array(data, dtype=dtype)
        arr.setflags(write=False)
        self.data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr)
        if arr.flags.writeable:
            arr.setflags(write=False)
        t.data = arr
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def __len__(self):
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended in execution order, so every node's operands were
    produced before it (or are leaves).
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def gradients(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        """Reverse pass from a scalar ``loss``.

        Returns one array per entry of ``params``, shaped and typed like the
        parameter. Parameters the loss does not depend on get zeros.
        """
        if loss.data.ndim != 0:
            raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
        keep = {id(p) for p in params}
        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
        for node in reversed(self.nodes):
            key = id(node.output)
            g = grads.get(key) if key in keep else grads.pop(key, None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None:
                    continue
                tk = id(t)
                if tk in grads:
                    grads[tk] = grads[tk] + gi
                else:
                    grads[tk] = gi
        out = []
        for p in params:
            g = grads.get(id(p))
            if g is None:
                out.append(np.zeros(p.shape, dtype=p.dtype))
            else:
                out.append(np.asarray(g, dtype=p.dtype).reshape(p.shape))
        return out


def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    return tape.gradients(loss, params)


def primitive(op: str, inputs: Sequence[Tensor], out: np.ndarray, grad_fn) -> Tensor:
    """Wrap ``out`` as a tensor and record it on the active tape, if any.

    ``grad_fn`` maps the output gradient to one gradient (or None) per input.
    """
    result = Tensor._wrap(out)
    if _ACTIVE:
        _ACTIVE[-1].nodes.append(Node(op, tuple(inputs), result, grad_fn))
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _result_dtype(*ts: Tensor):
    return np.result_type(*(t.data for t in ts))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.add(a.data, b.data, dtype=_result_dtype(a, b))
    return primitive(
        "add", (a, b), out,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.subtract(a.data, b.data, dtype=_result_dtype(a, b))
    return primitive(
        "sub", (a, b), out,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.multiply(a.data, b.data, dtype=_result_dtype(a, b))
    return primitive(
        "mul", (a, b), out,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    out = (x.data * c).astype(x.dtype, copy=False)
    return primitive("scale", (x,), out, lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return primitive("matmul", (a, b), out, lambda g: (g @ b.data.T, a.data.T @ g))


def affine(x, W, b) -> Tensor:
    """Batched ``W @ x_i + b`` for each row ``x_i`` of ``x``.

    ``W`` is ``(out, in)``; ``x`` is ``(n, in)``; ``b`` is ``(out,)``.
    """
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.data.ndim != 2 or W.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeError(f"affine expects x (n, in), W (out, in), b (out,); got {x.shape}, {W.shape}, {b.shape}")
    if W.shape[1] != x.shape[1]:
        raise ShapeError(f"affine: W has {W.shape[1]} columns but x has {x.shape[1]} features")
    if b.shape[0] != W.shape[0]:
        raise ShapeError(f"affine: b has {b.shape[0]} entries but W has {W.shape[0]} rows")
    out = x.data @ W.data.T + b.data

    def grad(g):
        return g @ W.data, g.T @ x.data, g.sum(axis=0)

    return primitive("affine", (x, W, b), out, grad)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return primitive("relu", (x,), out, lambda g: (g * mask,))


def dropout(x, rate: float, rng, training: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    factor = np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    mask = keep * factor
    out = x.data * mask
    return primitive("dropout", (x,), out, lambda g: (g * mask,))


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _stable_sigmoid(x.data)
    return primitive("sigmoid", (x,), s, lambda g: (g * s * (1 - s),))


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)
    return primitive(
        "log_softmax", (x,), out,
        lambda g: (g - soft * g.sum(axis=axis, keepdims=True),),
    )


def l2_normalize(x, axis: int = -1) -> Tensor:
    """Divide each vector along ``axis`` by its Euclidean norm."""
    x = as_tensor(x)
    norm = np.sqrt((x.data.astype(np.float64) ** 2).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise DegenerateInputError("cannot l2-normalize a zero vector")
    norm = norm.astype(x.dtype)
    y = x.data / norm

    def grad(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return primitive("l2_normalize", (x,), y, grad)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    return primitive("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def flatten(x) -> Tensor:
    """Collapse every axis after the first."""
    x = as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)
    return primitive("sum", (x,), out, lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.size
    out = np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype)
    return primitive(
        "mean", (x,), out,
        lambda g: (np.broadcast_to(g / n, x.shape).astype(x.dtype),),
    )
