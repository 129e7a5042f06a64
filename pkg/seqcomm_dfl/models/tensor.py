"""
Dense-tensor reverse-mode differentiation with second-order support.

Every operation records its parents and a vector-Jacobian rule written in terms of
Tensor operations, so a backward pass run with ``create_graph=True`` is itself
recorded and can be differentiated again (Hessian-vector products, mixed
second derivatives, unrolled optimization).
"""
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, List, Optional, Sequence, Union

import numpy as np

from seqcomm_dfl.utils.errors import NumericalError, UsageError

LEAKY_SLOPE = 0.01

_state = threading.local()


def is_grad_enabled() -> bool:
    """Whether new operations are recorded on the current thread."""
    return getattr(_state, "enabled", True)


@contextmanager
def _grad_mode(enabled: bool):
    previous = is_grad_enabled()
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = previous


def no_grad():
    """Context manager that disables recording."""
    return _grad_mode(False)


ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class Tensor:
    """
    A float64 array plus the record needed to differentiate through it.

    Attributes:
        data: Row-major float64 numpy array
        requires_grad: Whether gradients flow to this tensor
        name: Optional parameter name (used by checkpoints and manifests)
    """

    __slots__ = ("data", "requires_grad", "name", "_parents", "_vjp")
    # ndarray op Tensor defers to the reflected Tensor operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        array = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(array)):
            raise NumericalError(f"non-finite entries in tensor {name or ''}".strip())
        self.data = array
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._vjp = None

    # ------------------------------------------------------------------ basics
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise UsageError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # ------------------------------------------------------------- arithmetic
    def __add__(self, other):
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return _record(
            self.data + other.data, (self, other),
            lambda g: (g.sum_to(a_shape), g.sum_to(b_shape)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return _record(
            self.data - other.data, (self, other),
            lambda g: (g.sum_to(a_shape), (-g).sum_to(b_shape)),
        )

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return _record(
            a.data * b.data, (a, b),
            lambda g: ((g * b).sum_to(a.shape), (g * a).sum_to(b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        return self * other ** -1.0

    def __rtruediv__(self, other):
        return as_tensor(other) * self ** -1.0

    def __neg__(self):
        return _record(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise UsageError("only constant exponents are supported")
        x = self
        c = float(exponent)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = x.data ** c
        return _record(out, (x,), lambda g: (g * (x ** (c - 1.0)) * c,))

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        if a.ndim != 2 or b.ndim != 2:
            raise UsageError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise UsageError(f"matmul shape mismatch {a.shape} @ {b.shape}")
        return _record(a.data @ b.data, (a, b), lambda g: (g @ b.T, a.T @ g))

    def __rmatmul__(self, other):
        return as_tensor(other) @ self

    # ------------------------------------------------------------ reshaping
    @property
    def T(self) -> "Tensor":
        if self.ndim != 2:
            raise UsageError("transpose is defined for 2-D tensors")
        return _record(self.data.T, (self,), lambda g: (g.T,))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        return _record(self.data.reshape(shape), (self,), lambda g: (g.reshape(original),))

    def sum_to(self, shape) -> "Tensor":
        """Sum broadcast dimensions away so the result has ``shape``."""
        shape = tuple(shape)
        if self.shape == shape:
            return self
        original = self.shape
        return _record(_sum_to(self.data, shape), (self,), lambda g: (g.broadcast_to(original),))

    def broadcast_to(self, shape) -> "Tensor":
        shape = tuple(shape)
        if self.shape == shape:
            return self
        original = self.shape
        return _record(np.broadcast_to(self.data, shape).copy(), (self,), lambda g: (g.sum_to(original),))

    def __getitem__(self, key) -> "Tensor":
        original = self.shape
        return _record(
            np.array(self.data[key], dtype=np.float64), (self,),
            lambda g: (g.scatter(key, original),),
        )

    def scatter(self, key, shape) -> "Tensor":
        """Place this tensor into zeros of ``shape`` at ``key`` (adding repeated indices)."""
        out = np.zeros(shape)
        np.add.at(out, key, self.data)
        return _record(out, (self,), lambda g: (g[key],))

    # ------------------------------------------------------------ reductions
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        original = self.shape
        kept_shape = np.sum(self.data, axis=axis, keepdims=True).shape

        def vjp(g):
            return (g.reshape(kept_shape).broadcast_to(original),)

        return _record(np.sum(self.data, axis=axis, keepdims=keepdims), (self,), vjp)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(count))

    def max(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        """Maximum along ``axis``; the gradient goes to the first maximizing entry."""
        if axis is None:
            flat = self.reshape(-1)
            return flat.max(axis=0, keepdims=False)
        axis = axis % self.ndim
        winners = np.argmax(self.data, axis=axis)
        mask = np.zeros_like(self.data)
        np.put_along_axis(mask, np.expand_dims(winners, axis), 1.0, axis=axis)
        original = self.shape
        kept_shape = np.max(self.data, axis=axis, keepdims=True).shape
        out = np.max(self.data, axis=axis, keepdims=keepdims)
        return _record(out, (self,), lambda g: (g.reshape(kept_shape).broadcast_to(original) * mask,))

    # ---------------------------------------------------------- elementwise
    def exp(self) -> "Tensor":
        with np.errstate(over="ignore"):
            out_data = np.exp(self.data)
        holder = {}

        def vjp(g):
            return (g * holder["out"],)

        out = _record(out_data, (self,), vjp)
        holder["out"] = out
        return out

    def log(self) -> "Tensor":
        x = self
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(x.data)
        return _record(out, (x,), lambda g: (g / x,))

    def abs(self) -> "Tensor":
        # sign(0) is taken as +1
        sign = np.where(self.data >= 0.0, 1.0, -1.0)
        return _record(np.abs(self.data), (self,), lambda g: (g * sign,))

    def leaky_relu(self, slope: float = LEAKY_SLOPE) -> "Tensor":
        # derivative at exactly 0 is the negative slope
        gate = np.where(self.data > 0.0, 1.0, slope)
        return _record(self.data * gate, (self,), lambda g: (g * gate,))

    def relu(self) -> "Tensor":
        return self.leaky_relu(0.0)

    def clip_min(self, floor: float) -> "Tensor":
        gate = (self.data > floor).astype(np.float64)
        return _record(np.maximum(self.data, floor), (self,), lambda g: (g * gate,))


# ---------------------------------------------------------------- recording
def _record(data: np.ndarray, parents, vjp: Callable) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite result of shape {data.shape}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.name = None
    out._parents = ()
    out._vjp = None
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _sum_to(array: np.ndarray, shape) -> np.ndarray:
    extra = array.ndim - len(shape)
    if extra < 0:
        raise UsageError(f"cannot sum shape {array.shape} to {shape}")
    if extra:
        array = array.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and array.shape[i] != 1)
    if axes:
        array = array.sum(axis=axes, keepdims=True)
    return array.reshape(shape)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data, name: Optional[str] = None) -> Tensor:
    """Create a trainable leaf tensor."""
    return Tensor(data, requires_grad=True, name=name)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    axis = axis % data.ndim
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        pieces = []
        for start, stop in zip(bounds[:-1], bounds[1:]):
            key = [slice(None)] * g.ndim
            key[axis] = slice(int(start), int(stop))
            pieces.append(g[tuple(key)])
        return tuple(pieces)

    return _record(data, tuple(tensors), vjp)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim + 1
    axis = axis % ndim
    expanded = [t.reshape(t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Stable log-sum-exp with max subtraction."""
    shift = np.max(x.data, axis=axis, keepdims=True)
    out = (x - shift).exp().sum(axis=axis, keepdims=True).log() + shift
    if not keepdims:
        out = out.reshape(np.squeeze(out.data, axis=axis).shape)
    return out


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return x - logsumexp(x, axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return log_softmax(x, axis=axis).exp()


def dot(left: Sequence[Tensor], right: Sequence[ArrayLike]) -> Tensor:
    """Sum of elementwise products across two parameter lists."""
    total = None
    for a, b in zip(left, right):
        term = (as_tensor(a) * as_tensor(b)).sum()
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


# ------------------------------------------------------------ differentiation
def _topological_order(output: Tensor) -> List[Tensor]:
    order, seen = [], set()
    stack_ = [(output, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack_.append((parent, False))
    return order


def grad(f: Union[Tensor, Callable[[], Tensor]], params: Sequence[Tensor],
         create_graph: bool = False) -> List[Tensor]:
    """
    Gradients of a scalar with respect to ``params``.

    Args:
        f: Scalar output tensor, or a zero-argument callable producing it
        params: Tensors to differentiate with respect to (leaves or intermediates)
        create_graph: Record the backward pass so the result can be differentiated again

    Returns:
        One gradient tensor per parameter, zeros where the output does not depend on it
    """
    output = f() if callable(f) else f
    if output.size != 1:
        raise UsageError(f"grad needs a scalar output, got shape {output.shape}")
    grads = {}
    if output.requires_grad:
        grads[id(output)] = Tensor(np.ones_like(output.data))
        with _grad_mode(create_graph):
            for node in reversed(_topological_order(output)):
                g = grads.get(id(node))
                if g is None or node._vjp is None:
                    continue
                for parent, parent_grad in zip(node._parents, node._vjp(g)):
                    if parent_grad is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    grads[key] = parent_grad if key not in grads else grads[key] + parent_grad
    result = []
    for p in params:
        g = grads.get(id(p))
        result.append(g if g is not None else Tensor(np.zeros_like(p.data)))
    return result


def hvp(f: Union[Tensor, Callable[[], Tensor]], params: Sequence[Tensor],
        v: Sequence[ArrayLike]) -> List[Tensor]:
    """Hessian-vector product H·v via reverse-over-reverse differentiation."""
    v = [as_tensor(x) for x in v]
    if len(v) != len(params) or any(a.shape != b.shape for a, b in zip(v, params)):
        raise UsageError("hvp vector must match the parameter shapes")
    first = grad(f, params, create_graph=True)
    projected = dot(first, v)
    if not projected.requires_grad:
        return [Tensor(np.zeros_like(p.data)) for p in params]
    return grad(projected, params)


# ------------------------------------------------------- flat-vector helpers
def flatten(tensors: Iterable[ArrayLike]) -> np.ndarray:
    parts = [as_tensor(t).data.ravel() for t in tensors]
    return np.concatenate(parts) if parts else np.zeros(0)


def unflatten(vector: np.ndarray, like: Sequence[Tensor]) -> List[np.ndarray]:
    pieces, offset = [], 0
    for p in like:
        pieces.append(vector[offset:offset + p.size].reshape(p.shape))
        offset += p.size
    if offset != vector.size:
        raise UsageError(f"vector of length {vector.size} does not match {offset} parameters")
    return pieces
