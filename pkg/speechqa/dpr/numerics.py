"""
A small reverse-mode differentiation kernel on top of numpy.

Every operation records its inputs and a closure computing the vector-Jacobian product on the output tensor. Calling
:meth:`Tensor.backward` on a scalar walks this graph in reverse topological order, accumulates the gradients into the
leaf tensors and then frees the graph. All values are 64-bit floats.
"""
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from speechqa.dpr.base import DimensionError, NumericalFault, SequenceTooShortError

_grad_enabled = True

Backward = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


@contextmanager
def no_grad() -> Iterator[None]:
    """
    Context manager disabling graph recording. Tensors created inside the block never require gradients.
    """
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """
    A dense array of 64-bit floats that can take part in a recorded computation graph.

    :param data: Anything numpy can turn into an array.
    :param requires_grad: Whether gradients should be accumulated into :attr:`grad` on :meth:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data: np.ndarray | float | Sequence[float], requires_grad: bool = False, op: str = "leaf"):
        self.data: np.ndarray = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Backward | None = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor | float") -> "Tensor":
        return add(self, _as_tensor(other))

    def __radd__(self, other: "Tensor | float") -> "Tensor":
        return add(_as_tensor(other), self)

    def __sub__(self, other: "Tensor | float") -> "Tensor":
        return sub(self, _as_tensor(other))

    def __rsub__(self, other: "Tensor | float") -> "Tensor":
        return sub(_as_tensor(other), self)

    def __mul__(self, other: "Tensor | float") -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other: "Tensor | float") -> "Tensor":
        return self.__mul__(other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def backward(self) -> None:
        """
        Compute the gradients of this scalar with respect to every leaf tensor that requires them.

        The graph is freed afterwards, calling this twice on the same result is an error.
        """
        if self.data.size != 1:
            raise DimensionError(f"backward() needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward() called on a tensor that does not require gradients")

        order = _topological_order(self)
        grads: Dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + parent_grad
                else:
                    grads[id(parent)] = parent_grad

        for node in order:
            node._parents = ()
            node._backward = None


def _topological_order(root: Tensor) -> List[Tensor]:
    # Iterative, the graphs of a whole batch are far deeper than the recursion limit
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


@dataclass
class Parameter:
    """
    A named, trainable tensor.

    :param name: The qualified name, as used in checkpoints.
    :param tensor: The value. It requires gradients unless the parameter is frozen.
    :param frozen: Frozen parameters are neither tracked by the graph nor updated by the optimizer.
    """

    name: str
    tensor: Tensor
    frozen: bool = False

    @classmethod
    def create(cls, name: str, data: np.ndarray) -> "Parameter":
        return cls(name=name, tensor=Tensor(np.array(data, dtype=np.float64), requires_grad=True, op=name))

    def freeze(self) -> None:
        self.frozen = True
        self.tensor.requires_grad = False
        self.tensor.grad = None

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data


def _as_tensor(value: "Tensor | float | np.ndarray") -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, op="const")


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], op: str, backward: Backward) -> Tensor:
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track, op=op)
    if track:
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from e


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return _result(
        a.data + b.data,
        (a, b),
        "add",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    return _result(
        a.data - b.data,
        (a, b),
        "sub",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    return _result(
        a.data * b.data,
        (a, b),
        "mul",
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, factor: float) -> Tensor:
    return _result(a.data * factor, (a,), "scale", lambda g: (g * factor,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product of an ``m×k`` and a ``k×n`` tensor.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs two matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return _result(a.data @ b.data, (a, b), "matmul", lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {a.shape}")
    return _result(a.data.T.copy(), (a,), "transpose", lambda g: (g.T,))


def sum_all(a: Tensor) -> Tensor:
    return _result(np.asarray(a.data.sum()), (a,), "sum", lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    if n == 0:
        raise DimensionError("mean of an empty tensor")
    return _result(np.asarray(a.data.mean()), (a,), "mean", lambda g: (np.full(a.shape, float(g) / n),))


def softmax(x: Tensor) -> Tensor:
    """
    Softmax over the last axis, with the maximum subtracted first.

    :param x: A vector of length n ≥ 1, or a matrix whose rows are normalized independently.
    """
    if x.data.size == 0 or x.shape[-1] == 0:
        raise DimensionError("softmax of an empty input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (x,), "softmax", backward)


def log_softmax(x: Tensor) -> Tensor:
    """
    Logarithm of :func:`softmax` over the last axis, computed through a stable log-sum-exp.
    """
    if x.data.size == 0 or x.shape[-1] == 0:
        raise DimensionError("log_softmax of an empty input")
    m = x.data.max(axis=-1, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _result(out, (x,), "log_softmax", backward)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """GELU in its tanh form."""
    u = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _result(out, (x,), "gelu", backward)


def _standardize(x: Tensor, axis: int, eps: float, op: str) -> Tensor:
    mu = x.data.mean(axis=axis, keepdims=True)
    centered = x.data - mu
    var = (centered**2).mean(axis=axis, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    y = centered * inv_std

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        g_mean = g.mean(axis=axis, keepdims=True)
        gy_mean = (g * y).mean(axis=axis, keepdims=True)
        return (inv_std * (g - g_mean - y * gy_mean),)

    return _result(y, (x,), op, backward)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """
    Standardize every feature column of a single utterance over its ``T`` frames.

    :param x: A ``T×D`` tensor.
    :param eps: Added to the variance before the square root.
    """
    if x.ndim != 2:
        raise DimensionError(f"instance_norm needs a T×D matrix, got shape {x.shape}")
    if x.shape[0] == 0:
        raise DimensionError("instance_norm of an utterance with zero frames")
    return _standardize(x, 0, eps, "instance_norm")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """
    Standardize every row over its features, then apply an elementwise gain and bias.
    """
    if x.ndim != 2:
        raise DimensionError(f"layer_norm needs a matrix, got shape {x.shape}")
    return add(mul(_standardize(x, 1, eps, "layer_norm"), gain), bias)


def conv1d(x: Tensor, kernel: Tensor, stride: int) -> Tensor:
    """
    Valid (unpadded) strided convolution along the time axis.

    :param x: A ``T×D_in`` tensor.
    :param kernel: A ``k×D_in×D_out`` tensor.
    :param stride: The step between two output frames, at least 1.
    :return: A ``T'×D_out`` tensor with ``T' = floor((T - k) / stride) + 1``.
    """
    if x.ndim != 2 or kernel.ndim != 3:
        raise DimensionError(f"conv1d needs a T×D input and a k×D_in×D_out kernel, got {x.shape} and {kernel.shape}")
    if stride < 1:
        raise DimensionError(f"conv1d stride must be at least 1, got {stride}")
    k, d_in, d_out = kernel.shape
    t = x.shape[0]
    if x.shape[1] != d_in:
        raise DimensionError(f"conv1d input has {x.shape[1]} channels, kernel expects {d_in}")
    if t < k:
        raise SequenceTooShortError(f"conv1d input has {t} frames, kernel needs at least {k}")

    t_out = (t - k) // stride + 1
    index = stride * np.arange(t_out)[:, None] + np.arange(k)[None, :]
    patches = x.data[index].reshape(t_out, k * d_in)
    flat_kernel = kernel.data.reshape(k * d_in, d_out)

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        grad_kernel = (patches.T @ g).reshape(k, d_in, d_out)
        grad_patches = (g @ flat_kernel.T).reshape(t_out, k, d_in)
        grad_x = np.zeros_like(x.data)
        np.add.at(grad_x, index, grad_patches)
        return grad_x, grad_kernel

    return _result(patches @ flat_kernel, (x, kernel), "conv1d", backward)


def conv_output_length(t: int, kernel_size: int, stride: int) -> int:
    """The number of output frames of :func:`conv1d`, or 0 if the input is too short."""
    if t < kernel_size:
        return 0
    return (t - kernel_size) // stride + 1


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """
    Concatenate matrices along rows (``axis=0``) or columns (``axis=1``).
    """
    if len(tensors) == 0:
        raise DimensionError("concat of an empty list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from e
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g: np.ndarray) -> Tuple[np.ndarray, ...]:
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return _result(out, tuple(tensors), "concat", backward)


def stack(vectors: Sequence[Tensor]) -> Tensor:
    """
    Stack ``B`` vectors of equal length ``d`` into a ``B×d`` matrix.
    """
    if len(vectors) == 0:
        raise DimensionError("stack of an empty list")
    shapes = {v.shape for v in vectors}
    if len(shapes) != 1 or len(next(iter(shapes))) != 1:
        raise DimensionError(f"stack needs vectors of one length, got shapes {sorted(shapes)}")

    def backward(g: np.ndarray) -> Tuple[np.ndarray, ...]:
        return tuple(g[i].copy() for i in range(len(vectors)))

    return _result(np.stack([v.data for v in vectors]), tuple(vectors), "stack", backward)


def row(x: Tensor, index: int) -> Tensor:
    """Select one row of a matrix as a vector."""
    if x.ndim != 2:
        raise DimensionError(f"row needs a matrix, got shape {x.shape}")

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        grad = np.zeros_like(x.data)
        grad[index] = g
        return (grad,)

    return _result(x.data[index].copy(), (x,), "row", backward)


def columns(x: Tensor, start: int, stop: int) -> Tensor:
    """Select the columns ``start:stop`` of a matrix."""
    if x.ndim != 2:
        raise DimensionError(f"columns needs a matrix, got shape {x.shape}")

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        grad = np.zeros_like(x.data)
        grad[:, start:stop] = g
        return (grad,)

    return _result(x.data[:, start:stop].copy(), (x,), "columns", backward)


def rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Select the rows ``start:stop`` of a matrix."""

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        grad = np.zeros_like(x.data)
        grad[start:stop] = g
        return (grad,)

    return _result(x.data[start:stop].copy(), (x,), "rows", backward)


def gather_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """
    Embedding lookup: the rows of ``table`` at ``ids``, in order.
    """
    idx = np.asarray(ids, dtype=np.int64)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        grad = np.zeros_like(table.data)
        np.add.at(grad, idx, g)
        return (grad,)

    return _result(table.data[idx], (table,), "gather_rows", backward)


def check_finite(x: Tensor, op: str | None = None) -> Tensor:
    """
    Raise a :class:`NumericalFault` if ``x`` contains NaN or Inf, otherwise return ``x`` unchanged.
    """
    if not np.all(np.isfinite(x.data)):
        raise NumericalFault("Non-finite value", op=op or x.op)
    return x


def first_non_finite_op(x: Tensor) -> str | None:
    """
    Walk the recorded graph of ``x`` from the inputs towards ``x`` and return the name of the first operation that
    produced a non-finite value.
    """
    for node in _topological_order(x):
        if not np.all(np.isfinite(node.data)):
            return node.op
    return None


@dataclass
class GradCheckReport:
    """
    The result of :func:`grad_check`.

    :param max_rel_error: The largest relative error over all checked elements.
    :param errors: The largest relative error per parameter.
    :param frozen: Names of the frozen parameters. They are not perturbed; their analytic gradient is reported as zero.
    :param analytic: The analytic gradient per parameter (zeros for frozen ones).
    """

    max_rel_error: float
    errors: Dict[str, float] = field(default_factory=dict)
    frozen: List[str] = field(default_factory=list)
    analytic: Dict[str, np.ndarray] = field(default_factory=dict)

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter | Tensor],
    h: float = 1e-5,
    floor: float = 1e-3,
) -> GradCheckReport:
    """
    Compare the analytic gradient of a scalar computation against central finite differences.

    The relative error of one element is ``|a - n| / max(|a|, |n|, floor)``. The floor keeps elements whose true
    gradient is (close to) zero from dominating the result through rounding noise.

    :param f: A function without arguments that recomputes the scalar from the current parameter values.
    :param params: The parameters (or plain tensors) to check.
    :param h: The finite-difference step.
    :param floor: The lower bound of the denominator.
    :return: A :class:`GradCheckReport`.
    """
    logger = logging.getLogger(__name__)

    named: List[Tuple[str, Tensor, bool]] = []
    for i, p in enumerate(params):
        if isinstance(p, Parameter):
            named.append((p.name, p.tensor, p.frozen))
        else:
            named.append((f"input{i}", p, not p.requires_grad))

    for _, tensor, _ in named:
        tensor.grad = None
    out = f()
    if out.data.size != 1:
        raise DimensionError(f"grad_check needs a scalar computation, got shape {out.shape}")
    if not np.all(np.isfinite(out.data)):
        raise NumericalFault("Non-finite output in grad_check", op=first_non_finite_op(out) or out.op)
    out.backward()

    report = GradCheckReport(max_rel_error=0.0)
    for name, tensor, frozen in named:
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        report.analytic[name] = analytic
        if frozen:
            report.frozen.append(name)
            continue

        worst = 0.0
        flat = tensor.data.reshape(-1)
        flat_grad = analytic.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            with no_grad():
                flat[i] = original + h
                plus = f().item()
                flat[i] = original - h
                minus = f().item()
            flat[i] = original
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise NumericalFault(f"Non-finite output while perturbing {name}[{i}]", op="grad_check")
            numeric = (plus - minus) / (2 * h)
            err = abs(flat_grad[i] - numeric) / max(abs(flat_grad[i]), abs(numeric), floor)
            worst = max(worst, err)
        report.errors[name] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
        logger.debug(f"grad_check {name}: max relative error {worst:.3e}")

    for _, tensor, _ in named:
        tensor.grad = None
    return report
