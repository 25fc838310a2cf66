"""Dense 2-D tensors with a scoped reverse-mode gradient tape.

A ``Matrix`` is an immutable row-major 2-D array. Operations executed inside a
``GradTape`` context are recorded when at least one operand is trainable, watched by
the tape, or itself the product of a recorded operation. Frozen tensors are plain
constants: no node is recorded for them and no gradient is ever materialized.
"""
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union
import threading

import numpy as np

from .utils import ContractError, NumericError, ShapeError

DTYPES = {32: np.float32, 64: np.float64}

Number = Union[int, float]
ArrayLike = Union[np.ndarray, Sequence, Number]
VJP = Callable[[np.ndarray, Tuple[bool, ...]], Tuple[Optional[np.ndarray], ...]]

_state = threading.local()


def _tape_stack() -> List["GradTape"]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape() -> Optional["GradTape"]:
    """The innermost tape entered on the calling thread, if any."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Matrix:
    """Immutable dense 2-D tensor.

    Attributes:
        trainable (bool): Whether the tape records operations on this tensor and reports its gradient
        name (str, optional): Label used in logs and checkpoints
    """

    __slots__ = ("_data", "trainable", "name", "_tape")

    def __init__(
            self,
            data: ArrayLike,
            *,
            trainable: bool = False,
            name: Optional[str] = None,
            dtype: Optional[np.dtype] = None
    ):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64) \
                else np.float64
        array = np.array(data, dtype=dtype, copy=True)
        if array.ndim == 0:
            array = array.reshape(1, 1)
        elif array.ndim == 1:
            array = array.reshape(1, -1)
        if array.ndim != 2:
            raise ShapeError(f"Matrix needs 2 dimensions, got shape {array.shape}")
        if array.size == 0:
            raise ShapeError(f"Matrix dimensions must be positive, got shape {array.shape}")
        if not np.all(np.isfinite(array)):
            raise NumericError(f"non-finite entries in {name or 'matrix'} of shape {array.shape}")
        array.setflags(write=False)
        self._data = array
        self.trainable = trainable
        self.name = name
        self._tape = None

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Matrix":
        out = cls.__new__(cls)
        if not np.all(np.isfinite(array)):
            raise NumericError(f"operation produced non-finite values (shape {array.shape})")
        array.setflags(write=False)
        out._data = array
        out.trainable = False
        out.name = None
        out._tape = None
        return out

    @classmethod
    def zeros(cls, rows: int, cols: int, **kwargs) -> "Matrix":
        return cls(np.zeros((rows, cols)), **kwargs)

    @classmethod
    def ones(cls, rows: int, cols: int, **kwargs) -> "Matrix":
        return cls(np.ones((rows, cols)), **kwargs)

    @classmethod
    def eye(cls, n: int, **kwargs) -> "Matrix":
        return cls(np.eye(n), **kwargs)

    @property
    def data(self) -> np.ndarray:
        """Read-only view of the payload."""
        return self._data

    @property
    def rows(self) -> int:
        return self._data.shape[0]

    @property
    def cols(self) -> int:
        return self._data.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self._data.shape

    @property
    def dtype(self) -> np.dtype:
        return self._data.dtype

    @property
    def tape(self) -> Optional["GradTape"]:
        """Tape that was active when this tensor was produced."""
        return self._tape

    @property
    def T(self) -> "Matrix":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        """Writable copy of the payload."""
        return self._data.copy()

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 matrix, got {self.shape}")
        return float(self._data[0, 0])

    def detach(self, *, trainable: bool = False, name: Optional[str] = None) -> "Matrix":
        """Same payload as a fresh leaf tensor."""
        return Matrix(self._data, trainable=trainable, name=name or self.name)

    def __matmul__(self, other: "Matrix") -> "Matrix":
        return matmul(self, other)

    def __add__(self, other: "Matrix") -> "Matrix":
        return add(self, other)

    def __sub__(self, other: "Matrix") -> "Matrix":
        return sub(self, other)

    def __mul__(self, other: Union["Matrix", Number]) -> "Matrix":
        if isinstance(other, Matrix):
            return elementwise_mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Matrix":
        return scale(self, -1.0)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        flag = " trainable" if self.trainable else ""
        return f"Matrix({self.rows}x{self.cols}{label}{flag}, dtype={self.dtype.name})"


@dataclass
class _Node:
    out: Matrix
    inputs: Tuple[Matrix, ...]
    vjp: VJP
    needs: Tuple[bool, ...]


class GradTape:
    """Single-use record of primitive operations.

    Usage::

        with GradTape() as tape:
            tape.watch(w0)
            loss = model.loss(x, y)
        grads = tape.backward(loss)

    Attributes:
        nodes (List[_Node]): Recorded operations in execution order
    """

    def __init__(self):
        self.nodes: List[_Node] = []
        self._sources: List[Matrix] = []
        self._tracked: set = set()
        self._consumed = False

    def __enter__(self) -> "GradTape":
        if self._consumed:
            raise ContractError("tape already consumed by backward")
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    @property
    def consumed(self) -> bool:
        return self._consumed

    def watch(self, tensor: Matrix) -> Matrix:
        """Make a non-trainable tensor gradient-observable on this tape only."""
        if id(tensor) not in self._tracked:
            self._tracked.add(id(tensor))
            self._sources.append(tensor)
        return tensor

    def is_tracked(self, tensor: Matrix) -> bool:
        return tensor.trainable or id(tensor) in self._tracked

    def _record(self, out: Matrix, inputs: Tuple[Matrix, ...], vjp: VJP) -> None:
        needs = []
        for tensor in inputs:
            if tensor.trainable and id(tensor) not in self._tracked:
                self.watch(tensor)
            needs.append(id(tensor) in self._tracked)
        if any(needs):
            self.nodes.append(_Node(out, inputs, vjp, tuple(needs)))
            self._tracked.add(id(out))

    def backward(self, loss: Matrix) -> Dict[Matrix, Matrix]:
        """Replay the tape in reverse and return d(loss)/d(source) per source.

        Sources are every trainable tensor used under the tape plus every watched tensor.
        A source the loss does not depend on gets an exact zero matrix.

        Raises:
            ContractError: If the loss is not 1x1 or the tape was already consumed
        """
        if self._consumed:
            raise ContractError("backward called twice on the same tape")
        if loss.shape != (1, 1):
            raise ContractError(f"backward needs a scalar (1x1) loss, got shape {loss.shape}")
        self._consumed = True

        grads: Dict[int, np.ndarray] = {}
        if id(loss) in self._tracked:
            grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            upstream = grads.pop(id(node.out), None)
            if upstream is None:
                continue
            for tensor, need, grad in zip(node.inputs, node.needs, node.vjp(upstream, node.needs)):
                if not need or grad is None:
                    continue
                key = id(tensor)
                grads[key] = grad if key not in grads else grads[key] + grad

        result = {}
        for source in self._sources:
            grad = grads.get(id(source))
            if grad is None:
                grad = np.zeros(source.shape, dtype=source.dtype)
            result[source] = Matrix(grad.astype(source.dtype, copy=False), name=source.name)
        self.nodes = []
        return result


def backward(loss: Matrix) -> Dict[Matrix, Matrix]:
    """Backward pass on the tape that produced ``loss``.

    Raises:
        ContractError: If ``loss`` was not produced under a tape, is not scalar, or its tape was consumed
    """
    if loss.tape is None:
        raise ContractError("loss was not produced under an active GradTape")
    return loss.tape.backward(loss)


def _result(array: np.ndarray, inputs: Tuple[Matrix, ...], vjp: VJP) -> Matrix:
    out = Matrix._wrap(array)
    tape = active_tape()
    if tape is not None:
        out._tape = tape
        tape._record(out, inputs, vjp)
    return out


def _same_shape(op: str, a: Matrix, b: Matrix) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")

    def vjp(g, needs):
        return (g @ b.data.T if needs[0] else None,
                a.data.T @ g if needs[1] else None)

    # + 0.0 turns negative zeros into positive zeros
    return _result(a.data @ b.data + 0.0, (a, b), vjp)


def add(a: Matrix, b: Matrix) -> Matrix:
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g, needs: (g, g))


def sub(a: Matrix, b: Matrix) -> Matrix:
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g, needs: (g, -g if needs[1] else None))


def elementwise_mul(a: Matrix, m: Matrix) -> Matrix:
    """Hadamard product; masked positions of a constant 0/1 ``m`` get exactly zero gradient."""
    _same_shape("elementwise_mul", a, m)

    def vjp(g, needs):
        return (g * m.data + 0.0 if needs[0] else None,
                g * a.data + 0.0 if needs[1] else None)

    return _result(a.data * m.data + 0.0, (a, m), vjp)


def scale(a: Matrix, factor: Number) -> Matrix:
    factor = float(factor)
    return _result(a.data * factor, (a,), lambda g, needs: (g * factor,))


def add_bias(x: Matrix, bias: Matrix) -> Matrix:
    """Add a 1 x cols row vector to every row of ``x``."""
    if bias.shape != (1, x.cols):
        raise ShapeError(f"add_bias: bias shape {bias.shape} does not broadcast over {x.shape}")
    return _result(x.data + bias.data, (x, bias),
                   lambda g, needs: (g, g.sum(axis=0, keepdims=True) if needs[1] else None))


def transpose(a: Matrix) -> Matrix:
    return _result(np.ascontiguousarray(a.data.T), (a,), lambda g, needs: (g.T,))


def reshape(a: Matrix, rows: int, cols: int) -> Matrix:
    """Row-major reshape."""
    if rows * cols != a.rows * a.cols:
        raise ShapeError(f"reshape: cannot view shape {a.shape} as {(rows, cols)}")
    shape = a.shape
    return _result(a.data.reshape(rows, cols).copy(), (a,), lambda g, needs: (g.reshape(shape),))


def relu(a: Matrix) -> Matrix:
    positive = a.data > 0
    return _result(np.where(positive, a.data, 0.0).astype(a.dtype), (a,),
                   lambda g, needs: (g * positive,))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a: Matrix) -> Matrix:
    """tanh approximation of GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)

    def vjp(g, needs):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner),)

    return _result(0.5 * x * (1.0 + t), (a,), vjp)


def _softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(a: Matrix) -> Matrix:
    s = _softmax(a.data)

    def vjp(g, needs):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _result(s, (a,), vjp)


def cross_entropy(logits: Matrix, labels: Sequence[int]) -> Matrix:
    """Mean softmax cross-entropy of integer class labels, as a 1x1 matrix."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != logits.rows:
        raise ShapeError(f"cross_entropy: {labels.shape[0]} labels for logits of shape {logits.shape}")
    if labels.min() < 0 or labels.max() >= logits.cols:
        raise ContractError(f"cross_entropy: labels must lie in [0, {logits.cols})")
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(logits.rows)
    loss = np.mean(log_z - shifted[rows, labels])

    def vjp(g, needs):
        probs = _softmax(x)
        probs[rows, labels] -= 1.0
        return (probs * (g[0, 0] / logits.rows),)

    return _result(np.array([[loss]], dtype=logits.dtype), (logits,), vjp)


def mse(pred: Matrix, target: Matrix) -> Matrix:
    """Mean over all entries of the squared difference, as a 1x1 matrix."""
    _same_shape("mse", pred, target)
    diff = pred.data - target.data
    n = diff.size

    def vjp(g, needs):
        d = diff * (2.0 * g[0, 0] / n)
        return (d if needs[0] else None, -d if needs[1] else None)

    return _result(np.array([[np.mean(diff ** 2)]], dtype=pred.dtype), (pred, target), vjp)


def sum_all(a: Matrix) -> Matrix:
    shape = a.shape
    return _result(np.array([[a.data.sum()]], dtype=a.dtype), (a,),
                   lambda g, needs: (np.full(shape, g[0, 0], dtype=g.dtype),))


def mean_all(a: Matrix) -> Matrix:
    shape, n = a.shape, a.data.size
    return _result(np.array([[a.data.mean()]], dtype=a.dtype), (a,),
                   lambda g, needs: (np.full(shape, g[0, 0] / n, dtype=g.dtype),))


def _as_float(value: Union[Matrix, Number]) -> float:
    if isinstance(value, Matrix):
        return value.item()
    return float(value)


def finite_diff_grad(f: Callable[[Matrix], Union[Matrix, Number]], theta: Matrix, eps: float = 1e-5) -> Matrix:
    """Central-difference gradient of a scalar function of one matrix.

    Each entry is (f(theta + eps e) - f(theta - eps e)) / (2 eps), evaluated in 64-bit.

    Raises:
        ContractError: If eps is not positive
        NumericError: If any evaluation of f is not finite
    """
    if not eps > 0:
        raise ContractError(f"finite difference step must be positive, got {eps}")
    base = theta.data.astype(np.float64)
    grad = np.zeros_like(base)
    for index in np.ndindex(base.shape):
        values = []
        for sign in (1.0, -1.0):
            shifted = base.copy()
            shifted[index] += sign * eps
            value = _as_float(f(Matrix(shifted, name=theta.name)))
            if not np.isfinite(value):
                raise NumericError(f"f is not finite at entry {index}")
            values.append(value)
        grad[index] = (values[0] - values[1]) / (2.0 * eps)
    return Matrix(grad, name=theta.name)
