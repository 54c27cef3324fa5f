"""Dense float64 tensors with the small op set the rest of the package needs.

Values are stored flat in row-major order and are immutable once built, so
tensors can be shared freely between workers. Every public operation checks
that its result is finite; a NaN/Inf result raises NonFiniteError instead of
propagating silently.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence, Union

import numpy as np

Scalar = Union[int, float]


class ShapeError(ValueError):
    """Operand shapes do not line up."""


class NonFiniteError(ValueError):
    """A value that must be finite is NaN or infinite."""


class Tensor:
    """Immutable dense tensor of 64-bit floats.

    The payload is a C-contiguous (row-major) float64 array; `shape` is a
    tuple of positive extents and `size` equals the flat element count.
    """

    __slots__ = ("_array",)

    def __init__(self, values, shape: Sequence[int] | None = None):
        # always copy: the caller's buffer stays writable and ours stays private
        arr = np.array(values, dtype=np.float64, order="C")
        if shape is not None:
            shape = tuple(int(s) for s in shape)
            if any(s <= 0 for s in shape):
                raise ShapeError(f"extents must be positive, got {shape}")
            if arr.size != math.prod(shape):
                raise ShapeError(
                    f"cannot view {arr.size} values as shape {shape}"
                )
            arr = arr.reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor values must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "_array", arr)

    # -- construction helpers -------------------------------------------

    @staticmethod
    def zeros(shape: Sequence[int]) -> "Tensor":
        return Tensor(np.zeros(tuple(shape), dtype=np.float64))

    @staticmethod
    def ones(shape: Sequence[int]) -> "Tensor":
        return Tensor(np.ones(tuple(shape), dtype=np.float64))

    @staticmethod
    def full(shape: Sequence[int], value: Scalar) -> "Tensor":
        return Tensor(np.full(tuple(shape), float(value), dtype=np.float64))

    # -- views ------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self._array.shape

    @property
    def size(self) -> int:
        return int(self._array.size)

    @property
    def array(self) -> np.ndarray:
        """Read-only ndarray view (row-major)."""
        return self._array

    @property
    def flat(self) -> np.ndarray:
        """Read-only 1-D view of the row-major payload."""
        return self._array.reshape(-1)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self._array.reshape(-1)[0])

    def tolist(self):
        return self._array.tolist()

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        return Tensor(self._array, shape=shape)

    # -- dunder plumbing ---------------------------------------------------

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Tensor)
            and self.shape == other.shape
            and bool(np.array_equal(self._array, other._array))
        )

    def __hash__(self):
        return id(self)


def _wrap(arr: np.ndarray) -> Tensor:
    return Tensor(arr)


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# -- matrix product --------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard matrix product of two rank-2 tensors."""
    if len(a.shape) != 2 or len(b.shape) != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions disagree, {a.shape} vs {b.shape}"
        )
    return _wrap(a.array @ b.array)


def transpose(a: Tensor) -> Tensor:
    if len(a.shape) != 2:
        raise ShapeError(f"transpose needs a rank-2 tensor, got {a.shape}")
    return _wrap(np.ascontiguousarray(a.array.T))


# -- pointwise ops ----------------------------------------------------------

# GELU here is the tanh approximation
#   gelu(x) = 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))
# and both the merged and fine-tuned forward paths evaluate exactly this
# expression, so their activations agree bit-for-bit on equal inputs.
_GELU_C = math.sqrt(2.0 / math.pi)


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    return _wrap(a.array + b.array)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)
    return _wrap(a.array - b.array)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard (element-wise) product."""
    _require_same_shape("mul", a, b)
    return _wrap(a.array * b.array)


def scale(a: Tensor, c: Scalar) -> Tensor:
    return _wrap(a.array * float(c))


def relu(a: Tensor) -> Tensor:
    return _wrap(np.maximum(a.array, 0.0))


def gelu(a: Tensor) -> Tensor:
    x = a.array
    inner = _GELU_C * (x + 0.044715 * x**3)
    return _wrap(0.5 * x * (1.0 + np.tanh(inner)))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "relu": relu,
    "gelu": gelu,
    "gelu-tanh-approx": gelu,
}


def elementwise(op: str, a: Tensor, b: Tensor | Scalar | None = None) -> Tensor:
    """Dispatch a named pointwise op; binary ops require identical shapes."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if op in ("relu", "gelu", "gelu-tanh-approx"):
        if b is not None:
            raise ValueError(f"{op} is unary")
        return fn(a)
    if b is None:
        raise ValueError(f"{op} needs a second operand")
    if op == "scale":
        return fn(a, b)
    if not isinstance(b, Tensor):
        raise ValueError(f"{op} needs a Tensor second operand")
    return fn(a, b)


# -- reductions --------------------------------------------------------------


def tensor_sum(a: Tensor) -> float:
    return float(np.sum(a.array))


def tensor_mean(a: Tensor) -> float:
    return float(np.mean(a.array))


def sq_l2_norm(a: Tensor) -> float:
    """Sum of squared entries."""
    flat = a.flat
    return float(flat @ flat)


_REDUCE = {"sum": tensor_sum, "mean": tensor_mean, "sq_l2_norm": sq_l2_norm}


def reduce(op: str, a: Tensor) -> float:
    try:
        fn = _REDUCE[op]
    except KeyError:
        raise ValueError(f"unknown reduce op {op!r}") from None
    return fn(a)


def allclose(a: Tensor, b: Tensor, atol: float = 0.0, rtol: float = 0.0) -> bool:
    return a.shape == b.shape and bool(
        np.allclose(a.array, b.array, atol=atol, rtol=rtol)
    )


def stack_rows(rows: Iterable[Tensor]) -> Tensor:
    """Stack equal-shape rank-1 tensors into a rank-2 tensor."""
    mats = [r.array for r in rows]
    return _wrap(np.stack(mats, axis=0))
