"""Dense float64 tensors and the few arithmetic kernels built directly on them.

Activations are channels-last: a single feature map is ``(W, L, C)`` and a
batch is ``(N, W, L, C)``.  The engine itself works on ``numpy`` arrays;
:class:`Tensor` is the immutable value type exchanged at module boundaries.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

Shape = tuple[int, ...]

_MAX_ELEMENTS = 2**63 - 1


def check_shape(dims: Iterable[int]) -> Shape:
    """Validate ``dims`` and return it as a tuple of ints."""
    shape = tuple(int(d) for d in dims)
    if not 1 <= len(shape) <= 4:
        raise ValueError(f"rank must be 1..4, got {len(shape)} for {shape}")
    if any(d < 1 for d in shape):
        raise ValueError(f"every dim must be >= 1, got {shape}")
    count = 1
    for d in shape:
        count *= d
    if count > _MAX_ELEMENTS:
        raise OverflowError(f"element count of {shape} does not fit in 64 bits")
    return shape


def num_elements(shape: Sequence[int]) -> int:
    count = 1
    for d in shape:
        count *= int(d)
    return count


class Tensor:
    """Immutable row-major float64 array with an explicit shape."""

    __slots__ = ("_data",)

    def __init__(self, data, shape: Sequence[int] | None = None):
        arr = np.array(data, dtype=np.float64)
        if shape is not None:
            shape = check_shape(shape)
            if arr.size != num_elements(shape):
                raise ValueError(f"{arr.size} values do not fill shape {shape}")
            arr = arr.reshape(shape)
        else:
            check_shape(arr.shape)
        arr.setflags(write=False)
        self._data = arr

    @property
    def shape(self) -> Shape:
        return self._data.shape

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the values (read-only)."""
        return self._data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self._data

    def tolist(self):
        return self._data.tolist()

    def __array__(self, dtype=None, copy=None):
        if dtype is None or np.dtype(dtype) == self._data.dtype:
            return self._data
        return self._data.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self._data, other._data))

    def __hash__(self):
        return hash((self.shape, self._data.tobytes()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, data={self._data.tolist()!r})"


def zeros(shape: Sequence[int]) -> Tensor:
    shape = check_shape(shape)
    return Tensor(np.zeros(shape))


def elementwise_add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return Tensor(a.numpy() + b.numpy())


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with a fixed accumulation order over the inner index.

    ``c[i, j]`` is accumulated as ``((0 + a[i,0]*b[0,j]) + a[i,1]*b[1,j]) + ...``,
    which is exactly what a naive triple loop computes, so results are
    reproducible bit for bit regardless of the BLAS build.
    """
    if len(a.shape) != 2 or len(b.shape) != 2:
        raise ValueError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise ValueError(f"inner dims differ: {a.shape} @ {b.shape}")
    x, y = a.numpy(), b.numpy()
    out = np.zeros((m, n))
    for p in range(k):
        out += x[:, p, None] * y[None, p, :]
    return Tensor(out)
