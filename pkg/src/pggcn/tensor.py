"""Dense float64 array kernels, trainable parameters and gradient checking.

Arrays are plain ``numpy.ndarray`` objects in C (row-major) order; this module
adds shape-checked kernels on top of them, the :class:`Param` carrier used by
every layer, a central-difference gradient checker and the flat binary tensor
format used for checkpoints and dataset caches.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable

import numpy as np

from .exceptions import DimensionError, GradientCheckError

DTYPE = np.float64


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a C-contiguous float64 array (no copy when possible)."""
    return np.ascontiguousarray(x, dtype=DTYPE)


def make_rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


@dataclass(eq=False)
class Param:
    """A trainable tensor together with its accumulated gradient.

    ``decay`` marks tensors that receive weight decay (weights, not biases,
    normalization affine terms or attention modulators).
    """

    value: np.ndarray
    name: str = ""
    trainable: bool = True
    decay: bool = False
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = as_tensor(self.value).copy()
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def accumulate(self, g):
        if g.shape != self.value.shape:
            raise DimensionError(
                f"gradient shape {g.shape} does not match parameter "
                f"{self.name or '?'} of shape {self.value.shape}"
            )
        self.grad += g

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape})"


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

def matmul(a, b) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def softmax_rows(x) -> np.ndarray:
    """Row-wise softmax of a matrix (or of the last axis of a stack of them)."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise DimensionError(f"softmax_rows expects rank >= 2, got shape {x.shape}")
    z = x - x.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def softmax_rows_backward(y, grad_y) -> np.ndarray:
    """Vector-Jacobian product of :func:`softmax_rows` given its output ``y``."""
    return y * (grad_y - (grad_y * y).sum(axis=-1, keepdims=True))


_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def elementwise(kind: str, a, b=None) -> np.ndarray:
    """Componentwise ``add``, ``sub``, ``mul``, ``scale``, ``relu`` or ``relu_grad``.

    ``relu_grad(a, b)`` masks the upstream gradient ``b`` by ``a > 0``.
    """
    a = as_tensor(a)
    if kind == "relu":
        return np.maximum(a, 0.0)
    if kind == "scale":
        return a * float(b)
    b = as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")
    if kind == "relu_grad":
        return np.where(a > 0, b, 0.0)
    try:
        return _BINARY[kind](a, b)
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None


def reduce(kind: str, x, axis: int) -> np.ndarray:
    """``sum``, ``mean`` or ``max_index`` along one axis.

    ``max_index`` returns the lowest index among tied maxima.
    """
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    if kind == "sum":
        return x.sum(axis=axis)
    if kind == "mean":
        return x.mean(axis=axis)
    if kind == "max_index":
        return np.argmax(x, axis=axis)
    raise ValueError(f"unknown reduction {kind!r}")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_relative_error: float
    passed: bool
    worst_index: tuple | None = None
    checked: int = 0

    def __bool__(self):
        return self.passed


def finite_difference_check(
    f: Callable[[], float],
    p: Param,
    analytic: np.ndarray | None = None,
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    indices=None,
) -> GradCheckReport:
    """Compare an analytic gradient with central differences.

    ``f`` evaluates the scalar objective at the current value of ``p`` (it is
    called with ``p.value`` perturbed in place).  ``analytic`` defaults to
    ``p.grad``.  The relative error at each coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``.  ``indices`` restricts the check to a
    subset of flat coordinates.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    analytic = p.grad if analytic is None else analytic
    flat = p.value.reshape(-1)
    a_flat = np.asarray(analytic, dtype=DTYPE).reshape(-1)
    coords = range(flat.size) if indices is None else indices
    worst, worst_i, count = 0.0, None, 0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + epsilon
        f_plus = float(f())
        flat[i] = orig - epsilon
        f_minus = float(f())
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise GradientCheckError(
                f"non-finite objective while perturbing {p.name or 'param'}[{i}]"
            )
        numeric = (f_plus - f_minus) / (2.0 * epsilon)
        denom = max(abs(a_flat[i]), abs(numeric), 1e-8)
        err = abs(a_flat[i] - numeric) / denom
        count += 1
        if worst_i is None or err > worst:
            worst = err
            worst_i = tuple(int(j) for j in np.unravel_index(i, p.value.shape))
    return GradCheckReport(worst, worst <= tolerance, worst_i, count)


# ---------------------------------------------------------------------------
# binary serialization: u32 rank, rank * u32 dims, f64 payload (little endian)
# ---------------------------------------------------------------------------

def write_tensor(fh: BinaryIO, x) -> None:
    x = as_tensor(x)
    fh.write(struct.pack("<I", x.ndim))
    fh.write(struct.pack(f"<{x.ndim}I", *x.shape))
    fh.write(x.astype("<f8", copy=False).tobytes(order="C"))


def read_tensor(fh: BinaryIO) -> np.ndarray:
    head = fh.read(4)
    if len(head) != 4:
        raise EOFError("truncated tensor header")
    (rank,) = struct.unpack("<I", head)
    dims_raw = fh.read(4 * rank)
    if len(dims_raw) != 4 * rank:
        raise EOFError("truncated tensor shape")
    shape = struct.unpack(f"<{rank}I", dims_raw)
    n = int(np.prod(shape, dtype=np.int64))
    payload = fh.read(8 * n)
    if len(payload) != 8 * n:
        raise EOFError(f"truncated tensor payload for shape {shape}")
    return np.frombuffer(payload, dtype="<f8").astype(DTYPE).reshape(shape)


def save_tensor(path, x) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, x)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)
