"""Dense array kernels and the seeded random source.

Tensors are plain C-contiguous (row-major) ``numpy.ndarray`` objects of dtype
float32 or float64.  The helpers here add the validation the rest of the
package relies on: equal-shape or scalar-only broadcasting, matching dtypes
and descriptive dimension errors.

Random numbers come from the PCG64 bit generator (O'Neill 2014, as shipped by
numpy, whose raw stream is frozen across releases and platforms).  Normal
variates are produced with the Box-Muller transform on top of that raw
stream, so a seed pins every draw regardless of numpy's own sampling code.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_DTYPE_ALIASES = {
    "f32": np.float32, "float32": np.float32,
    "f64": np.float64, "float64": np.float64,
}


class DimensionError(ValueError):
    """Operand shapes do not fit the requested kernel."""


def resolve_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str):
        try:
            dtype = _DTYPE_ALIASES[dtype.lower()]
        except KeyError:
            raise ValueError(f"unsupported dtype {dtype!r}; use f32 or f64") from None
    dt = np.dtype(dtype)
    if dt not in FLOAT_DTYPES:
        raise ValueError(f"unsupported dtype {dt}; use float32 or float64")
    return dt


def as_tensor(data, dtype=np.float64) -> np.ndarray:
    return np.ascontiguousarray(data, dtype=resolve_dtype(dtype))


def _check_dtypes(a: np.ndarray, b: np.ndarray) -> None:
    if a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product batched over identical leading dimensions."""
    a, b = np.asarray(a), np.asarray(b)
    _check_dtypes(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions differ: {a.shape} x {b.shape} "
            f"({a.shape[-1]} != {b.shape[-2]})"
        )
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape[:-2]} vs {b.shape[:-2]}")
    return np.matmul(a, b)


_ELEMENTWISE = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def elementwise(op: str, a: np.ndarray, b) -> np.ndarray:
    """Apply ``add``, ``sub``, ``mul`` or ``scale`` to equal shapes or tensor/scalar.

    ``scale`` requires ``b`` to be a scalar.
    """
    a = np.asarray(a)
    if op == "scale":
        if not np.isscalar(b) and np.ndim(b) != 0:
            raise DimensionError("scale takes a scalar factor")
        return np.multiply(a, a.dtype.type(b))
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if np.isscalar(b) or np.ndim(b) == 0:
        return fn(a, a.dtype.type(b))
    b = np.asarray(b)
    _check_dtypes(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes differ {a.shape} vs {b.shape}")
    return fn(a, b)


def reduce(op: str, a: np.ndarray, axis: int) -> np.ndarray:
    """Reduce ``a`` along ``axis`` with ``sum``, ``mean``, ``max`` or ``l2norm``."""
    a = np.asarray(a)
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"axis {axis} out of range for rank {a.ndim}")
    if op == "sum":
        return a.sum(axis=axis)
    if op == "mean":
        return a.mean(axis=axis)
    if op == "max":
        return a.max(axis=axis)
    if op == "l2norm":
        return np.sqrt(np.square(a).sum(axis=axis))
    raise ValueError(f"unknown reduction {op!r}")


@dataclass
class RngState:
    """Seeded PCG64 stream.

    Subsystem streams are derived with :meth:`split`, which mixes the parent
    seed with the CRC-32 of a name through ``numpy.random.SeedSequence``.
    Derivation does not consume draws from the parent.
    """

    seed: int
    _bits: np.random.PCG64 = field(init=False, repr=False)

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        self.seed = int(self.seed)
        self._bits = np.random.PCG64(np.random.SeedSequence(self.seed))

    def split(self, name: str) -> "RngState":
        child = RngState.__new__(RngState)
        child.seed = self.seed
        child._bits = np.random.PCG64(
            np.random.SeedSequence([self.seed, zlib.crc32(name.encode("utf-8"))])
        )
        return child

    def raw(self, n: int) -> np.ndarray:
        return self._bits.random_raw(n).astype(np.uint64, copy=False)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) built from the top 53 bits of each raw draw."""
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def normal(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        radius = np.sqrt(-2.0 * np.log(1.0 - u[:pairs]))
        angle = 2.0 * np.pi * u[pairs:]
        z = np.empty(2 * pairs)
        z[0::2] = radius * np.cos(angle)
        z[1::2] = radius * np.sin(angle)
        return z[:n]

    def integers(self, high: int, n: int) -> np.ndarray:
        """``n`` integers in [0, high)."""
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")


def normal_init(shape, mean: float, stddev: float, rng: RngState, dtype=np.float64) -> np.ndarray:
    """I.i.d. normal samples of the given shape, row-major fill order."""
    if stddev < 0:
        raise ValueError("stddev must be non-negative")
    shape = tuple(int(s) for s in shape)
    count = int(np.prod(shape, dtype=np.int64))
    z = rng.normal(count)
    out = mean + stddev * z
    return out.reshape(shape).astype(resolve_dtype(dtype))
