"""Tensors, counter-based random streams and 1-D quadrature.

Tensors are plain float64 numpy arrays. Public operations in the package call
:func:`as_tensor` / :func:`check_same_shape` at their boundaries so that NaN/Inf
values and silent broadcasting are rejected early.
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

_MASK64 = (1 << 64) - 1


class NumericsError(ValueError):
    """Raised for non-finite values, bad shapes or invalid numeric arguments."""


class IntegrationError(NumericsError):
    pass


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Return ``x`` as a C-contiguous float64 array, rejecting NaN/Inf."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"{name} contains non-finite values")
    return arr


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "operands") -> None:
    if np.shape(a) != np.shape(b):
        raise NumericsError(f"shape mismatch for {what}: {np.shape(a)} vs {np.shape(b)}")


def frozen(x: np.ndarray) -> np.ndarray:
    """Mark an array read-only (returned tensors are immutable)."""
    x.setflags(write=False)
    return x


# ---------------------------------------------------------------------------
# random streams


def _mix(*ids: int) -> int:
    h = hashlib.blake2b(digest_size=8)
    for i in ids:
        h.update(struct.pack("<Q", int(i) & _MASK64))
    return struct.unpack("<Q", h.digest())[0]


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream keyed by ``(master_seed, stream_id)``.

    Every call to :meth:`generator` restarts the Philox counter at zero, so the
    value sequence depends only on the key, never on evaluation order or on
    which worker asks for it. Use :meth:`child` to derive independent
    substreams (per sample, per latent, per trial ...).
    """

    master_seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        key = [self.master_seed & _MASK64, self.stream_id & _MASK64]
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, *ids: int) -> "RngStream":
        return RngStream(self.master_seed, _mix(self.stream_id, *ids))


def sample_gaussian(stream: RngStream, shape: Sequence[int] | int, mean: float = 0.0,
                    std: float = 1.0) -> np.ndarray:
    if std < 0:
        raise NumericsError(f"std must be non-negative, got {std}")
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    z = stream.generator().standard_normal(shape)
    return mean + std * z


def sample_uniform(stream: RngStream, shape: Sequence[int] | int, low: float = 0.0,
                   high: float = 1.0) -> np.ndarray:
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    return stream.generator().uniform(low, high, shape)


# ---------------------------------------------------------------------------
# quadrature


@dataclass(frozen=True)
class QuadratureSpec:
    node_count: int = 128
    lower: float = 0.0
    upper: float = 1.0

    def __post_init__(self):
        if self.node_count < 2:
            raise NumericsError("node_count must be >= 2")
        if not self.lower < self.upper:
            raise NumericsError("quadrature requires lower < upper")


@lru_cache(maxsize=32)
def _legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.polynomial.legendre.leggauss(n)


def integrate(f: Callable[[float], float], spec: QuadratureSpec = QuadratureSpec()) -> float:
    """Gauss-Legendre estimate of the integral of ``f`` over ``[lower, upper]``."""
    nodes, weights = _legendre(spec.node_count)
    half = 0.5 * (spec.upper - spec.lower)
    mid = 0.5 * (spec.upper + spec.lower)
    total = 0.0
    for node, w in zip(nodes, weights):
        t = mid + half * node
        v = float(f(t))
        if not np.isfinite(v):
            raise IntegrationError(f"integrand is not finite at node t={t!r}")
        total += w * v
    return half * total


def exact_mean(values: np.ndarray) -> np.ndarray:
    """Column means of a 2-D array using exactly rounded summation.

    The result does not depend on row order, so reductions over trials computed
    in any chunking agree bit-for-bit.
    """
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[0]
    return np.array([math.fsum(col) / n for col in values.T])
