"""Dense float64 vectors/matrices and keyed deterministic randomness.

Everything downstream builds on two guarantees made here:

* all arrays are float64 and finite (``as_vector`` / ``as_matrix`` enforce it),
* every random draw is a pure function of a :class:`RngStream` key, so the
  same (seed, client, step, purpose) always reproduces the same numbers no
  matter how many threads run or in what order calls happen.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np
import numpy.typing as npt

__all__ = [
    "DenseVector",
    "DenseMatrix",
    "Purpose",
    "RngStream",
    "as_vector",
    "as_matrix",
    "axpy",
    "project_ball",
    "gaussian",
    "pairwise_mean",
]

# 1-D / 2-D float64 ndarrays; constructors below validate shape and finiteness.
DenseVector = npt.NDArray[np.float64]
DenseMatrix = npt.NDArray[np.float64]

_U64 = np.uint64


def as_vector(data, dim: int | None = None) -> DenseVector:
    """Return ``data`` as a finite float64 1-D array, copying only if needed."""
    v = np.ascontiguousarray(data, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected 1-D vector, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise ValueError(f"expected dim {dim}, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite components")
    return v


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> DenseMatrix:
    """Return ``data`` as a finite float64 2-D row-major array."""
    m = np.ascontiguousarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected 2-D matrix, got shape {m.shape}")
    if rows is not None and m.shape[0] != rows:
        raise ValueError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise ValueError(f"expected {cols} cols, got {m.shape[1]}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    return m


class Purpose(IntEnum):
    """Stream purpose tags.

    Values below 16 are batch draws that may spawn derived sub-streams via
    :meth:`RngStream.derived`; derived tags add multiples of 64, so base and
    derived purposes never collide (distinct residues mod 64).
    """

    BATCH_Y = 1
    BATCH_F1 = 2
    BATCH_G1 = 3
    BATCH_F2 = 4
    BATCH_G2 = 5
    BATCH_INIT = 6
    BATCH_NEUMANN_F = 7
    BATCH_NEUMANN_G = 8
    BATCH_NEUMANN_HVP = 9  # derived per series index
    CLIENT_SAMPLING = 16
    PROBE = 17
    DATA_GEN = 18
    INIT_POINT = 19


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream keyed by (seed, client, step, purpose).

    Draws come from a fresh Philox generator per call with
    ``key = (seed, client)`` and ``counter = (0, step, purpose, 0)``, which
    makes each stream independent of every other and of call order. Safe to
    use from any thread.
    """

    seed: int
    client: int = 0
    step: int = 0
    purpose: int = 0

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.client], dtype=_U64)
        counter = np.array([0, self.step, self.purpose, 0], dtype=_U64)
        return np.random.Generator(np.random.Philox(key=key, counter=counter))

    def derived(self, tag: int) -> "RngStream":
        """Sub-stream ``tag`` >= 1 of this stream (e.g. per-oracle noise)."""
        if tag < 1:
            raise ValueError("derived tag must be >= 1")
        return RngStream(self.seed, self.client, self.step, self.purpose + 64 * tag)

    def with_purpose(self, purpose: int) -> "RngStream":
        """Same (seed, client, step) under a different purpose tag."""
        return RngStream(self.seed, self.client, self.step, int(purpose))

    def normal(self, dim: int) -> DenseVector:
        return self.generator().standard_normal(dim)

    def integers(self, low: int, high: int, size: int) -> npt.NDArray[np.int64]:
        return self.generator().integers(low, high, size=size, dtype=np.int64)


def axpy(a: float, x: DenseVector, y: DenseVector) -> DenseVector:
    """Return ``a*x + y`` componentwise."""
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    return a * x + y


def project_ball(u: DenseVector, r: float) -> DenseVector:
    """Project ``u`` onto the Euclidean ball of radius ``r``.

    Returns ``u`` itself (same object) when it is already inside, and keeps
    rescaling until the computed norm is inside, so the projection is exactly
    idempotent even when rounding leaves the first rescale an ulp outside.
    """
    if r <= 0:
        raise ValueError(f"radius must be positive, got {r}")
    norm = float(np.linalg.norm(u))
    if norm <= r:
        return u
    v = u * (r / norm)
    norm = float(np.linalg.norm(v))
    while norm > r:
        v = v * (r / norm)
        norm = float(np.linalg.norm(v))
    return v


def gaussian(stream: RngStream, dim: int, sigma: float) -> DenseVector:
    """i.i.d. N(0, sigma^2) vector, a pure function of the stream key."""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0.0:
        return np.zeros(dim)
    return sigma * stream.normal(dim)


def pairwise_mean(vectors: list[DenseVector]) -> DenseVector:
    """Mean of equal-length vectors via pairwise summation.

    Result depends only on the multiset of inputs up to ~1e-16 relative; the
    caller fixes a canonical order to make it bit-stable.
    """
    if not vectors:
        raise ValueError("mean of empty list")
    return np.mean(np.stack(vectors), axis=0)
