"""Per-client bilevel oracle interface and shared problem plumbing.

A client problem exposes stochastic first- and second-order oracles of its
upper objective f(x, y) and lower objective g(x, y). Every oracle takes an
optional :class:`Batch`; ``None`` means the exact full-batch value. All
randomness enters through the batch's stream key, so a given batch always
reproduces the same evaluation at the same point.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from ..numerics import DenseVector, Purpose, RngStream

__all__ = [
    "ProblemConstants",
    "Batch",
    "draw_batch",
    "ClientProblem",
    "estimate_grad_bound",
]


@dataclass(frozen=True)
class ProblemConstants:
    """Measured regularity constants of a generated problem family.

    mu/L are the strong-convexity and smoothness constants of the lower
    problem (L also bounds the upper gradients' Lipschitz constant and the
    coupling operator norms), C_f bounds the upper gradient norm near the
    initial point, kappa = L/mu, sigma the oracle noise level. L_upper, when
    measured, is the smoothness constant of the reduced objective
    h(x) = mean_m f_m(x, y_x) and is used only for default step sizes.
    """

    mu: float
    L: float
    C_f: float
    kappa: float
    sigma: float
    L_upper: float | None = None

    def __post_init__(self) -> None:
        if not (self.mu > 0 and self.L >= self.mu and self.C_f > 0):
            raise ValueError(f"need 0 < mu <= L and C_f > 0, got {self}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be non-negative, got {self.sigma}")
        if abs(self.kappa - self.L / self.mu) > 1e-9 * self.kappa:
            raise ValueError(f"kappa must equal L/mu, got {self}")


@dataclass(frozen=True)
class Batch:
    """One minibatch: the stream key that drew it plus optional row indices.

    Families with real rows (data cleaning, hyper-representation) carry the
    sampled indices; the synthetic quadratic family has no rows and models
    minibatch noise directly from the stream, so ``indices`` is None there.
    Two oracle calls with equal ``batch_id`` see identical samples/noise,
    which is what STORM's paired evaluations rely on.
    """

    stream: RngStream
    size: int
    indices: np.ndarray | None = None

    @property
    def batch_id(self) -> tuple[int, int, int, int]:
        s = self.stream
        return (s.seed, s.client, s.step, s.purpose)


def draw_batch(stream: RngStream, size: int, n_rows: int | None) -> Batch:
    """Draw a with-replacement batch of ``size`` rows (virtual if no rows)."""
    if size < 1:
        raise ValueError(f"batch size must be >= 1, got {size}")
    indices = None if n_rows is None else stream.integers(0, n_rows, size)
    return Batch(stream=stream, size=size, indices=indices)


class ClientProblem(ABC):
    """Oracle bundle of one client's (f, g) pair.

    Implementations are read-only after construction; concurrent calls are
    safe because each call's randomness comes solely from its batch argument.
    """

    p: int
    d: int
    client_id: int

    # -- batch plumbing ----------------------------------------------------

    def n_rows(self, domain: str) -> int | None:
        """Row count backing ``domain`` ("lower" train / "upper" val)."""
        return None

    def draw(self, stream: RngStream, size: int, domain: str) -> Batch:
        if domain not in ("lower", "upper"):
            raise ValueError(f"domain must be 'lower' or 'upper', got {domain!r}")
        return draw_batch(stream, size, self.n_rows(domain))

    # -- first-order oracles ------------------------------------------------

    @abstractmethod
    def grad_f_x(self, x: DenseVector, y: DenseVector, batch: Batch | None = None) -> DenseVector:
        """d/dx of the upper objective (upper-domain batch)."""

    @abstractmethod
    def grad_f_y(self, x: DenseVector, y: DenseVector, batch: Batch | None = None) -> DenseVector:
        """d/dy of the upper objective (upper-domain batch)."""

    @abstractmethod
    def grad_g_y(self, x: DenseVector, y: DenseVector, batch: Batch | None = None) -> DenseVector:
        """d/dy of the lower objective (lower-domain batch)."""

    # -- second-order oracles -----------------------------------------------

    @abstractmethod
    def hvp_gyy(self, x: DenseVector, y: DenseVector, v: DenseVector, batch: Batch | None = None) -> DenseVector:
        """Lower-objective Hessian-vector product in y."""

    @abstractmethod
    def jvp_gxy(self, x: DenseVector, y: DenseVector, v: DenseVector, batch: Batch | None = None) -> DenseVector:
        """Mixed second derivative applied to a y-space vector, output in x-space."""

    # -- objective values (full batch; used by validators) -------------------

    @abstractmethod
    def value_f(self, x: DenseVector, y: DenseVector) -> float:
        """Exact upper objective value."""

    @abstractmethod
    def value_g(self, x: DenseVector, y: DenseVector) -> float:
        """Exact lower objective value."""


def estimate_grad_bound(
    clients: list[ClientProblem],
    x0: DenseVector,
    y0: DenseVector,
    seed: int,
    probes: int = 100,
) -> float:
    """Max full-batch upper-gradient norm over random points near the init.

    Probes are drawn uniformly from the unit ball around (x0, y0); the
    maximum of ||(grad_f_x, grad_f_y)|| over probes and clients estimates the
    gradient bound used for the projection radius default.
    """
    p, d = len(x0), len(y0)
    best = 0.0
    for i in range(probes):
        g = RngStream(seed, client=0, step=i, purpose=int(Purpose.PROBE)).generator()
        direction = g.standard_normal(p + d)
        direction /= np.linalg.norm(direction)
        radius = g.random() ** (1.0 / (p + d))
        point = np.concatenate([x0, y0]) + radius * direction
        xp, yp = point[:p], point[p:]
        for c in clients:
            norm = float(np.hypot(np.linalg.norm(c.grad_f_x(xp, yp)), np.linalg.norm(c.grad_f_y(xp, yp))))
            best = max(best, norm)
    return best
