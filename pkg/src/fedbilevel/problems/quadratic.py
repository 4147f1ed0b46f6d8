"""Synthetic quadratic bilevel family with closed-form reference solutions.

Client m holds
    f_m(x, y) = 0.5 * ||A_m x + B_m y - c_m||^2
    g_m(x, y) = 0.5 * y' H_m y + y' (J_m' x + b_m)
with H_m positive definite, so both the averaged and the per-client lower
problems have unique solutions that are linear in x. Everything downstream
(exact lower solution, exact hypergradient, upper minimizer) is available in
closed form, which is what makes this family the reference oracle for tests.

Minibatch noise is synthetic: first-order oracles add keyed Gaussian noise
with per-component deviation sigma/sqrt(batch), second-order oracles add a
rank-one zero-mean perturbation that stays linear in the input vector. Equal
batch keys reproduce the identical perturbation, matching the behaviour of
re-evaluating a real minibatch at a new point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..numerics import DenseMatrix, DenseVector, Purpose, RngStream, as_vector
from .base import Batch, ClientProblem, ProblemConstants, estimate_grad_bound

__all__ = [
    "QuadraticClient",
    "QuadraticFamily",
    "make_quadratic",
    "exact_lower_solution",
    "exact_hypergradient",
]

# derived-stream tags for the synthetic noise channels
_TAG_FX = 1
_TAG_FY = 2
_TAG_GY = 3
_TAG_HVP = 4
_TAG_JVP = 5


@dataclass(frozen=True, eq=False)
class QuadraticClient(ClientProblem):
    """One client's quadratic (f, g) pair; arrays are read-only."""

    client_id: int
    A: DenseMatrix
    B: DenseMatrix
    c: DenseVector
    H: DenseMatrix
    J: DenseMatrix
    b0: DenseVector
    sigma: float

    @property
    def p(self) -> int:
        return self.A.shape[1]

    @property
    def d(self) -> int:
        return self.B.shape[1]

    def _residual(self, x: DenseVector, y: DenseVector) -> DenseVector:
        return self.A @ x + self.B @ y - self.c

    def _first_order_noise(self, batch: Batch | None, tag: int, dim: int) -> DenseVector | None:
        if batch is None or self.sigma == 0.0:
            return None
        gen = batch.stream.derived(tag).generator()
        return gen.standard_normal(dim) * (self.sigma / np.sqrt(batch.size))

    def _rank_one_noise(
        self, batch: Batch | None, tag: int, out_dim: int, v: DenseVector
    ) -> DenseVector | None:
        if batch is None or self.sigma == 0.0:
            return None
        gen = batch.stream.derived(tag).generator()
        left = gen.standard_normal(out_dim)
        right = gen.standard_normal(len(v))
        scale = self.sigma / np.sqrt(batch.size * len(v))
        return scale * left * float(right @ v)

    def grad_f_x(self, x: DenseVector, y: DenseVector, batch: Batch | None = None) -> DenseVector:
        out = self.A.T @ self._residual(x, y)
        noise = self._first_order_noise(batch, _TAG_FX, self.p)
        return out if noise is None else out + noise

    def grad_f_y(self, x: DenseVector, y: DenseVector, batch: Batch | None = None) -> DenseVector:
        out = self.B.T @ self._residual(x, y)
        noise = self._first_order_noise(batch, _TAG_FY, self.d)
        return out if noise is None else out + noise

    def grad_g_y(self, x: DenseVector, y: DenseVector, batch: Batch | None = None) -> DenseVector:
        out = self.H @ y + self.J.T @ x + self.b0
        noise = self._first_order_noise(batch, _TAG_GY, self.d)
        return out if noise is None else out + noise

    def hvp_gyy(self, x: DenseVector, y: DenseVector, v: DenseVector, batch: Batch | None = None) -> DenseVector:
        out = self.H @ v
        noise = self._rank_one_noise(batch, _TAG_HVP, self.d, v)
        return out if noise is None else out + noise

    def jvp_gxy(self, x: DenseVector, y: DenseVector, v: DenseVector, batch: Batch | None = None) -> DenseVector:
        out = self.J @ v
        noise = self._rank_one_noise(batch, _TAG_JVP, self.p, v)
        return out if noise is None else out + noise

    def value_f(self, x: DenseVector, y: DenseVector) -> float:
        r = self._residual(x, y)
        return 0.5 * float(r @ r)

    def value_g(self, x: DenseVector, y: DenseVector) -> float:
        return float(0.5 * (y @ (self.H @ y)) + y @ (self.J.T @ x + self.b0))


@dataclass(frozen=True, eq=False)
class QuadraticFamily:
    """Client list plus measured constants and closed-form reference maps."""

    clients: list[QuadraticClient]
    constants: ProblemConstants
    seed: int
    zeta: float
    supports: frozenset[str] = field(default=frozenset({"global", "local"}), init=False)
    name: str = field(default="quadratic", init=False)

    @property
    def M(self) -> int:
        return len(self.clients)

    @property
    def p(self) -> int:
        return self.clients[0].p

    @property
    def d(self) -> int:
        return self.clients[0].d

    def init_x(self) -> DenseVector:
        return np.zeros(self.p)

    def init_y(self) -> DenseVector:
        return np.zeros(self.d)

    # -- averaged-lower (global) reference maps ------------------------------

    def _means(self) -> tuple[DenseMatrix, DenseMatrix, DenseVector]:
        H = np.mean([c.H for c in self.clients], axis=0)
        J = np.mean([c.J for c in self.clients], axis=0)
        b = np.mean([c.b0 for c in self.clients], axis=0)
        return H, J, b

    def lower_solution(self, x: DenseVector) -> DenseVector:
        H, J, b = self._means()
        return np.linalg.solve(H, -(J.T @ x + b))

    def u_star(self, x: DenseVector) -> DenseVector:
        y = self.lower_solution(x)
        H, _, _ = self._means()
        rhs = np.mean([c.grad_f_y(x, y) for c in self.clients], axis=0)
        return np.linalg.solve(H, rhs)

    def grad_h(self, x: DenseVector) -> DenseVector:
        y = self.lower_solution(x)
        H, J, _ = self._means()
        f_x = np.mean([c.grad_f_x(x, y) for c in self.clients], axis=0)
        f_y = np.mean([c.grad_f_y(x, y) for c in self.clients], axis=0)
        return f_x - J @ np.linalg.solve(H, f_y)

    def value_h(self, x: DenseVector) -> float:
        y = self.lower_solution(x)
        return float(np.mean([c.value_f(x, y) for c in self.clients]))

    def minimizer_x(self) -> DenseVector:
        H, J, b = self._means()
        P = np.linalg.solve(H, -J.T)
        p0 = np.linalg.solve(H, -b)
        K = np.zeros((self.p, self.p))
        w = np.zeros(self.p)
        for c in self.clients:
            C = c.A + c.B @ P
            K += C.T @ C
            w += C.T @ (c.c - c.B @ p0)
        K /= self.M
        w /= self.M
        return np.linalg.solve(K, w)

    # -- per-client-lower (local) reference maps ------------------------------

    def lower_solution_local(self, m: int, x: DenseVector) -> DenseVector:
        c = self.clients[m]
        return np.linalg.solve(c.H, -(c.J.T @ x + c.b0))

    def client_hypergrad_local(self, m: int, x: DenseVector) -> DenseVector:
        c = self.clients[m]
        y = self.lower_solution_local(m, x)
        return c.grad_f_x(x, y) - c.J @ np.linalg.solve(c.H, c.grad_f_y(x, y))

    def grad_h_local(self, x: DenseVector) -> DenseVector:
        return np.mean([self.client_hypergrad_local(m, x) for m in range(self.M)], axis=0)

    def value_h_local(self, x: DenseVector) -> float:
        return float(
            np.mean(
                [c.value_f(x, self.lower_solution_local(m, x)) for m, c in enumerate(self.clients)]
            )
        )


def _clients_of(problems) -> list[QuadraticClient]:
    clients = list(problems.clients) if hasattr(problems, "clients") else list(problems)
    if not clients:
        raise ValueError("need at least one client problem")
    return clients


def exact_lower_solution(problems, x: DenseVector) -> DenseVector:
    """Minimizer of the averaged lower objective at x, by direct solve.

    The solve is exact up to linear-algebra roundoff; the relative residual
    of the averaged optimality system is checked against 1e-8.
    """
    clients = _clients_of(problems)
    x = as_vector(x, clients[0].p)
    H = np.mean([c.H for c in clients], axis=0)
    rhs = -np.mean([c.J.T @ x + c.b0 for c in clients], axis=0)
    y = np.linalg.solve(H, rhs)
    residual = np.linalg.norm(H @ y - rhs)
    scale = max(np.linalg.norm(rhs), 1.0)
    if residual > 1e-8 * scale:
        raise ArithmeticError(f"lower solve residual {residual:.3e} exceeds tolerance")
    return y


def exact_hypergradient(problems, x: DenseVector) -> DenseVector:
    """Gradient of h(x) = mean_m f_m(x, y_x) with the averaged-lower y_x."""
    clients = _clients_of(problems)
    x = as_vector(x, clients[0].p)
    y = exact_lower_solution(clients, x)
    H = np.mean([c.H for c in clients], axis=0)
    J = np.mean([c.J for c in clients], axis=0)
    f_x = np.mean([c.grad_f_x(x, y) for c in clients], axis=0)
    f_y = np.mean([c.grad_f_y(x, y) for c in clients], axis=0)
    return f_x - J @ np.linalg.solve(H, f_y)


def _psd_blend(gen: np.random.Generator, base: DenseMatrix, zeta: float, d: int) -> DenseMatrix:
    own = gen.standard_normal((d, d))
    own = own @ own.T / d
    return (base + zeta * own) / (1.0 + zeta)


def make_quadratic(
    seed: int,
    M: int,
    p: int,
    d: int,
    sigma: float = 0.0,
    zeta: float = 0.0,
    *,
    mu: float = 1.0,
    L: float = 10.0,
    coupling: float = 1.0,
    upper_scale: float = 1.0,
    res_dim: int | None = None,
) -> QuadraticFamily:
    """Generate M quadratic clients with heterogeneity zeta and noise sigma.

    zeta = 0 makes all clients identical; growing zeta blends in per-client
    random components. The lower Hessians are built as mu * I plus a scaled
    PSD part with top eigenvalue L - mu, so each lower problem is mu-strongly
    convex with spectrum inside [mu, L] by construction. Reported constants
    are measured from the realized matrices, not taken from the targets.
    """
    if M < 1 or p < 1 or d < 1:
        raise ValueError(f"need M, p, d >= 1, got M={M} p={p} d={d}")
    if sigma < 0 or zeta < 0:
        raise ValueError(f"sigma and zeta must be non-negative, got {sigma}, {zeta}")
    if not (0 < mu < L):
        raise ValueError(f"need 0 < mu < L, got mu={mu} L={L}")

    q = res_dim if res_dim is not None else max(p, d) + 2
    gen = RngStream(seed, client=0, step=0, purpose=int(Purpose.DATA_GEN)).generator()

    base_S = gen.standard_normal((d, d))
    base_S = base_S @ base_S.T / d
    base_J = gen.standard_normal((p, d)) / np.sqrt(max(p, d))
    base_A = gen.standard_normal((q, p)) / np.sqrt(q)
    base_B = gen.standard_normal((q, d)) / np.sqrt(q)
    base_c = gen.standard_normal(q)
    base_b = gen.standard_normal(d)

    clients = []
    for m in range(M):
        S = _psd_blend(gen, base_S, zeta, d)
        top = float(np.linalg.eigvalsh(S)[-1])
        H = mu * np.eye(d) + (L - mu) * (S / top)
        J = coupling * (base_J + zeta * gen.standard_normal((p, d)) / np.sqrt(max(p, d))) / (1.0 + zeta)
        A = upper_scale * (base_A + zeta * gen.standard_normal((q, p)) / np.sqrt(q)) / (1.0 + zeta)
        B = upper_scale * (base_B + zeta * gen.standard_normal((q, d)) / np.sqrt(q)) / (1.0 + zeta)
        c = (base_c + zeta * gen.standard_normal(q)) / (1.0 + zeta)
        b0 = (base_b + zeta * gen.standard_normal(d)) / (1.0 + zeta)
        for arr in (A, B, c, H, J, b0):
            arr.setflags(write=False)
        clients.append(QuadraticClient(client_id=m, A=A, B=B, c=c, H=H, J=J, b0=b0, sigma=sigma))

    mu_meas = min(float(np.linalg.eigvalsh(c.H)[0]) for c in clients)
    L_meas = mu_meas
    for cl in clients:
        upper = np.hstack([cl.A, cl.B])
        L_meas = max(
            L_meas,
            float(np.linalg.eigvalsh(cl.H)[-1]),
            float(np.linalg.svd(cl.J, compute_uv=False)[0]),
            float(np.linalg.svd(upper, compute_uv=False)[0]) ** 2,
        )

    C_f = estimate_grad_bound(clients, np.zeros(p), np.zeros(d), seed)
    H_bar = np.mean([c.H for c in clients], axis=0)
    J_bar = np.mean([c.J for c in clients], axis=0)
    P = np.linalg.solve(H_bar, -J_bar.T)
    K = np.mean([(c.A + c.B @ P).T @ (c.A + c.B @ P) for c in clients], axis=0)
    L_upper = float(np.linalg.eigvalsh(K)[-1])
    constants = ProblemConstants(
        mu=mu_meas,
        L=L_meas,
        C_f=C_f,
        kappa=L_meas / mu_meas,
        sigma=sigma,
        L_upper=L_upper,
    )
    return QuadraticFamily(clients=clients, constants=constants, seed=seed, zeta=zeta)
