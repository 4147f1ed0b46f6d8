"""Hypergradient pathways: Neumann estimator, direction assembly, references.

Three stochastic building blocks feed the algorithms:

* :func:`assemble_client_direction` -- the outer descent direction
  grad_x f - (mixed JVP) u on two independent sub-batches,
* :func:`quadratic_subproblem_grad` -- the gradient H u - grad_y f of the
  quadratic auxiliary problem that tracks the inverse-Hessian solve,
* :func:`neumann_hypergrad` -- the truncated-Neumann hypergradient estimate
  used when every client owns its own lower problem.

Batch arguments here are sizes, not row sets: each function draws its
sub-batches from fixed purposes of the given stream, so calling it twice with
the same stream reproduces the identical batches. The momentum recursions
evaluate old and new points under one stream for exactly this reason.

Reference (non-stochastic) solvers live at the bottom: a matrix-free CG with
relative tolerance 1e-10 capped at 10 * dim iterations, a dense damped-Newton
lower solve for families without a closed form, and finite differences of the
reduced objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import DenseVector, Purpose, RngStream
from .problems.base import ClientProblem

__all__ = [
    "NeumannParams",
    "BiasBound",
    "bias_bound",
    "neumann_hypergrad",
    "assemble_client_direction",
    "quadratic_subproblem_grad",
    "cg_solve",
    "solve_lower",
    "reference_hypergrad",
    "finite_diff_hypergrad",
]


@dataclass(frozen=True)
class NeumannParams:
    """Truncated Neumann series configuration: step tau, truncation Q."""

    tau: float
    Q: int

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.Q < 0:
            raise ValueError(f"Q must be >= 0, got {self.Q}")

    def validate_against(self, L: float) -> None:
        """The series only contracts when tau < 1/L; reject anything else."""
        if self.tau * L >= 1.0:
            raise ValueError(f"tau={self.tau} too large for L={L}: need tau < 1/L")


@dataclass(frozen=True)
class BiasBound:
    """Bias / second-moment envelope of the truncated Neumann estimator."""

    G1: float
    G2_sq: float


def bias_bound(params: NeumannParams, mu: float, L: float, C_f: float, sigma: float, b_x: int) -> BiasBound:
    """Geometric bias bound G1 and second-moment bound G2^2.

    G1 contracts like (1 - tau*mu)^(Q+1); G2^2 collects the variance of the
    sampled series terms and scales inversely with the batch size.
    """
    params.validate_against(L)
    kappa = L / mu
    Q = params.Q
    tau = params.tau
    G1 = kappa * (1.0 - tau * mu) ** (Q + 1) * C_f
    G2_sq = (
        2.0 * C_f**2
        + 12.0 * C_f**2 * L**2 * tau**2 * (Q + 1) ** 2
        + 4.0 * C_f**2 * L**2 * (Q + 2) * (Q + 1) ** 2 * tau**4 * sigma**2
    ) / b_x
    return BiasBound(G1=G1, G2_sq=G2_sq)


def _maybe_draw(problem: ClientProblem, stream: RngStream, purpose: int, size: int | None, domain: str):
    if size is None:
        return None
    return problem.draw(stream.with_purpose(purpose), size, domain)


def neumann_hypergrad(
    problem: ClientProblem,
    x: DenseVector,
    y: DenseVector,
    params: NeumannParams,
    batch: int | None,
    stream: RngStream,
) -> DenseVector:
    """Neumann-series estimate of this client's own hypergradient.

    Uses one upper batch for both f-gradients, one lower batch for the mixed
    JVP, and an independent lower batch per series factor. ``batch=None``
    evaluates the deterministic truncated series on full-batch oracles, which
    isolates the truncation bias from sampling noise.
    """
    bf = _maybe_draw(problem, stream, int(Purpose.BATCH_NEUMANN_F), batch, "upper")
    bg = _maybe_draw(problem, stream, int(Purpose.BATCH_NEUMANN_G), batch, "lower")
    v = problem.grad_f_y(x, y, bf)
    series = v.copy()
    hvp_stream = stream.with_purpose(int(Purpose.BATCH_NEUMANN_HVP))
    for j in range(params.Q, 0, -1):
        bj = None if batch is None else problem.draw(hvp_stream.derived(j), batch, "lower")
        v = v - params.tau * problem.hvp_gyy(x, y, v, bj)
        series = series + v
    return problem.grad_f_x(x, y, bf) - params.tau * problem.jvp_gxy(x, y, series, bg)


def assemble_client_direction(
    problem: ClientProblem,
    x: DenseVector,
    y: DenseVector,
    u: DenseVector,
    batch: int | None,
    stream: RngStream,
) -> DenseVector:
    """Outer direction grad_x f(x,y) - JVP(x,y) u on two independent batches."""
    bf = _maybe_draw(problem, stream, int(Purpose.BATCH_F1), batch, "upper")
    bg = _maybe_draw(problem, stream, int(Purpose.BATCH_G1), batch, "lower")
    return problem.grad_f_x(x, y, bf) - problem.jvp_gxy(x, y, u, bg)


def quadratic_subproblem_grad(
    problem: ClientProblem,
    x: DenseVector,
    y: DenseVector,
    u: DenseVector,
    batch: int | None,
    stream: RngStream,
) -> DenseVector:
    """Gradient H u - grad_y f of the auxiliary quadratic problem in u."""
    bg = _maybe_draw(problem, stream, int(Purpose.BATCH_G2), batch, "lower")
    bf = _maybe_draw(problem, stream, int(Purpose.BATCH_F2), batch, "upper")
    return problem.hvp_gyy(x, y, u, bg) - problem.grad_f_y(x, y, bf)


# ---------------------------------------------------------------------------
# reference solvers (evaluation and tests; never on the training path)
# ---------------------------------------------------------------------------


def cg_solve(matvec, rhs: DenseVector, *, rel_tol: float = 1e-10, max_iter: int | None = None):
    """Conjugate gradients on a PD operator, matrix-free.

    Stops when ||A x - rhs|| <= rel_tol * ||rhs||; iteration cap 10 * dim.
    Returns (solution, iterations).
    """
    n = len(rhs)
    cap = max_iter if max_iter is not None else 10 * n
    x = np.zeros(n)
    r = rhs.copy()
    p = r.copy()
    rs = float(r @ r)
    target = rel_tol * np.sqrt(float(rhs @ rhs))
    if np.sqrt(rs) <= target:
        return x, 0
    for it in range(1, cap + 1):
        Ap = matvec(p)
        alpha = rs / float(p @ Ap)
        x = x + alpha * p
        r = r - alpha * Ap
        rs_new = float(r @ r)
        if np.sqrt(rs_new) <= target:
            return x, it
        p = r + (rs_new / rs) * p
        rs = rs_new
    raise ArithmeticError(f"CG failed to reach {rel_tol:.1e} relative residual in {cap} iterations")


def _dense_hessian(clients: list[ClientProblem], x: DenseVector, y: DenseVector) -> np.ndarray:
    d = len(y)
    H = np.zeros((d, d))
    basis = np.eye(d)
    for j in range(d):
        H[:, j] = np.mean([c.hvp_gyy(x, y, basis[j]) for c in clients], axis=0)
    return H


def solve_lower(
    clients: list[ClientProblem],
    x: DenseVector,
    y0: DenseVector | None = None,
    *,
    tol: float = 1e-11,
    max_iter: int = 100,
) -> DenseVector:
    """Minimize the averaged lower objective by damped Newton (dense).

    Meant for evaluation on families without a closed form; dimensions there
    are small, so assembling the Hessian column by column is cheap. A ridge
    shift keeps the step well-posed if curvature dips during cleaning runs
    (sample weights can go negative mid-run).
    """
    y = np.zeros(clients[0].d) if y0 is None else y0.copy()
    for _ in range(max_iter):
        grad = np.mean([c.grad_g_y(x, y) for c in clients], axis=0)
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= tol:
            return y
        H = _dense_hessian(clients, x, y)
        floor = 1e-10
        lo = float(np.linalg.eigvalsh(H)[0])
        if lo < floor:
            H = H + (floor - lo) * np.eye(len(y))
        step = np.linalg.solve(H, grad)
        # backtrack on the gradient norm; full steps win once locally quadratic
        scale = 1.0
        for _ in range(30):
            trial = y - scale * step
            tnorm = float(
                np.linalg.norm(np.mean([c.grad_g_y(x, trial) for c in clients], axis=0))
            )
            if tnorm < gnorm:
                y = trial
                break
            scale *= 0.5
        else:
            raise ArithmeticError("lower solve stalled: no descent along the Newton direction")
    grad = np.mean([c.grad_g_y(x, y) for c in clients], axis=0)
    if float(np.linalg.norm(grad)) <= tol * 100:
        return y
    raise ArithmeticError(f"lower solve did not converge: |grad|={np.linalg.norm(grad):.3e}")


def reference_hypergrad(
    clients: list[ClientProblem],
    x: DenseVector,
    *,
    scope: str = "global",
    lower_tol: float = 1e-11,
) -> DenseVector:
    """Exact-path hypergradient for any family, matrix-free where possible.

    scope="global": solve the averaged lower problem, then one linear solve
    with the averaged Hessian. scope="local": per-client lower problems and
    solves, averaged at the end.
    """
    if scope == "global":
        y = solve_lower(clients, x, tol=lower_tol)
        rhs = np.mean([c.grad_f_y(x, y) for c in clients], axis=0)
        H = _dense_hessian(clients, x, y)
        u = np.linalg.solve(H, rhs)
        return np.mean([c.grad_f_x(x, y) - c.jvp_gxy(x, y, u) for c in clients], axis=0)
    if scope != "local":
        raise ValueError(f"scope must be 'global' or 'local', got {scope!r}")
    parts = []
    for c in clients:
        if hasattr(c, "lower_solution"):
            y = c.lower_solution(x)
        else:
            y = solve_lower([c], x, tol=lower_tol)
        rhs = c.grad_f_y(x, y)
        H = _dense_hessian([c], x, y)
        u = np.linalg.solve(H, rhs)
        parts.append(c.grad_f_x(x, y) - c.jvp_gxy(x, y, u))
    return np.mean(parts, axis=0)


def finite_diff_hypergrad(problems, x: DenseVector, step: float = 1e-5) -> DenseVector:
    """Central finite differences of the reduced objective h.

    ``problems`` is a family object; the averaged-lower h is used when the
    family supports it, the per-client-lower variant otherwise. Each
    coordinate costs two exact lower solves, so keep dimensions small.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    if hasattr(problems, "value_h"):
        value = problems.value_h
    elif hasattr(problems, "value_h_local"):
        value = problems.value_h_local
    else:
        clients = list(problems.clients) if hasattr(problems, "clients") else list(problems)

        def value(xv):
            y = solve_lower(clients, xv)
            return float(np.mean([c.value_f(xv, y) for c in clients]))

    out = np.zeros(len(x))
    for i in range(len(x)):
        e = np.zeros(len(x))
        e[i] = step
        out[i] = (value(x + e) - value(x - e)) / (2.0 * step)
    return out
