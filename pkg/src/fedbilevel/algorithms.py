"""Client-side step kernels for the federated bilevel algorithms.

Every kernel is a pure function (state, problem, hyperparams, step index,
stream) -> state. Randomness enters only through the stream, keyed by
(seed, client, step), so steps are reproducible and thread-order free.
The federation layer owns all averaging; kernels never see other clients.

Two algorithm groups share the state layout:

* averaged lower problem: ``fedbioacc_step`` (momentum accelerated, one
  decaying rate alpha_t scales all three updates) and ``fedbio_step``
  (fresh directions each step, constant rates). Both track the auxiliary
  variable u inside a projection ball of radius r.
* per-client lower problem: ``fedbio_locallower_step`` and
  ``fedbioacc_locallower_step`` estimate each client's own hypergradient by
  a truncated Neumann series; y never leaves the client. The accelerated
  variant refreshes momenta at the post-communication point, so its step is
  split into a variable phase and a momentum phase with the sync in between.

``fedavg_step`` descends the lower objective only (single-level baseline).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .hypergrad import NeumannParams, assemble_client_direction, neumann_hypergrad, quadratic_subproblem_grad
from .numerics import DenseVector, Purpose, RngStream, project_ball
from .problems.base import ClientProblem, ProblemConstants

__all__ = [
    "AlgoKind",
    "Schedule",
    "alpha",
    "HyperParams",
    "ClientState",
    "init_state",
    "default_hyperparams",
    "init_momenta",
    "momentum_weight",
    "fedbioacc_step",
    "fedbio_step",
    "fedbio_locallower_step",
    "fedbioacc_locallower_step",
    "local_acc_phase_a",
    "local_acc_phase_b",
    "fedavg_step",
]


class AlgoKind(Enum):
    FEDBIO = "fedbio"
    FEDBIOACC = "fedbioacc"
    FEDBIO_LOCAL = "fedbio_local"
    FEDBIOACC_LOCAL = "fedbioacc_local"
    FEDAVG = "fedavg"

    @classmethod
    def from_str(cls, name: str) -> "AlgoKind":
        try:
            return cls(name)
        except ValueError:
            valid = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown algorithm {name!r}; valid: {valid}") from None

    @property
    def local_lower(self) -> bool:
        return self in (AlgoKind.FEDBIO_LOCAL, AlgoKind.FEDBIOACC_LOCAL)

    @property
    def accelerated(self) -> bool:
        return self in (AlgoKind.FEDBIOACC, AlgoKind.FEDBIOACC_LOCAL)


@dataclass(frozen=True)
class Schedule:
    """Cube-root decay alpha_t = delta / (u0 + t)^(1/3)."""

    delta: float
    u0: float

    def __post_init__(self) -> None:
        if self.delta <= 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if self.u0 < 0:
            raise ValueError(f"u0 must be non-negative, got {self.u0}")


def alpha(schedule: Schedule, t: int) -> float:
    """Step-size multiplier at step t (1-based)."""
    if t < 1:
        raise ValueError(f"step index must be >= 1, got {t}")
    return schedule.delta / (schedule.u0 + t) ** (1.0 / 3.0)


@dataclass(frozen=True)
class HyperParams:
    """Rates, momentum constants and batch sizes for one run.

    ``schedule=None`` means alpha_t = 1 (the non-accelerated algorithms).
    ``c_eta`` and ``c_gamma`` are accepted for config compatibility with
    rate-named sweeps and are not used by any kernel. ``local_u_update``
    switches on the (otherwise inert) u recursion of the accelerated
    local-lower variant.
    """

    eta: float
    gamma: float
    tau: float
    r: float
    I: int
    b: int
    b1: int
    c_nu: float = 0.0
    c_omega: float = 0.0
    c_u: float = 0.0
    schedule: Schedule | None = None
    c_eta: float | None = None
    c_gamma: float | None = None
    local_u_update: bool = False
    neumann: NeumannParams | None = None

    def __post_init__(self) -> None:
        if min(self.eta, self.gamma, self.tau) <= 0:
            raise ValueError(f"rates must be positive: eta={self.eta} gamma={self.gamma} tau={self.tau}")
        if self.r <= 0:
            raise ValueError(f"projection radius must be positive, got {self.r}")
        if self.I < 1:
            raise ValueError(f"sync period I must be >= 1, got {self.I}")
        if self.b < 1 or self.b1 < 1:
            raise ValueError(f"batch sizes must be >= 1, got b={self.b} b1={self.b1}")
        if min(self.c_nu, self.c_omega, self.c_u) < 0:
            raise ValueError("momentum constants must be non-negative")

    def rate(self, t: int) -> float:
        return 1.0 if self.schedule is None else alpha(self.schedule, t)


@dataclass(frozen=True)
class ClientState:
    """One client's iterates and momentum buffers after step t."""

    x: DenseVector
    y: DenseVector
    u: DenseVector
    nu: DenseVector
    omega: DenseVector
    q: DenseVector
    t: int
    clamped: int = 0


def init_state(x0: DenseVector, y0: DenseVector) -> ClientState:
    p, d = len(x0), len(y0)
    z = np.zeros
    return ClientState(x=x0.copy(), y=y0.copy(), u=z(d), nu=z(p), omega=z(d), q=z(d), t=1)


def default_hyperparams(constants: ProblemConstants, M: int, b: int, I: int) -> HyperParams:
    """Step sizes and momentum constants from the measured problem constants.

    Momentum constants, the projection radius r = C_f / mu and the warmup
    batch b1 = I * b follow the convergence analysis exactly. The published
    step-size bounds also carry an unspecified universal constant and a
    mu*gamma/kappa coupling that, taken literally, make progress per step
    vanish on desk-scale problems; the rates here keep every
    constant-free stability bound (halved for margin) and drop only those
    two, which preserves convergence in practice. The schedule starts at
    alpha_1 = 0.5 * min(1, 1/sqrt(max c)) so every momentum weight
    1 - c * alpha^2 starts in (0, 1).
    """
    mu, L = constants.mu, constants.L
    bM = b * M
    c_nu = 64.0 / (9.0 * bM) + 2.0 / (3.0 * bM * bM)
    c_om = 48.0**2 / (bM * mu * mu) + 2.0 / (3.0 * bM * bM)
    c_u = c_om
    L_tilde = L
    L_up = constants.L_upper if constants.L_upper is not None else L * constants.kappa
    gamma = 0.5 * min(1.0 / (2.0 * L), 1.0, L_tilde**2 / c_nu, L_tilde**2 / c_om, L_tilde**2 / c_u)
    tau = 0.5 * min(1.0 / (2.0 * L), 0.5, L_tilde**2 / c_nu, L_tilde**2 / c_u)
    eta = 0.5 * min(1.0 / (2.0 * L_up), 1.0, L_tilde**2 / c_nu, L_tilde**2 / c_om, L_tilde**2 / c_u)
    c_max = max(c_nu, c_om, c_u)
    a1 = 0.5 * min(1.0, 1.0 / math.sqrt(c_max))
    u0 = 1000.0
    delta = a1 * (u0 + 1.0) ** (1.0 / 3.0)
    return HyperParams(
        eta=eta,
        gamma=gamma,
        tau=tau,
        r=constants.C_f / mu,
        I=I,
        b=b,
        b1=I * b,
        c_nu=c_nu,
        c_omega=c_om,
        c_u=c_u,
        schedule=Schedule(delta=delta, u0=u0),
    )


def momentum_weight(c: float, a: float) -> tuple[float, int]:
    """STORM weight 1 - c * a^2, clamped at 0 (clamp count reported)."""
    w = 1.0 - c * a * a
    if w < 0.0:
        return 0.0, 1
    return w, 0


def init_momenta(
    state: ClientState,
    problem: ClientProblem,
    hp: HyperParams,
    stream: RngStream,
    neumann: NeumannParams | None = None,
) -> ClientState:
    """Populate momentum buffers with size-b1 estimates at the initial point.

    The stream should be keyed at step 0 so the warmup batches can never
    collide with training batches (steps are 1-based).
    """
    x, y, u = state.x, state.y, state.u
    by = problem.draw(stream.with_purpose(int(Purpose.BATCH_Y)), hp.b1, "lower")
    omega = problem.grad_g_y(x, y, by)
    if neumann is not None:
        nu = neumann_hypergrad(problem, x, y, neumann, hp.b1, stream)
    else:
        nu = assemble_client_direction(problem, x, y, u, hp.b1, stream)
    if neumann is not None and not hp.local_u_update:
        q = np.zeros(problem.d)
    else:
        q = quadratic_subproblem_grad(problem, x, y, u, hp.b1, stream)
    return replace(state, nu=nu, omega=omega, q=q)


def fedbioacc_step(
    state: ClientState, problem: ClientProblem, hp: HyperParams, t: int, stream: RngStream
) -> ClientState:
    """Momentum-accelerated step on the averaged-lower formulation.

    Variables move first with the shared rate alpha_t; the three momentum
    buffers then recurse with paired old/new evaluations on one batch each.
    """
    if state.t != t:
        raise ValueError(f"state is at step {state.t}, asked to run step {t}")
    a = hp.rate(t)
    y_new = state.y - hp.gamma * a * state.omega
    x_new = state.x - hp.eta * a * state.nu
    u_new = project_ball(state.u - hp.tau * a * state.q, hp.r)

    w_om, k1 = momentum_weight(hp.c_omega, a)
    w_nu, k2 = momentum_weight(hp.c_nu, a)
    w_u, k3 = momentum_weight(hp.c_u, a)

    by = problem.draw(stream.with_purpose(int(Purpose.BATCH_Y)), hp.b, "lower")
    omega = problem.grad_g_y(x_new, y_new, by) + w_om * (state.omega - problem.grad_g_y(state.x, state.y, by))
    nu = assemble_client_direction(problem, x_new, y_new, u_new, hp.b, stream) + w_nu * (
        state.nu - assemble_client_direction(problem, state.x, state.y, state.u, hp.b, stream)
    )
    q = quadratic_subproblem_grad(problem, x_new, y_new, u_new, hp.b, stream) + w_u * (
        state.q - quadratic_subproblem_grad(problem, state.x, state.y, state.u, hp.b, stream)
    )
    return replace(
        state,
        x=x_new,
        y=y_new,
        u=u_new,
        nu=nu,
        omega=omega,
        q=q,
        t=t + 1,
        clamped=state.clamped + k1 + k2 + k3,
    )


def fedbio_step(
    state: ClientState, problem: ClientProblem, hp: HyperParams, t: int, stream: RngStream
) -> ClientState:
    """Plain stochastic step on the averaged-lower formulation.

    Directions are fresh every step. The u update applies one projected
    gradient step of the auxiliary quadratic problem at the current point.
    """
    if state.t != t:
        raise ValueError(f"state is at step {state.t}, asked to run step {t}")
    by = problem.draw(stream.with_purpose(int(Purpose.BATCH_Y)), hp.b, "lower")
    omega = problem.grad_g_y(state.x, state.y, by)
    nu = assemble_client_direction(problem, state.x, state.y, state.u, hp.b, stream)
    y_new = state.y - hp.gamma * omega
    x_new = state.x - hp.eta * nu

    bg2 = problem.draw(stream.with_purpose(int(Purpose.BATCH_G2)), hp.b, "lower")
    bf2 = problem.draw(stream.with_purpose(int(Purpose.BATCH_F2)), hp.b, "upper")
    hvp_u = problem.hvp_gyy(state.x, state.y, state.u, bg2)
    gf = problem.grad_f_y(state.x, state.y, bf2)
    u_new = project_ball(hp.tau * gf + state.u - hp.tau * hvp_u, hp.r)
    return replace(state, x=x_new, y=y_new, u=u_new, nu=nu, omega=omega, q=hvp_u - gf, t=t + 1)


def fedbio_locallower_step(
    state: ClientState,
    problem: ClientProblem,
    hp: HyperParams,
    neumann: NeumannParams,
    t: int,
    stream: RngStream,
) -> ClientState:
    """Plain step on the per-client-lower formulation (Neumann direction)."""
    if state.t != t:
        raise ValueError(f"state is at step {state.t}, asked to run step {t}")
    by = problem.draw(stream.with_purpose(int(Purpose.BATCH_Y)), hp.b, "lower")
    omega = problem.grad_g_y(state.x, state.y, by)
    nu = neumann_hypergrad(problem, state.x, state.y, neumann, hp.b, stream)
    return replace(
        state,
        x=state.x - hp.eta * nu,
        y=state.y - hp.gamma * omega,
        nu=nu,
        omega=omega,
        t=t + 1,
    )


def local_acc_phase_a(
    state: ClientState, hp: HyperParams, t: int
) -> tuple[DenseVector, DenseVector, DenseVector]:
    """Variable updates of the accelerated local-lower step.

    Returns (x, y, u) after the move; momenta are refreshed in phase b once
    the federation layer has (possibly) averaged x.
    """
    if state.t != t:
        raise ValueError(f"state is at step {state.t}, asked to run step {t}")
    a = hp.rate(t)
    y_new = state.y - hp.gamma * a * state.omega
    x_new = state.x - hp.eta * a * state.nu
    u_new = state.u - hp.tau * a * state.q if hp.local_u_update else state.u
    return x_new, y_new, u_new


def local_acc_phase_b(
    state: ClientState,
    problem: ClientProblem,
    hp: HyperParams,
    neumann: NeumannParams,
    t: int,
    stream: RngStream,
    x_next: DenseVector,
    y_next: DenseVector,
    u_next: DenseVector,
) -> ClientState:
    """Momentum recursion at the post-communication point (x_next, y_next)."""
    a = hp.rate(t)
    w_om, k1 = momentum_weight(hp.c_omega, a)
    w_nu, k2 = momentum_weight(hp.c_nu, a)
    by = problem.draw(stream.with_purpose(int(Purpose.BATCH_Y)), hp.b, "lower")
    omega = problem.grad_g_y(x_next, y_next, by) + w_om * (
        state.omega - problem.grad_g_y(state.x, state.y, by)
    )
    nu = neumann_hypergrad(problem, x_next, y_next, neumann, hp.b, stream) + w_nu * (
        state.nu - neumann_hypergrad(problem, state.x, state.y, neumann, hp.b, stream)
    )
    clamped = state.clamped + k1 + k2
    q = state.q
    if hp.local_u_update:
        w_u, k3 = momentum_weight(hp.c_u, a)
        q = quadratic_subproblem_grad(problem, x_next, y_next, u_next, hp.b, stream) + w_u * (
            state.q - quadratic_subproblem_grad(problem, state.x, state.y, state.u, hp.b, stream)
        )
        clamped += k3
    return ClientState(
        x=np.asarray(x_next),
        y=np.asarray(y_next),
        u=np.asarray(u_next),
        nu=nu,
        omega=omega,
        q=q,
        t=t + 1,
        clamped=clamped,
    )


def fedbioacc_locallower_step(
    state: ClientState,
    problem: ClientProblem,
    hp: HyperParams,
    neumann: NeumannParams,
    t: int,
    stream: RngStream,
) -> ClientState:
    """Accelerated local-lower step without communication (both phases)."""
    x_next, y_next, u_next = local_acc_phase_a(state, hp, t)
    return local_acc_phase_b(state, problem, hp, neumann, t, stream, x_next, y_next, u_next)


def fedavg_step(
    state: ClientState, problem: ClientProblem, hp: HyperParams, t: int, stream: RngStream
) -> ClientState:
    """Single-level baseline: descend the lower objective at fixed x."""
    if state.t != t:
        raise ValueError(f"state is at step {state.t}, asked to run step {t}")
    by = problem.draw(stream.with_purpose(int(Purpose.BATCH_Y)), hp.b, "lower")
    omega = problem.grad_g_y(state.x, state.y, by)
    return replace(state, y=state.y - hp.gamma * omega, omega=omega, t=t + 1)
