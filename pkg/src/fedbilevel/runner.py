"""Experiment runner: build problem + clients, loop rounds, emit the trace.

The trace is a list of :class:`MetricsRow`; every row is measured with exact
full-batch oracles at the post-round consensus point (training noise never
leaks into the metrics). CSV serialization writes the fixed column set

    round,iter,alpha,grad_norm_sq,lower_gap,u_gap,val_error,comm_scalars,
    samples_per_client,wall_ms

with empty cells for metrics a configuration does not define, UTF-8, LF line
endings, written atomically (temp file + rename). wall_ms stays empty unless
timings are requested, keeping default output byte-stable across machines.
"""

from __future__ import annotations

import os
import tempfile
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .algorithms import (
    AlgoKind,
    ClientState,
    HyperParams,
    Schedule,
    default_hyperparams,
    init_momenta,
    init_state,
)
from .federation import Client, FederationConfig, ServerState, run_round, synced_fields
from .hypergrad import NeumannParams, solve_lower
from .numerics import RngStream
from .problems import (
    CountingProblem,
    make_data_cleaning,
    make_hyperrep,
    make_quadratic,
)

__all__ = [
    "ExperimentSpec",
    "MetricsRow",
    "RunResult",
    "CSV_HEADER",
    "make_family",
    "run_experiment",
    "write_trace",
    "complexity_counters",
]

CSV_HEADER = "round,iter,alpha,grad_norm_sq,lower_gap,u_gap,val_error,comm_scalars,samples_per_client,wall_ms"

_FAMILY_MAKERS = {
    "quadratic": make_quadratic,
    "data_cleaning": make_data_cleaning,
    "hyper_rep": make_hyperrep,
}


@dataclass(frozen=True)
class ExperimentSpec:
    """Everything needed to reproduce one run."""

    family: str
    problem: dict
    algo: AlgoKind
    M: int
    I: int
    rounds: int
    clients_per_round: int
    seed: int
    b: int = 16
    overrides: dict = field(default_factory=dict)
    neumann_q: int = 10
    neumann_tau: float | None = None
    average_momenta: bool = True
    eval_every: int = 1
    threads: int = 1
    timings: bool = False

    def __post_init__(self) -> None:
        if self.family not in _FAMILY_MAKERS:
            raise ValueError(
                f"unknown family {self.family!r}; valid: {', '.join(sorted(_FAMILY_MAKERS))}"
            )
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.b < 1:
            raise ValueError(f"batch size must be >= 1, got {self.b}")


@dataclass(frozen=True)
class MetricsRow:
    round: int
    iter: int
    alpha: float
    grad_norm_sq: float
    lower_gap: float | None
    u_gap: float | None
    val_error: float | None
    comm_scalars: int
    samples_per_client: int
    wall_ms: float | None
    oracle_counts: dict = field(default_factory=dict, compare=False)


@dataclass(eq=False)
class RunResult:
    rows: list
    family: object
    server: ServerState
    clients: list
    hp: HyperParams


def make_family(spec: ExperimentSpec):
    kwargs = dict(spec.problem)
    kwargs.setdefault("seed", spec.seed)
    kwargs.setdefault("M", spec.M)
    maker = _FAMILY_MAKERS[spec.family]
    return maker(**kwargs)


def _build_hyperparams(spec: ExperimentSpec, constants) -> HyperParams:
    hp = default_hyperparams(constants, spec.M, spec.b, spec.I)
    overrides = dict(spec.overrides)
    sched_changes = {}
    for key in ("delta", "u0"):
        if key in overrides:
            sched_changes[key] = float(overrides.pop(key))
    if sched_changes:
        base = hp.schedule if hp.schedule is not None else Schedule(delta=1.0, u0=0.0)
        hp = replace(hp, schedule=replace(base, **sched_changes))
    if overrides:
        valid = set(HyperParams.__dataclass_fields__)
        unknown = sorted(set(overrides) - valid)
        if unknown:
            raise ValueError(f"unknown hyperparameter override(s): {', '.join(unknown)}")
        hp = replace(hp, **overrides)
    if spec.algo in (AlgoKind.FEDBIO, AlgoKind.FEDBIO_LOCAL, AlgoKind.FEDAVG):
        hp = replace(hp, schedule=None)
    if spec.algo.local_lower:
        tau_n = spec.neumann_tau if spec.neumann_tau is not None else 0.5 / constants.L
        params = NeumannParams(tau=tau_n, Q=spec.neumann_q)
        params.validate_against(constants.L)
        hp = replace(hp, neumann=params)
    return hp


def _check_scope(spec: ExperimentSpec, family) -> None:
    if spec.algo.local_lower and "local" not in family.supports:
        raise ValueError(f"{spec.algo.value} needs per-client lower problems; {family.name} has a shared one")
    if spec.algo in (AlgoKind.FEDBIO, AlgoKind.FEDBIOACC) and "global" not in family.supports:
        raise ValueError(f"{spec.algo.value} needs the averaged lower problem; {family.name} is per-client")


def make_eval_oracle(family, clients: list[Client], algo: AlgoKind):
    """Exact full-batch metrics at the consensus point, family-specific.

    Uses the family's closed forms when they exist and dense reference solves
    otherwise; the raw (uncounted) problems are used so evaluation never
    shows up in the complexity counters.
    """
    raw = family.clients
    track_u = algo in (AlgoKind.FEDBIO, AlgoKind.FEDBIOACC)
    local = algo.local_lower
    warm: dict = {}

    def oracle(server: ServerState) -> dict:
        x = clients[0].state.x
        out: dict = {"val_error": None, "u_gap": None}
        if family.name == "quadratic":
            if local:
                out["grad_norm_sq"] = float(np.sum(family.grad_h_local(x) ** 2))
                out["lower_gap"] = float(
                    np.mean(
                        [
                            np.sum((c.state.y - family.lower_solution_local(m, x)) ** 2)
                            for m, c in enumerate(clients)
                        ]
                    )
                )
            else:
                out["grad_norm_sq"] = float(np.sum(family.grad_h(x) ** 2))
                out["lower_gap"] = float(np.sum((clients[0].state.y - family.lower_solution(x)) ** 2))
                if track_u:
                    out["u_gap"] = float(np.sum((clients[0].state.u - family.u_star(x)) ** 2))
        elif family.name == "data_cleaning":
            y_star = solve_lower(raw, x, y0=warm.get("y"))
            warm["y"] = y_star
            d = len(y_star)
            H = np.zeros((d, d))
            eye = np.eye(d)
            for j in range(d):
                H[:, j] = np.mean([c.hvp_gyy(x, y_star, eye[j]) for c in raw], axis=0)
            rhs = np.mean([c.grad_f_y(x, y_star) for c in raw], axis=0)
            u_star = np.linalg.solve(H, rhs)
            grad = np.mean([c.grad_f_x(x, y_star) - c.jvp_gxy(x, y_star, u_star) for c in raw], axis=0)
            out["grad_norm_sq"] = float(np.sum(grad**2))
            out["lower_gap"] = float(np.sum((clients[0].state.y - y_star) ** 2))
            if track_u:
                out["u_gap"] = float(np.sum((clients[0].state.u - u_star) ** 2))
            out["val_error"] = family.val_error(clients[0].state.y)
        else:  # hyper_rep
            out["grad_norm_sq"] = float(np.sum(family.grad_h_local(x) ** 2))
            out["lower_gap"] = float(
                np.mean(
                    [
                        np.sum((c.state.y - rc.lower_solution(x)) ** 2)
                        for c, rc in zip(clients, raw)
                    ]
                )
            )
            out["val_error"] = family.val_error(x, [c.state.y for c in clients])
        return out

    return oracle


def run_experiment(spec: ExperimentSpec, family=None) -> RunResult:
    """Run the configured experiment and return the trace with handles."""
    if family is None:
        family = make_family(spec)
    _check_scope(spec, family)
    hp = _build_hyperparams(spec, family.constants)
    cfg = FederationConfig(
        M=spec.M,
        I=spec.I,
        rounds=spec.rounds,
        clients_per_round=spec.clients_per_round,
        seed=spec.seed,
        algo=spec.algo,
        average_momenta=spec.average_momenta,
        threads=spec.threads,
    )
    if len(family.clients) != spec.M:
        raise ValueError(f"family has {len(family.clients)} clients, federation expects {spec.M}")

    x0, y0 = family.init_x(), family.init_y()
    clients = []
    for m, problem in enumerate(family.clients):
        counted = CountingProblem(problem)
        state = init_state(x0, y0)
        if spec.algo.accelerated:
            stream = RngStream(spec.seed, client=problem.client_id, step=0, purpose=0)
            neumann = hp.neumann if spec.algo.local_lower else None
            state = init_momenta(state, counted, hp, stream, neumann)
        clients.append(Client(problem=counted, state=state))

    server = ServerState(config=cfg)
    oracle = make_eval_oracle(family, clients, spec.algo)
    rows: list[MetricsRow] = []
    start = time.perf_counter()

    def snapshot() -> MetricsRow:
        metrics = oracle(server)
        counts: dict[str, int] = {}
        for c in clients:
            for k, v in c.problem.counts.items():
                counts[k] = counts.get(k, 0) + v
        t_eval = max(1, server.round_idx * cfg.I)
        wall = (time.perf_counter() - start) * 1000.0 if spec.timings else None
        return MetricsRow(
            round=server.round_idx,
            iter=server.round_idx * cfg.I,
            alpha=float(hp.rate(t_eval)),
            grad_norm_sq=metrics["grad_norm_sq"],
            lower_gap=metrics.get("lower_gap"),
            u_gap=metrics.get("u_gap"),
            val_error=metrics.get("val_error"),
            comm_scalars=server.comm_scalars,
            samples_per_client=int(np.mean([c.problem.samples for c in clients])),
            wall_ms=wall,
            oracle_counts=counts,
        )

    rows.append(snapshot())
    for r in range(cfg.rounds):
        run_round(server, clients, hp, r)
        if (r + 1) % spec.eval_every == 0 or r == cfg.rounds - 1:
            rows.append(snapshot())
    return RunResult(rows=rows, family=family, server=server, clients=clients, hp=hp)


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def write_trace(rows: list[MetricsRow], path: str) -> None:
    """Write the trace CSV atomically (UTF-8, LF, fixed header)."""
    lines = [CSV_HEADER]
    for row in rows:
        lines.append(
            ",".join(
                _cell(v)
                for v in (
                    row.round,
                    row.iter,
                    row.alpha,
                    row.grad_norm_sq,
                    row.lower_gap,
                    row.u_gap,
                    row.val_error,
                    row.comm_scalars,
                    row.samples_per_client,
                    row.wall_ms,
                )
            )
        )
    payload = "\n".join(lines) + "\n"
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".csv.tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def complexity_counters(trace: list[MetricsRow], targets=(1e-2, 1e-4, 1e-6, 1e-8)) -> dict:
    """Totals and rounds-to-threshold summaries from a finished trace."""
    if not trace:
        raise ValueError("empty trace")
    last = trace[-1]
    rounds_to = {}
    for eps in targets:
        hit = next((row.round for row in trace if row.grad_norm_sq <= eps), None)
        rounds_to[eps] = hit
    return {
        "oracles": dict(last.oracle_counts),
        "samples_per_client": last.samples_per_client,
        "comm_scalars": last.comm_scalars,
        "rounds_to": rounds_to,
    }
