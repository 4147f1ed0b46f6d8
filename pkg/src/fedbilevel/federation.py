"""Round orchestration: client sampling, local phases, averaging, broadcast.

One round = I local steps on every sampled client, then synchronization of
the algorithm's synced vector set (averaged over the sampled clients in
ascending client order, broadcast to all M clients). Non-sampled clients are
overwritten by the broadcast for the synced vectors and keep their private
ones; every client leaves the round at the same global step counter.

Synced sets per algorithm:

* fedbioacc: x, y, u and (unless momentum averaging is disabled) nu,
  omega, q
* fedbio: x, y, u
* fedbio_local: x only (y and the momenta are private)
* fedbioacc_local: x and nu; the momentum refresh happens at the averaged
  x inside the final step of the round, so that step runs in two phases
  around the x-average
* fedavg: y only

Client phases may run on a thread pool; results are reduced in client-id
order with pairwise-summation means, so the trace does not depend on the
thread count.

Communication accounting charges (S + M) scalars per synced component per
round: S uploads and M broadcast downloads.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

from .algorithms import (
    AlgoKind,
    ClientState,
    HyperParams,
    fedavg_step,
    fedbio_locallower_step,
    fedbio_step,
    fedbioacc_locallower_step,
    fedbioacc_step,
    local_acc_phase_a,
    local_acc_phase_b,
)
from .numerics import Purpose, RngStream, pairwise_mean
from .problems.base import ClientProblem

__all__ = [
    "FederationConfig",
    "Client",
    "ServerState",
    "sample_clients",
    "synced_fields",
    "run_round",
    "evaluate",
]


@dataclass(frozen=True)
class FederationConfig:
    M: int
    I: int
    rounds: int
    clients_per_round: int
    seed: int
    algo: AlgoKind
    average_momenta: bool = True
    threads: int = 1

    def __post_init__(self) -> None:
        if self.M < 1:
            raise ValueError(f"M must be >= 1, got {self.M}")
        if self.I < 1:
            raise ValueError(f"I must be >= 1, got {self.I}")
        if self.rounds < 0:
            raise ValueError(f"rounds must be >= 0, got {self.rounds}")
        if not (1 <= self.clients_per_round <= self.M):
            raise ValueError(
                f"clients_per_round must be in [1, {self.M}], got {self.clients_per_round}"
            )
        if self.threads < 1:
            raise ValueError(f"threads must be >= 1, got {self.threads}")


@dataclass(eq=False)
class Client:
    problem: ClientProblem
    state: ClientState


@dataclass(eq=False)
class ServerState:
    config: FederationConfig
    round_idx: int = 0
    comm_scalars: int = 0
    clamp_total: int = 0


def sample_clients(config: FederationConfig, round_idx: int, stream: RngStream) -> list[int]:
    """Uniform sample without replacement, returned in ascending id order."""
    gen = stream.generator()
    ids = gen.permutation(config.M)[: config.clients_per_round]
    return sorted(int(i) for i in ids)


def synced_fields(algo: AlgoKind, average_momenta: bool) -> tuple[str, ...]:
    if algo == AlgoKind.FEDBIOACC:
        if average_momenta:
            return ("x", "y", "u", "nu", "omega", "q")
        return ("x", "y", "u")
    if algo == AlgoKind.FEDBIO:
        return ("x", "y", "u")
    if algo == AlgoKind.FEDBIO_LOCAL:
        return ("x",)
    if algo == AlgoKind.FEDBIOACC_LOCAL:
        return ("x", "nu")
    return ("y",)


def _client_stream(seed: int, client_id: int, t: int) -> RngStream:
    return RngStream(seed, client=client_id, step=t, purpose=0)


def _map_clients(fn, ids: list[int], threads: int):
    if threads <= 1 or len(ids) <= 1:
        return [fn(m) for m in ids]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, ids))


def run_round(server: ServerState, clients: list[Client], hp: HyperParams, round_idx: int) -> None:
    """Execute one communication round in place."""
    cfg = server.config
    algo = cfg.algo
    sampled = sample_clients(
        cfg, round_idx, RngStream(cfg.seed, client=0, step=round_idx, purpose=int(Purpose.CLIENT_SAMPLING))
    )
    t0 = round_idx * cfg.I + 1
    t_end = t0 + cfg.I
    if algo.local_lower and hp.neumann is None:
        raise ValueError(f"{algo.value} needs Neumann parameters")

    if algo == AlgoKind.FEDBIOACC_LOCAL:
        new_states = _round_local_acc(cfg, clients, hp, sampled, t0)
    else:
        step = {
            AlgoKind.FEDBIOACC: fedbioacc_step,
            AlgoKind.FEDBIO: fedbio_step,
            AlgoKind.FEDAVG: fedavg_step,
        }.get(algo)

        def work(m: int) -> ClientState:
            st = clients[m].state
            problem = clients[m].problem
            for t in range(t0, t_end):
                stream = _client_stream(cfg.seed, problem.client_id, t)
                if algo == AlgoKind.FEDBIO_LOCAL:
                    st = fedbio_locallower_step(st, problem, hp, hp.neumann, t, stream)
                else:
                    st = step(st, problem, hp, t, stream)
            return st

        new_states = dict(zip(sampled, _map_clients(work, sampled, cfg.threads)))

    fields = synced_fields(algo, cfg.average_momenta)
    averages = {
        name: pairwise_mean([getattr(new_states[m], name) for m in sampled]) for name in fields
    }
    server.clamp_total += sum(new_states[m].clamped for m in sampled)

    for m, client in enumerate(clients):
        base = new_states.get(m, client.state)
        client.state = replace(base, t=t_end, clamped=0, **averages)

    components = sum(
        len(getattr(clients[0].state, name)) for name in fields
    )
    server.comm_scalars += (len(sampled) + cfg.M) * components
    server.round_idx = round_idx + 1


def _round_local_acc(
    cfg: FederationConfig,
    clients: list[Client],
    hp: HyperParams,
    sampled: list[int],
    t0: int,
) -> dict[int, ClientState]:
    """Accelerated local-lower round: x is averaged inside the final step."""
    t_last = t0 + cfg.I - 1

    def leading(m: int) -> ClientState:
        st = clients[m].state
        for t in range(t0, t_last):
            st = fedbioacc_locallower_step(
                st, clients[m].problem, hp, hp.neumann, t,
                _client_stream(cfg.seed, clients[m].problem.client_id, t),
            )
        return st

    states = dict(zip(sampled, _map_clients(leading, sampled, cfg.threads)))

    moved = {m: local_acc_phase_a(states[m], hp, t_last) for m in sampled}
    x_avg = pairwise_mean([moved[m][0] for m in sampled])

    def finishing(m: int) -> ClientState:
        _, y_next, u_next = moved[m]
        return local_acc_phase_b(
            states[m],
            clients[m].problem,
            hp,
            hp.neumann,
            t_last,
            _client_stream(cfg.seed, clients[m].problem.client_id, t_last),
            x_avg,
            y_next,
            u_next,
        )

    return dict(zip(sampled, _map_clients(finishing, sampled, cfg.threads)))


def evaluate(server: ServerState, eval_oracle) -> dict:
    """Apply the family's exact evaluation oracle and stamp server counters."""
    metrics = dict(eval_oracle(server))
    metrics["comm_scalars"] = server.comm_scalars
    metrics["round"] = server.round_idx
    return metrics
