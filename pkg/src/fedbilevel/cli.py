"""Command-line entry point: run experiments, verify oracles, sweep grids.

Config files are TOML with four sections:

    [problem]     family = "quadratic" | "data_cleaning" | "hyper_rep"
                  plus that family's generator arguments
    [algo]        kind = "fedbioacc" | "fedbio" | "fedbioacc_local"
                       | "fedbio_local" | "fedavg"
                  plus optional hyperparameter overrides
    [federation]  m, i, rounds, clients_per_round, seed, threads
    [run]         eval_every, out, timings

Unknown keys anywhere are hard errors (exit 2, message names the key).
Exit codes: 0 success, 1 failed verify check, 2 config error, 3 runtime
failure.
"""

from __future__ import annotations

import argparse
import inspect
import itertools
import os
import sys
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from .algorithms import AlgoKind, HyperParams
from .hypergrad import (
    NeumannParams,
    bias_bound,
    cg_solve,
    finite_diff_hypergrad,
    neumann_hypergrad,
    reference_hypergrad,
)
from .numerics import Purpose, RngStream
from .problems import make_quadratic
from .problems.quadratic import exact_hypergradient, exact_lower_solution
from .runner import _FAMILY_MAKERS, ExperimentSpec, run_experiment, write_trace

__all__ = [
    "CliArgs",
    "ConfigError",
    "CheckResult",
    "build_spec",
    "check_fd_agreement",
    "check_naive_bias",
    "check_neumann_bias",
    "main",
    "run_verify",
]


class ConfigError(Exception):
    """Bad config file, bad override, or bad flag value."""


@dataclass(frozen=True)
class CliArgs:
    """Parsed command line for the `run` subcommand."""

    config_path: str
    overrides: tuple = ()
    out_path: str | None = None
    verbosity: int = 0
    threads: int | None = None
    seed: int | None = None
    timings: bool = False


# Keys accepted in [algo] beyond `kind`. Everything in _HP_OVERRIDES is
# forwarded to HyperParams; the rest fill ExperimentSpec fields directly.
_HP_OVERRIDES = (
    "eta",
    "gamma",
    "tau",
    "r",
    "c_nu",
    "c_omega",
    "c_u",
    "c_eta",
    "c_gamma",
    "delta",
    "u0",
    "local_u_update",
)
_ALGO_KEYS = ("kind", "b", "neumann_q", "neumann_tau", "average_momenta") + _HP_OVERRIDES
_FEDERATION_KEYS = ("m", "i", "rounds", "clients_per_round", "seed", "threads")
_RUN_KEYS = ("eval_every", "out", "timings")
_SECTIONS = ("problem", "algo", "federation", "run")


def _parse_scalar(text: str):
    low = text.strip().lower()
    if low == "true":
        return True
    if low == "false":
        return False
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text


def _load_config(path: str) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path} does not parse: {exc}") from exc
    for section in raw:
        if section not in _SECTIONS:
            raise ConfigError(
                f"unknown section [{section}] (valid: {', '.join(_SECTIONS)})"
            )
        if not isinstance(raw[section], dict):
            raise ConfigError(f"[{section}] must be a table")
    return raw


def _apply_overrides(config: dict, assignments) -> None:
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        dotted, text = item.split("=", 1)
        if dotted.count(".") != 1:
            raise ConfigError(f"override key {dotted!r} must be section.key")
        section, key = dotted.split(".")
        if section not in _SECTIONS:
            raise ConfigError(
                f"unknown section {section!r} in override {dotted!r} (valid: {', '.join(_SECTIONS)})"
            )
        config.setdefault(section, {})[key] = _parse_scalar(text)


def _family_keys(family: str) -> tuple:
    maker = _FAMILY_MAKERS[family]
    params = inspect.signature(maker).parameters
    return tuple(k for k in params if k not in ("seed", "M"))


def _check_keys(section: str, table: dict, allowed) -> None:
    for key in table:
        if key not in allowed:
            raise ConfigError(
                f"unknown key {section}.{key} (valid: {', '.join(sorted(allowed))})"
            )


def _check_numeric(section: str, table: dict, keys) -> None:
    for key in keys:
        value = table.get(key)
        if value is not None and (isinstance(value, bool) or not isinstance(value, (int, float))):
            raise ConfigError(f"{section}.{key} must be a number, got {value!r}")


def _check_bool(section: str, table: dict, keys) -> None:
    for key in keys:
        value = table.get(key)
        if value is not None and not isinstance(value, bool):
            raise ConfigError(f"{section}.{key} must be true or false, got {value!r}")


def _require(table: dict, section: str, key: str):
    if key not in table:
        raise ConfigError(f"missing required key {section}.{key}")
    return table[key]


def build_spec(config: dict, args: CliArgs) -> ExperimentSpec:
    """Validate the merged config and assemble an ExperimentSpec."""
    problem = dict(config.get("problem", {}))
    algo = dict(config.get("algo", {}))
    fed = {k.lower(): v for k, v in config.get("federation", {}).items()}
    run = dict(config.get("run", {}))

    family = _require(problem, "problem", "family")
    if family not in _FAMILY_MAKERS:
        raise ConfigError(
            f"unknown problem.family {family!r} (valid: {', '.join(sorted(_FAMILY_MAKERS))})"
        )
    del problem["family"]
    for reserved, owner in (("seed", "federation.seed"), ("m", "federation.m"), ("M", "federation.m")):
        if reserved in problem:
            raise ConfigError(f"problem.{reserved} is set by {owner}")
    _check_keys("problem", problem, _family_keys(family))

    kind = _require(algo, "algo", "kind")
    try:
        algo_kind = AlgoKind.from_str(str(kind))
    except ValueError as exc:
        raise ConfigError(f"algo.kind: {exc}") from exc
    del algo["kind"]
    _check_keys("algo", algo, _ALGO_KEYS)

    _check_keys("federation", fed, _FEDERATION_KEYS)
    _check_keys("run", run, _RUN_KEYS)

    _check_numeric("problem", problem, tuple(problem))
    _check_numeric("algo", algo, tuple(k for k in algo if k != "average_momenta"))
    _check_bool("algo", algo, ("average_momenta",))
    _check_numeric("federation", fed, tuple(fed))
    _check_numeric("run", run, ("eval_every",))
    _check_bool("run", run, ("timings",))

    m = int(_require(fed, "federation", "m"))
    i = int(_require(fed, "federation", "i"))
    rounds = int(_require(fed, "federation", "rounds"))
    s = int(fed.get("clients_per_round", m))
    seed = args.seed if args.seed is not None else int(fed.get("seed", 0))
    threads = args.threads if args.threads is not None else int(fed.get("threads", 1))
    if m < 1:
        raise ConfigError(f"federation.m must be >= 1, got {m}")
    if i < 1:
        raise ConfigError(f"federation.i must be >= 1, got {i}")
    if rounds < 0:
        raise ConfigError(f"federation.rounds must be >= 0, got {rounds}")
    if not 1 <= s <= m:
        raise ConfigError(f"federation.clients_per_round must be in [1, {m}], got {s}")
    if threads < 1:
        raise ConfigError(f"--threads / federation.threads must be >= 1, got {threads}")
    overrides = {k: algo[k] for k in _HP_OVERRIDES if k in algo}
    try:
        return ExperimentSpec(
            family=family,
            problem=problem,
            algo=algo_kind,
            M=m,
            I=i,
            rounds=rounds,
            clients_per_round=s,
            seed=seed,
            b=int(algo.get("b", 16)),
            overrides=overrides,
            neumann_q=int(algo.get("neumann_q", 10)),
            neumann_tau=algo.get("neumann_tau"),
            average_momenta=bool(algo.get("average_momenta", True)),
            eval_every=int(run.get("eval_every", 1)),
            threads=threads,
            timings=bool(args.timings or run.get("timings", False)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _out_path(config: dict, args: CliArgs) -> str:
    if args.out_path:
        return args.out_path
    return str(config.get("run", {}).get("out", "trace.csv"))


def _cmd_run(ns) -> int:
    args = CliArgs(
        config_path=ns.config,
        overrides=tuple(ns.set or ()),
        out_path=ns.out,
        verbosity=ns.verbose,
        threads=ns.threads,
        seed=ns.seed,
        timings=ns.timings,
    )
    config = _load_config(args.config_path)
    _apply_overrides(config, args.overrides)
    spec = build_spec(config, args)
    out = _out_path(config, args)
    if args.verbosity:
        print(
            f"{spec.algo.value} on {spec.family}: M={spec.M} I={spec.I} "
            f"rounds={spec.rounds} S={spec.clients_per_round} seed={spec.seed}",
            file=sys.stderr,
        )
    result = run_experiment(spec)
    write_trace(result.rows, out)
    last = result.rows[-1]
    print(f"wrote {out} ({len(result.rows)} rows, final grad_norm_sq={last.grad_norm_sq:.6e})")
    return 0


def _cmd_sweep(ns) -> int:
    if not ns.param:
        raise ConfigError("sweep needs at least one --param section.key=v1,v2,...")
    grid = []
    for item in ns.param:
        if "=" not in item:
            raise ConfigError(f"--param {item!r} is not of the form section.key=v1,v2")
        dotted, csv = item.split("=", 1)
        values = [v for v in csv.split(",") if v != ""]
        if not values:
            raise ConfigError(f"--param {dotted} lists no values")
        grid.append((dotted, values))

    os.makedirs(ns.out_dir, exist_ok=True)
    written = []
    for combo in itertools.product(*(vals for _, vals in grid)):
        assignments = [f"{dotted}={val}" for (dotted, _), val in zip(grid, combo)]
        args = CliArgs(
            config_path=ns.config,
            overrides=tuple(ns.set or ()) + tuple(assignments),
            out_path=None,
            verbosity=ns.verbose,
            threads=ns.threads,
            seed=ns.seed,
            timings=False,
        )
        config = _load_config(args.config_path)
        _apply_overrides(config, args.overrides)
        spec = build_spec(config, args)
        tag = "__".join(a.replace(".", "-") for a in assignments)
        out = os.path.join(ns.out_dir, f"{tag}.csv")
        result = run_experiment(spec)
        write_trace(result.rows, out)
        written.append(out)
        if ns.verbose:
            print(f"done {tag}", file=sys.stderr)
    print(f"wrote {len(written)} traces under {ns.out_dir}")
    return 0


@dataclass(frozen=True)
class CheckResult:
    """One verify-table row: measured value against its bound."""

    name: str
    measured: float
    bound: float
    op: str
    passed: bool = field(init=False)

    def __post_init__(self) -> None:
        ok = self.measured <= self.bound if self.op == "<=" else self.measured >= self.bound
        object.__setattr__(self, "passed", bool(ok))


def _probe_point(family, seed: int = 2):
    stream = RngStream(seed=seed, client=0, step=0, purpose=int(Purpose.PROBE))
    x = 0.5 * stream.normal(family.clients[0].p)
    return x


def verify_family(seed: int = 11):
    return make_quadratic(seed=seed, M=4, p=6, d=8, sigma=0.0, zeta=0.6, mu=2.0, L=20.0)


def check_fd_agreement(family=None) -> list[CheckResult]:
    """Oracle-assembled hypergradient vs closed form and finite differences."""
    fam = family if family is not None else verify_family()
    x = _probe_point(fam)
    exact = exact_hypergradient(fam.clients, x)
    assembled = reference_hypergrad(fam.clients, x, scope="global")
    fd = finite_diff_hypergrad(fam, x)
    scale = float(np.linalg.norm(exact))
    return [
        CheckResult(
            "hypergrad: oracle assembly vs closed form",
            float(np.linalg.norm(assembled - exact)) / scale,
            1e-10,
            "<=",
        ),
        CheckResult(
            "hypergrad: oracle assembly vs finite differences",
            float(np.linalg.norm(assembled - fd)) / scale,
            1e-5,
            "<=",
        ),
    ]


def check_neumann_bias(q_values=(0, 5, 10, 20), family=None) -> list[CheckResult]:
    """Measured truncation bias against the closed-form bound, per Q."""
    fam = family if family is not None else verify_family()
    consts = fam.constants
    tau = 0.1 / consts.L
    x = _probe_point(fam)
    stream = RngStream(seed=3, client=0, step=0, purpose=0)
    results = []
    biases = {}
    for q in sorted(set(int(q) for q in q_values)):
        params = NeumannParams(tau=tau, Q=q)
        worst = 0.0
        for m, problem in enumerate(fam.clients):
            y_m = fam.lower_solution_local(m, x)
            est = neumann_hypergrad(problem, x, y_m, params, None, stream)
            target = fam.client_hypergrad_local(m, x)
            worst = max(worst, float(np.linalg.norm(est - target)))
        biases[q] = worst
        g1 = bias_bound(params, consts.mu, consts.L, consts.C_f, 0.0, 1).G1
        results.append(CheckResult(f"neumann bias Q={q}", worst, g1, "<="))
    qs = sorted(biases)
    pairs = [(a, b) for a, b in zip(qs, qs[1:]) if b == a + 1]
    if len(qs) >= 2 and not pairs:
        # measure the one-step decay ratio at the largest requested Q
        q = qs[-1]
        nxt = q + 1
        params = NeumannParams(tau=tau, Q=nxt)
        worst = 0.0
        for m, problem in enumerate(fam.clients):
            y_m = fam.lower_solution_local(m, x)
            est = neumann_hypergrad(problem, x, y_m, params, None, stream)
            target = fam.client_hypergrad_local(m, x)
            worst = max(worst, float(np.linalg.norm(est - target)))
        ratio = worst / biases[q]
        mode = 1.0 - tau * consts.mu
        results.append(
            CheckResult(f"neumann decay ratio Q={q}->{nxt} vs (1-tau*mu)", abs(ratio / mode - 1.0), 0.1, "<=")
        )
    return results


def check_naive_bias(family=None) -> list[CheckResult]:
    """Naive client-averaged hypergradients are biased; the shared quadratic
    subproblem removes the bias."""
    fam = family if family is not None else make_quadratic(
        seed=29, M=4, p=6, d=8, sigma=0.0, zeta=2.0, mu=1.0, L=12.0
    )
    x = _probe_point(fam, seed=5)
    y_x = exact_lower_solution(fam.clients, x)
    grad_h = exact_hypergradient(fam.clients, x)
    scale = float(np.linalg.norm(grad_h))

    naive = np.zeros_like(x)
    for problem in fam.clients:
        rhs = problem.grad_f_y(x, y_x)
        u_m, _ = cg_solve(lambda v, pr=problem: pr.hvp_gyy(x, y_x, v), rhs)
        naive += problem.grad_f_x(x, y_x) - problem.jvp_gxy(x, y_x, u_m)
    naive /= len(fam.clients)

    rhs = np.mean([pr.grad_f_y(x, y_x) for pr in fam.clients], axis=0)
    u_star, _ = cg_solve(
        lambda v: np.mean([pr.hvp_gyy(x, y_x, v) for pr in fam.clients], axis=0), rhs
    )
    shared = np.mean(
        [pr.grad_f_x(x, y_x) - pr.jvp_gxy(x, y_x, u_star) for pr in fam.clients], axis=0
    )
    return [
        CheckResult(
            "naive per-client averaging relative bias",
            float(np.linalg.norm(naive - grad_h)) / scale,
            0.1,
            ">=",
        ),
        CheckResult(
            "shared subproblem pathway relative error",
            float(np.linalg.norm(shared - grad_h)) / scale,
            1e-8,
            "<=",
        ),
    ]


def run_verify(q_values=None, out=None) -> int:
    out = out if out is not None else sys.stdout
    checks = []
    checks += check_fd_agreement()
    checks += check_neumann_bias(q_values if q_values else (0, 5, 10, 20))
    checks += check_naive_bias()
    width = max(len(c.name) for c in checks)
    for c in checks:
        status = "pass" if c.passed else "FAIL"
        print(
            f"{c.name:<{width}}  measured {c.measured:>12.5e}  {c.op} {c.bound:<12.5e}  {status}",
            file=out,
        )
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed", file=out)
    return 0 if not failed else 1


def _cmd_verify(ns) -> int:
    q_values = None
    if ns.q_sweep:
        try:
            q_values = tuple(int(v) for v in ns.q_sweep.split(",") if v != "")
        except ValueError as exc:
            raise ConfigError(f"--q-sweep expects comma-separated integers: {exc}") from exc
        if not q_values:
            raise ConfigError("--q-sweep lists no values")
    return run_verify(q_values)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedbilevel",
        description="Deterministic federated bilevel optimization simulator.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment from a config file")
    run_p.add_argument("--config", required=True, help="TOML config path")
    run_p.add_argument("--out", default=None, help="trace CSV path (default run.out)")
    run_p.add_argument(
        "--set",
        action="append",
        metavar="SECTION.KEY=VALUE",
        help="override a config value (repeatable)",
    )
    run_p.add_argument("--threads", type=int, default=None, help="client-phase workers")
    run_p.add_argument("--seed", type=int, default=None, help="override federation.seed")
    run_p.add_argument("--timings", action="store_true", help="record wall_ms in the trace")
    run_p.add_argument("-v", "--verbose", action="count", default=0)
    run_p.set_defaults(func=_cmd_run)

    verify_p = sub.add_parser("verify", help="run oracle agreement and bias-bound checks")
    verify_p.add_argument(
        "--q-sweep",
        default=None,
        metavar="Q1,Q2,...",
        help="Neumann truncation orders to table (default 0,5,10,20)",
    )
    verify_p.set_defaults(func=_cmd_verify)

    sweep_p = sub.add_parser("sweep", help="run a cartesian grid of config points")
    sweep_p.add_argument("--config", required=True, help="TOML config path")
    sweep_p.add_argument(
        "--param",
        action="append",
        metavar="SECTION.KEY=V1,V2,...",
        help="axis of the grid (repeatable)",
    )
    sweep_p.add_argument("--out-dir", default="sweep_out", help="directory for trace CSVs")
    sweep_p.add_argument(
        "--set",
        action="append",
        metavar="SECTION.KEY=VALUE",
        help="fixed override applied to every point (repeatable)",
    )
    sweep_p.add_argument("--threads", type=int, default=None)
    sweep_p.add_argument("--seed", type=int, default=None)
    sweep_p.add_argument("-v", "--verbose", action="count", default=0)
    sweep_p.set_defaults(func=_cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    ns = parser.parse_args(argv)
    try:
        return ns.func(ns)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 3
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
