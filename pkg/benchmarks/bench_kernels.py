#!/usr/bin/env python3
"""Benchmark the numba kernels against the numpy fallback.

Times every paired kernel on data-cleaning-shaped inputs (full sweeps and
minibatch-sized row subsets), checks that both implementations agree
numerically, and reports per-call medians plus the speedup. Optionally also
times a short end-to-end experiment under each backend in subprocesses, since
the backend is pinned at import time.

Usage:
    python benchmarks/bench_kernels.py [--repeats N] [--end-to-end]
"""

from __future__ import annotations

import argparse
import os
import statistics
import subprocess
import sys
import time

import numpy as np

from fedbilevel import kernels

# (rows, feature dim incl. bias, classes): small/medium desk scale plus one
# larger sweep where fusing the row loop actually pays.
SHAPES = [(30, 9, 5), (300, 9, 5), (3000, 17, 10)]
BATCH = 64

PAIRS = [
    ("xent_loss", kernels.xent_loss_numpy, kernels.xent_loss_numba, "loss"),
    ("xent_grad_w", kernels.xent_grad_w_numpy, kernels.xent_grad_w_numba, "grad"),
    ("xent_hvp", kernels.xent_hvp_numpy, kernels.xent_hvp_numba, "hvp"),
    ("xent_gradw_dot", kernels.xent_gradw_dot_numpy, kernels.xent_gradw_dot_numba, "dot"),
    ("argmax_errors", kernels.argmax_errors_numpy, kernels.argmax_errors_numba, "argmax"),
]


def _args_for(kind: str, rng: np.random.Generator, n: int, d: int, c: int, subset: bool):
    W = rng.normal(size=(c, d))
    Z = rng.normal(size=(n, d))
    labels = rng.integers(0, c, size=n)
    idx = np.sort(rng.permutation(n)[:BATCH]) if subset and n > BATCH else np.arange(n)
    coef = rng.uniform(0.5, 1.5, size=len(idx))
    V = rng.normal(size=(c, d))
    if kind == "loss":
        return (W, Z, labels, idx)
    if kind == "grad":
        return (W, Z, labels, idx, coef)
    if kind == "hvp":
        return (W, Z, labels, idx, coef, V)
    if kind == "dot":
        return (W, Z, labels, idx, V)
    return (W, Z, labels)


def _time(fn, args, repeats: int) -> float:
    fn(*args)  # warm-up (and JIT compile for the numba variants)
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def bench_kernels(repeats: int) -> bool:
    rng = np.random.default_rng(12345)
    print(f"backend selected at import: {kernels.BACKEND} (numba available: {kernels.HAS_NUMBA})")
    print()
    header = f"{'kernel':16s} {'rows':>5s} {'sel':>5s} {'dim':>4s} {'cls':>4s} {'numpy':>11s} {'numba':>11s} {'speedup':>8s}"
    print(header)
    print("-" * len(header))
    all_agree = True
    for name, fn_np, fn_nb, kind in PAIRS:
        for n, d, c in SHAPES:
            for subset in (False, True):
                if subset and (n <= BATCH or kind == "argmax"):
                    continue
                args = _args_for(kind, rng, n, d, c, subset)
                ref = fn_np(*args)
                if kernels.HAS_NUMBA:
                    got = fn_nb(*args)
                    agree = np.allclose(ref, got, rtol=1e-10, atol=1e-12)
                    all_agree = all_agree and agree
                t_np = _time(fn_np, args, repeats)
                t_nb = _time(fn_nb, args, repeats) if kernels.HAS_NUMBA else float("nan")
                sel = len(args[3]) if kind in ("loss", "grad", "hvp", "dot") else n
                speed = t_np / t_nb if t_nb == t_nb and t_nb > 0 else float("nan")
                print(
                    f"{name:16s} {n:5d} {sel:5d} {d:4d} {c:4d} "
                    f"{t_np * 1e6:9.1f}us {t_nb * 1e6:9.1f}us {speed:7.2f}x"
                )
    print()
    if kernels.HAS_NUMBA:
        print(f"numerical agreement across all pairs: {all_agree}")
    else:
        print("numba not installed; timed the numpy fallback only")
    return all_agree or not kernels.HAS_NUMBA


_E2E_SNIPPET = """
import time
from fedbilevel.runner import ExperimentSpec, run_experiment
from fedbilevel.algorithms import AlgoKind

spec = ExperimentSpec(
    family="data_cleaning",
    problem=dict(classes=5, samples_per_client=30, rho=0.8),
    algo=AlgoKind.FEDBIOACC,
    M=10, I=5, rounds=100, clients_per_round=10, seed=0, b=8,
    overrides=dict(delta=2.0, u0=100.0, tau=0.5, gamma=0.5, eta=0.3, r=20.0,
                   c_nu=0.2, c_omega=0.2, c_u=0.2),
    eval_every=100,
)
t0 = time.perf_counter()
res = run_experiment(spec)
print(f"{time.perf_counter() - t0:.3f}s  final val_error={res.rows[-1].val_error:.4f}")
"""


def bench_end_to_end() -> None:
    print()
    print("end-to-end: 100 rounds of the accelerated cleaning run, per backend")
    for backend in ("numpy", "numba"):
        if backend == "numba" and not kernels.HAS_NUMBA:
            print(f"  {backend:6s}: skipped (not installed)")
            continue
        env = dict(os.environ, FEDBILEVEL_BACKEND=backend)
        out = subprocess.run(
            [sys.executable, "-c", _E2E_SNIPPET], env=env, capture_output=True, text=True
        )
        line = out.stdout.strip() or out.stderr.strip().splitlines()[-1]
        print(f"  {backend:6s}: {line}")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=200, help="timing repetitions per kernel")
    ap.add_argument("--end-to-end", action="store_true", help="also time a short experiment per backend")
    args = ap.parse_args(argv)
    ok = bench_kernels(args.repeats)
    if args.end_to_end:
        bench_end_to_end()
    return 0 if ok else 1


if __name__ == "__main__":
    raise SystemExit(main())
