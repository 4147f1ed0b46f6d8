"""Deterministic federation simulator for stochastic bilevel optimization.

The package splits into problem oracles (:mod:`fedbilevel.problems`),
hypergradient machinery (:mod:`fedbilevel.hypergrad`), per-client step
kernels (:mod:`fedbilevel.algorithms`), the round loop
(:mod:`fedbilevel.federation`), and experiment orchestration
(:mod:`fedbilevel.runner`, :mod:`fedbilevel.cli`).
"""

from .algorithms import AlgoKind, ClientState, HyperParams, Schedule, default_hyperparams
from .federation import FederationConfig
from .hypergrad import NeumannParams, bias_bound, neumann_hypergrad, reference_hypergrad
from .kernels import BACKEND
from .numerics import Purpose, RngStream
from .problems import (
    Batch,
    ClientProblem,
    ProblemConstants,
    load_family,
    make_data_cleaning,
    make_hyperrep,
    make_quadratic,
    save_family,
)
from .runner import (
    CSV_HEADER,
    ExperimentSpec,
    MetricsRow,
    complexity_counters,
    run_experiment,
    write_trace,
)

__version__ = "0.1.0"

__all__ = [
    "AlgoKind",
    "BACKEND",
    "Batch",
    "CSV_HEADER",
    "ClientProblem",
    "ClientState",
    "ExperimentSpec",
    "FederationConfig",
    "HyperParams",
    "MetricsRow",
    "NeumannParams",
    "ProblemConstants",
    "Purpose",
    "RngStream",
    "Schedule",
    "__version__",
    "bias_bound",
    "complexity_counters",
    "default_hyperparams",
    "load_family",
    "make_data_cleaning",
    "make_hyperrep",
    "make_quadratic",
    "neumann_hypergrad",
    "reference_hypergrad",
    "run_experiment",
    "save_family",
    "write_trace",
]
