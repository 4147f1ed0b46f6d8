"""Problem families: synthetic quadratics, data cleaning, hyper-representation."""

from .base import Batch, ClientProblem, ProblemConstants, draw_batch, estimate_grad_bound
from .data_cleaning import DataCleaningClient, DataCleaningFamily, make_data_cleaning
from .hyper_rep import HyperRepClient, HyperRepFamily, make_hyperrep
from .instrument import CallRecord, CountingProblem, RecordingProblem
from .quadratic import (
    QuadraticClient,
    QuadraticFamily,
    exact_hypergradient,
    exact_lower_solution,
    make_quadratic,
)
from .serialize import load_family, save_family

__all__ = [
    "Batch",
    "ClientProblem",
    "ProblemConstants",
    "draw_batch",
    "estimate_grad_bound",
    "QuadraticClient",
    "QuadraticFamily",
    "make_quadratic",
    "exact_lower_solution",
    "exact_hypergradient",
    "DataCleaningClient",
    "DataCleaningFamily",
    "make_data_cleaning",
    "HyperRepClient",
    "HyperRepFamily",
    "make_hyperrep",
    "CallRecord",
    "CountingProblem",
    "RecordingProblem",
    "load_family",
    "save_family",
]
