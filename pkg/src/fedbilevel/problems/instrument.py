"""Oracle-call instrumentation wrappers.

``CountingProblem`` tallies per-oracle call counts and cumulative sample
draws; the runner wraps every training client with it so complexity counters
come from observed calls rather than bookkeeping by hand. Evaluation bypasses
the wrappers on purpose: the trace counts training cost only.

``RecordingProblem`` additionally keeps (oracle, batch key, evaluation point)
records, which is how the tests pin down batch pairing inside momentum steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics import DenseVector
from .base import Batch, ClientProblem

__all__ = ["CountingProblem", "RecordingProblem", "CallRecord"]

_DOMAIN = {
    "grad_f_x": "upper",
    "grad_f_y": "upper",
    "grad_g_y": "lower",
    "hvp_gyy": "lower",
    "jvp_gxy": "lower",
}


@dataclass(frozen=True)
class CallRecord:
    oracle: str
    batch_id: tuple[int, int, int, int] | None
    x: np.ndarray
    y: np.ndarray
    v: np.ndarray | None


class CountingProblem(ClientProblem):
    """Pass-through wrapper counting oracle calls and samples consumed."""

    def __init__(self, inner: ClientProblem):
        self.inner = inner
        self.counts: dict[str, int] = {}
        self.samples = 0

    @property
    def p(self) -> int:
        return self.inner.p

    @property
    def d(self) -> int:
        return self.inner.d

    @property
    def client_id(self) -> int:
        return self.inner.client_id

    def __getattr__(self, name):
        return getattr(self.inner, name)

    def n_rows(self, domain: str) -> int | None:
        return self.inner.n_rows(domain)

    def _tick(self, oracle: str, batch: Batch | None) -> None:
        self.counts[oracle] = self.counts.get(oracle, 0) + 1
        if batch is not None:
            self.samples += batch.size
        else:
            self.samples += self.inner.n_rows(_DOMAIN[oracle]) or 0

    def _note(self, oracle: str, batch: Batch | None, x, y, v) -> None:
        pass

    def grad_f_x(self, x: DenseVector, y: DenseVector, batch: Batch | None = None) -> DenseVector:
        self._tick("grad_f_x", batch)
        self._note("grad_f_x", batch, x, y, None)
        return self.inner.grad_f_x(x, y, batch)

    def grad_f_y(self, x: DenseVector, y: DenseVector, batch: Batch | None = None) -> DenseVector:
        self._tick("grad_f_y", batch)
        self._note("grad_f_y", batch, x, y, None)
        return self.inner.grad_f_y(x, y, batch)

    def grad_g_y(self, x: DenseVector, y: DenseVector, batch: Batch | None = None) -> DenseVector:
        self._tick("grad_g_y", batch)
        self._note("grad_g_y", batch, x, y, None)
        return self.inner.grad_g_y(x, y, batch)

    def hvp_gyy(self, x: DenseVector, y: DenseVector, v: DenseVector, batch: Batch | None = None) -> DenseVector:
        self._tick("hvp_gyy", batch)
        self._note("hvp_gyy", batch, x, y, v)
        return self.inner.hvp_gyy(x, y, v, batch)

    def jvp_gxy(self, x: DenseVector, y: DenseVector, v: DenseVector, batch: Batch | None = None) -> DenseVector:
        self._tick("jvp_gxy", batch)
        self._note("jvp_gxy", batch, x, y, v)
        return self.inner.jvp_gxy(x, y, v, batch)

    def value_f(self, x: DenseVector, y: DenseVector) -> float:
        return self.inner.value_f(x, y)

    def value_g(self, x: DenseVector, y: DenseVector) -> float:
        return self.inner.value_g(x, y)


class RecordingProblem(CountingProblem):
    """Counting wrapper that also logs every oracle evaluation point."""

    def __init__(self, inner: ClientProblem):
        super().__init__(inner)
        self.records: list[CallRecord] = []

    def _note(self, oracle: str, batch: Batch | None, x, y, v) -> None:
        self.records.append(
            CallRecord(
                oracle=oracle,
                batch_id=None if batch is None else batch.batch_id,
                x=np.array(x, copy=True),
                y=np.array(y, copy=True),
                v=None if v is None else np.array(v, copy=True),
            )
        )
