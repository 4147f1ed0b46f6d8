"""Label-noise data cleaning as a bilevel problem over sample weights.

The outer variable x holds one weight per training sample across all clients
(client m owns a contiguous block); the inner variable y is a flattened
softmax classifier trained on the weighted, label-corrupted training rows:

    g_m(x, y) = (1/N) sum_n x_n * xent(W; z_n, noisy label_n) + (l2/2)||W||^2
    f_m(x, y) = (1/Nv) sum over clean validation rows of xent(W; z, label)

Validation rows of client m all come from class m mod C, so no single client
can rank the weights alone. Upper gradients in x vanish; the cleaning signal
reaches x only through the mixed second-order coupling.

Feature vectors are unit-normalized and bias-augmented, which keeps the
per-row softmax curvature uniformly bounded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import kernels
from ..numerics import DenseVector, Purpose, RngStream
from .base import Batch, ClientProblem, ProblemConstants, estimate_grad_bound

__all__ = ["DataCleaningClient", "DataCleaningFamily", "make_data_cleaning"]


@dataclass(frozen=True, eq=False)
class DataCleaningClient(ClientProblem):
    client_id: int
    Z: np.ndarray
    labels: np.ndarray
    Z_val: np.ndarray
    labels_val: np.ndarray
    block_start: int
    p: int
    classes: int
    l2: float

    @property
    def d(self) -> int:
        return self.classes * self.Z.shape[1]

    @property
    def n_train(self) -> int:
        return self.Z.shape[0]

    @property
    def n_val(self) -> int:
        return self.Z_val.shape[0]

    def n_rows(self, domain: str) -> int | None:
        return self.n_train if domain == "lower" else self.n_val

    def _W(self, y: DenseVector) -> np.ndarray:
        return np.ascontiguousarray(y.reshape(self.classes, self.Z.shape[1]))

    def _x_block(self, x: DenseVector) -> DenseVector:
        return x[self.block_start : self.block_start + self.n_train]

    def _train_sel(self, x: DenseVector, batch: Batch | None):
        if batch is None:
            idx = np.arange(self.n_train, dtype=np.int64)
            coef = self._x_block(x) / self.n_train
        else:
            idx = batch.indices
            coef = self._x_block(x)[idx] / batch.size
        return idx, np.ascontiguousarray(coef)

    def _val_sel(self, batch: Batch | None):
        if batch is None:
            idx = np.arange(self.n_val, dtype=np.int64)
            coef = np.full(self.n_val, 1.0 / self.n_val)
        else:
            idx = batch.indices
            coef = np.full(batch.size, 1.0 / batch.size)
        return idx, coef

    def grad_f_x(self, x: DenseVector, y: DenseVector, batch: Batch | None = None) -> DenseVector:
        return np.zeros(self.p)

    def grad_f_y(self, x: DenseVector, y: DenseVector, batch: Batch | None = None) -> DenseVector:
        idx, coef = self._val_sel(batch)
        G = kernels.xent_grad_w(self._W(y), self.Z_val, self.labels_val, idx, coef)
        return G.ravel()

    def grad_g_y(self, x: DenseVector, y: DenseVector, batch: Batch | None = None) -> DenseVector:
        W = self._W(y)
        idx, coef = self._train_sel(x, batch)
        G = kernels.xent_grad_w(W, self.Z, self.labels, idx, coef) + self.l2 * W
        return G.ravel()

    def hvp_gyy(self, x: DenseVector, y: DenseVector, v: DenseVector, batch: Batch | None = None) -> DenseVector:
        W = self._W(y)
        V = self._W(v)
        idx, coef = self._train_sel(x, batch)
        G = kernels.xent_hvp(W, self.Z, self.labels, idx, coef, V) + self.l2 * V
        return G.ravel()

    def jvp_gxy(self, x: DenseVector, y: DenseVector, v: DenseVector, batch: Batch | None = None) -> DenseVector:
        W = self._W(y)
        V = self._W(v)
        if batch is None:
            idx = np.arange(self.n_train, dtype=np.int64)
            scale = 1.0 / self.n_train
        else:
            idx = batch.indices
            scale = 1.0 / batch.size
        dots = kernels.xent_gradw_dot(W, self.Z, self.labels, idx, V)
        out = np.zeros(self.p)
        np.add.at(out, self.block_start + idx, scale * dots)
        return out

    def value_f(self, x: DenseVector, y: DenseVector) -> float:
        idx = np.arange(self.n_val, dtype=np.int64)
        losses = kernels.xent_loss(self._W(y), self.Z_val, self.labels_val, idx)
        return float(np.mean(losses))

    def value_g(self, x: DenseVector, y: DenseVector) -> float:
        W = self._W(y)
        idx = np.arange(self.n_train, dtype=np.int64)
        losses = kernels.xent_loss(W, self.Z, self.labels, idx)
        return float(self._x_block(x) @ losses / self.n_train + 0.5 * self.l2 * np.sum(W * W))

    def val_error(self, y: DenseVector) -> float:
        errs = kernels.argmax_errors(self._W(y), self.Z_val, self.labels_val)
        return errs / self.n_val


@dataclass(frozen=True, eq=False)
class DataCleaningFamily:
    clients: list[DataCleaningClient]
    constants: ProblemConstants
    seed: int
    rho: float
    clean_mask: np.ndarray
    supports: frozenset[str] = field(default=frozenset({"global"}), init=False)
    name: str = field(default="data_cleaning", init=False)

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
        return np.ones(self.p)

    def init_y(self) -> DenseVector:
        return np.zeros(self.d)

    def val_error(self, y: DenseVector) -> float:
        return float(np.mean([c.val_error(y) for c in self.clients]))


def _normalize_rows(Z: np.ndarray) -> np.ndarray:
    norms = np.maximum(np.linalg.norm(Z, axis=1, keepdims=True), 1e-12)
    return Z / norms


def make_data_cleaning(
    seed: int,
    M: int,
    classes: int,
    samples_per_client: int,
    rho: float,
    *,
    features: int = 8,
    val_per_client: int = 24,
    l2: float = 1e-3,
    cluster_sep: float = 2.0,
    cluster_std: float = 1.0,
) -> DataCleaningFamily:
    """Generate the label-noise cleaning family.

    rho is the corruption rate: that fraction of training rows gets a label
    resampled uniformly (so some may keep their class by chance). Every
    client's validation set is single-class (class = client id mod classes),
    which requires classes <= M so all classes are covered.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if classes > M:
        raise ValueError(f"classes ({classes}) must not exceed clients ({M}); each class needs a validator")
    if not (0.0 <= rho < 1.0):
        raise ValueError(f"rho must be in [0, 1), got {rho}")
    if samples_per_client < 1 or val_per_client < 1:
        raise ValueError("samples_per_client and val_per_client must be >= 1")

    gen = RngStream(seed, client=0, step=0, purpose=int(Purpose.DATA_GEN)).generator()
    means = cluster_sep * gen.standard_normal((classes, features))
    N = samples_per_client
    p = M * N

    clients: list[DataCleaningClient] = []
    clean_rows = np.ones(p, dtype=bool)
    for m in range(M):
        labels_true = gen.integers(0, classes, size=N)
        Z_raw = means[labels_true] + cluster_std * gen.standard_normal((N, features))
        flip = gen.random(N) < rho
        resampled = gen.integers(0, classes, size=N)
        labels = np.where(flip, resampled, labels_true)
        clean_rows[m * N : (m + 1) * N] = labels == labels_true

        cls = m % classes
        Zv_raw = means[cls] + cluster_std * gen.standard_normal((val_per_client, features))
        labels_val = np.full(val_per_client, cls, dtype=np.int64)

        Z = np.hstack([_normalize_rows(Z_raw), np.ones((N, 1))])
        Zv = np.hstack([_normalize_rows(Zv_raw), np.ones((val_per_client, 1))])
        for arr in (Z, Zv, labels, labels_val):
            arr.setflags(write=False)
        clients.append(
            DataCleaningClient(
                client_id=m,
                Z=Z,
                labels=labels.astype(np.int64),
                Z_val=Zv,
                labels_val=labels_val,
                block_start=m * N,
                p=p,
                classes=classes,
                l2=l2,
            )
        )

    constants = _measure_constants(clients, p, l2, seed)
    clean_rows.setflags(write=False)
    return DataCleaningFamily(
        clients=clients, constants=constants, seed=seed, rho=rho, clean_mask=clean_rows
    )


def _measure_constants(
    clients: list[DataCleaningClient], p: int, l2: float, seed: int
) -> ProblemConstants:
    # curvature: per-row softmax Hessian tops out at ||z||^2 / 2; rows are
    # unit-normalized plus bias so ||z||^2 = 2 and the bound is tight enough
    L = 1.0 + l2
    sigma_sq = 0.0
    x0 = np.ones(p)
    for c in clients:
        W0 = np.zeros((c.classes, c.Z.shape[1]))
        idx = np.arange(c.n_train, dtype=np.int64)
        P = np.exp(c.Z @ W0.T)
        P /= P.sum(axis=1, keepdims=True)
        R = P.copy()
        R[np.arange(c.n_train), c.labels] -= 1.0
        per_row = np.einsum("ic,ij->icj", R, c.Z).reshape(c.n_train, -1)
        sigma_sq = max(sigma_sq, float(np.mean(np.sum((per_row - per_row.mean(axis=0)) ** 2, axis=1))))
        # coupling block operator norm, bounded by its Frobenius norm
        coupling = float(np.linalg.norm(per_row) / c.n_train)
        L = max(L, coupling)
    y0 = np.zeros(clients[0].d)
    C_f = estimate_grad_bound(clients, x0, y0, seed)
    mu = l2
    return ProblemConstants(
        mu=mu, L=L, C_f=C_f, kappa=L / mu, sigma=float(np.sqrt(sigma_sq)), L_upper=None
    )
