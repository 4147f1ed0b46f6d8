"""Hyper-representation learning: shared embedding, per-task ridge heads.

The outer variable x is a flattened linear embedding X (E x F). Each client
holds T tasks; the inner variable y stacks one head W_t (n_way x E) per task.
With embedded features Phi = Z X' and +/-1 one-vs-all targets Y:

    g_m(x, y) = (1/T) sum_t [ (1/(2n)) ||Phi_t W_t' - Y_t||_F^2
                              + (l2/2) ||W_t||_F^2 ]
    f_m(x, y) = (1/T) sum_t (1/(2n_val)) ||PhiV_t W_t' - YV_t||_F^2

Heads never leave their client, so this family only supports the per-client
lower problem. Each head block has a closed-form ridge solution, used by the
exact evaluation oracles.

Task data is planted: class prototypes live in embedding space, features are
their pullbacks through a hidden orthonormal embedding plus noise. With zero
noise and enough shots the ridge head recovers the prototype geometry, which
is the recovery check the tests rely on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..numerics import DenseVector, Purpose, RngStream
from .base import Batch, ClientProblem, ProblemConstants, estimate_grad_bound

__all__ = ["TaskData", "HyperRepClient", "HyperRepFamily", "make_hyperrep"]


@dataclass(frozen=True, eq=False)
class TaskData:
    Z: np.ndarray
    Y: np.ndarray
    labels: np.ndarray
    Z_val: np.ndarray
    Y_val: np.ndarray
    labels_val: np.ndarray


@dataclass(frozen=True, eq=False)
class HyperRepClient(ClientProblem):
    client_id: int
    tasks: list[TaskData]
    embed_dim: int
    feat_dim: int
    n_way: int
    l2: float

    @property
    def p(self) -> int:
        return self.embed_dim * self.feat_dim

    @property
    def d(self) -> int:
        return len(self.tasks) * self.n_way * self.embed_dim

    @property
    def T(self) -> int:
        return len(self.tasks)

    @property
    def n_train(self) -> int:
        return self.tasks[0].Z.shape[0]

    @property
    def n_val(self) -> int:
        return self.tasks[0].Z_val.shape[0]

    def n_rows(self, domain: str) -> int | None:
        n = self.n_train if domain == "lower" else self.n_val
        return self.T * n

    def _X(self, x: DenseVector) -> np.ndarray:
        return x.reshape(self.embed_dim, self.feat_dim)

    def _heads(self, y: DenseVector) -> np.ndarray:
        return y.reshape(self.T, self.n_way, self.embed_dim)

    def _row_groups(self, batch: Batch, n: int):
        """Split batch rows (flat over task x row) into per-task row lists."""
        tasks, rows = np.divmod(batch.indices, n)
        order = np.argsort(tasks, kind="stable")
        tasks, rows = tasks[order], rows[order]
        bounds = np.searchsorted(tasks, np.arange(self.T + 1))
        return [(t, rows[bounds[t] : bounds[t + 1]]) for t in range(self.T) if bounds[t] < bounds[t + 1]]

    # -- upper objective ------------------------------------------------------

    def grad_f_x(self, x: DenseVector, y: DenseVector, batch: Batch | None = None) -> DenseVector:
        X = self._X(x)
        W = self._heads(y)
        out = np.zeros((self.embed_dim, self.feat_dim))
        if batch is None:
            for t, task in enumerate(self.tasks):
                Phi = task.Z_val @ X.T
                R = Phi @ W[t].T - task.Y_val
                out += W[t].T @ R.T @ task.Z_val / (self.T * self.n_val)
        else:
            for t, rows in self._row_groups(batch, self.n_val):
                task = self.tasks[t]
                Zr, Yr = task.Z_val[rows], task.Y_val[rows]
                R = Zr @ X.T @ W[t].T - Yr
                out += W[t].T @ R.T @ Zr / batch.size
        return out.ravel()

    def grad_f_y(self, x: DenseVector, y: DenseVector, batch: Batch | None = None) -> DenseVector:
        X = self._X(x)
        W = self._heads(y)
        out = np.zeros_like(W)
        if batch is None:
            for t, task in enumerate(self.tasks):
                Phi = task.Z_val @ X.T
                out[t] = (Phi @ W[t].T - task.Y_val).T @ Phi / (self.T * self.n_val)
        else:
            for t, rows in self._row_groups(batch, self.n_val):
                task = self.tasks[t]
                Phi = task.Z_val[rows] @ X.T
                out[t] = (Phi @ W[t].T - task.Y_val[rows]).T @ Phi / batch.size
        return out.ravel()

    def value_f(self, x: DenseVector, y: DenseVector) -> float:
        X = self._X(x)
        W = self._heads(y)
        total = 0.0
        for t, task in enumerate(self.tasks):
            R = task.Z_val @ X.T @ W[t].T - task.Y_val
            total += 0.5 * np.sum(R * R) / (self.T * self.n_val)
        return float(total)

    # -- lower objective ------------------------------------------------------

    def grad_g_y(self, x: DenseVector, y: DenseVector, batch: Batch | None = None) -> DenseVector:
        X = self._X(x)
        W = self._heads(y)
        out = self.l2 * W / self.T
        if batch is None:
            for t, task in enumerate(self.tasks):
                Phi = task.Z @ X.T
                out[t] += (Phi @ W[t].T - task.Y).T @ Phi / (self.T * self.n_train)
        else:
            for t, rows in self._row_groups(batch, self.n_train):
                task = self.tasks[t]
                Phi = task.Z[rows] @ X.T
                out[t] += (Phi @ W[t].T - task.Y[rows]).T @ Phi / batch.size
        return out.ravel()

    def hvp_gyy(self, x: DenseVector, y: DenseVector, v: DenseVector, batch: Batch | None = None) -> DenseVector:
        X = self._X(x)
        V = self._heads(v)
        out = self.l2 * V / self.T
        if batch is None:
            for t, task in enumerate(self.tasks):
                Phi = task.Z @ X.T
                out[t] += V[t] @ (Phi.T @ Phi) / (self.T * self.n_train)
        else:
            for t, rows in self._row_groups(batch, self.n_train):
                Phi = self.tasks[t].Z[rows] @ X.T
                out[t] += V[t] @ (Phi.T @ Phi) / batch.size
        return out.ravel()

    def jvp_gxy(self, x: DenseVector, y: DenseVector, v: DenseVector, batch: Batch | None = None) -> DenseVector:
        X = self._X(x)
        W = self._heads(y)
        V = self._heads(v)
        out = np.zeros((self.embed_dim, self.feat_dim))
        if batch is None:
            for t, task in enumerate(self.tasks):
                Phi = task.Z @ X.T
                R = Phi @ W[t].T - task.Y
                out += (V[t].T @ R.T + W[t].T @ V[t] @ Phi.T) @ task.Z / (self.T * self.n_train)
        else:
            for t, rows in self._row_groups(batch, self.n_train):
                task = self.tasks[t]
                Zr, Yr = task.Z[rows], task.Y[rows]
                Phi = Zr @ X.T
                R = Phi @ W[t].T - Yr
                out += (V[t].T @ R.T + W[t].T @ V[t] @ Phi.T) @ Zr / batch.size
        return out.ravel()

    def value_g(self, x: DenseVector, y: DenseVector) -> float:
        X = self._X(x)
        W = self._heads(y)
        total = 0.0
        for t, task in enumerate(self.tasks):
            R = task.Z @ X.T @ W[t].T - task.Y
            total += (0.5 * np.sum(R * R) / self.n_train + 0.5 * self.l2 * np.sum(W[t] * W[t])) / self.T
        return float(total)

    # -- exact per-client maps -------------------------------------------------

    def lower_solution(self, x: DenseVector) -> DenseVector:
        """Closed-form ridge heads at embedding x (block-wise solve)."""
        X = self._X(x)
        W = np.zeros((self.T, self.n_way, self.embed_dim))
        for t, task in enumerate(self.tasks):
            Phi = task.Z @ X.T
            A = Phi.T @ Phi / self.n_train + self.l2 * np.eye(self.embed_dim)
            W[t] = np.linalg.solve(A, Phi.T @ task.Y / self.n_train).T
        return W.ravel()

    def hypergrad(self, x: DenseVector) -> DenseVector:
        """Exact gradient of x -> f(x, argmin_y g(x, y)) for this client."""
        y = self.lower_solution(x)
        X = self._X(x)
        W = self._heads(y)
        gf_y = self._heads(self.grad_f_y(x, y))
        V = np.zeros_like(W)
        for t, task in enumerate(self.tasks):
            Phi = task.Z @ X.T
            A = (Phi.T @ Phi / self.n_train + self.l2 * np.eye(self.embed_dim)) / self.T
            V[t] = np.linalg.solve(A, gf_y[t].T).T
        return self.grad_f_x(x, y) - self.jvp_gxy(x, y, V.ravel())

    def val_error(self, y: DenseVector, x: DenseVector) -> float:
        X = self._X(x)
        W = self._heads(y)
        errs, total = 0, 0
        for t, task in enumerate(self.tasks):
            scores = task.Z_val @ X.T @ W[t].T
            errs += int(np.count_nonzero(np.argmax(scores, axis=1) != task.labels_val))
            total += len(task.labels_val)
        return errs / total


@dataclass(frozen=True, eq=False)
class HyperRepFamily:
    clients: list[HyperRepClient]
    constants: ProblemConstants
    seed: int
    x0: DenseVector
    planted: np.ndarray
    supports: frozenset[str] = field(default=frozenset({"local"}), init=False)
    name: str = field(default="hyper_rep", init=False)

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
        return self.x0.copy()

    def init_y(self) -> DenseVector:
        return np.zeros(self.d)

    def grad_h_local(self, x: DenseVector) -> DenseVector:
        return np.mean([c.hypergrad(x) for c in self.clients], axis=0)

    def value_h_local(self, x: DenseVector) -> float:
        return float(np.mean([c.value_f(x, c.lower_solution(x)) for c in self.clients]))

    def val_error(self, x: DenseVector, ys: list[DenseVector]) -> float:
        return float(np.mean([c.val_error(y, x) for c, y in zip(self.clients, ys)]))


def make_hyperrep(
    seed: int,
    M: int,
    tasks_per_client: int,
    n_way: int,
    k_shot: int,
    embed_dim: int,
    *,
    features: int = 12,
    l2: float = 0.1,
    noise: float = 0.1,
    val_shots: int | None = None,
    proto_scale: float = 2.0,
) -> HyperRepFamily:
    """Generate the hyper-representation family with planted structure."""
    if min(M, tasks_per_client, n_way, k_shot, embed_dim) < 1:
        raise ValueError("M, tasks_per_client, n_way, k_shot, embed_dim must be >= 1")
    if n_way < 2:
        raise ValueError(f"need n_way >= 2, got {n_way}")
    if embed_dim > features:
        raise ValueError(f"embed_dim ({embed_dim}) must not exceed features ({features})")
    if l2 <= 0:
        raise ValueError(f"l2 must be positive, got {l2}")
    vs = k_shot if val_shots is None else val_shots

    gen = RngStream(seed, client=0, step=0, purpose=int(Purpose.DATA_GEN)).generator()
    hidden, _ = np.linalg.qr(gen.standard_normal((features, embed_dim)))
    hidden = hidden.T  # orthonormal rows, E x F

    def make_split(protos: np.ndarray, shots: int):
        labels = np.tile(np.arange(n_way), shots)
        Z = protos[labels] @ hidden + noise * gen.standard_normal((len(labels), features))
        Y = -np.ones((len(labels), n_way))
        Y[np.arange(len(labels)), labels] = 1.0
        return Z, Y, labels.astype(np.int64)

    clients: list[HyperRepClient] = []
    planted = np.zeros((M, tasks_per_client, n_way, embed_dim))
    for m in range(M):
        tasks = []
        for t in range(tasks_per_client):
            protos = proto_scale * gen.standard_normal((n_way, embed_dim))
            planted[m, t] = protos
            Z, Y, lab = make_split(protos, k_shot)
            Zv, Yv, labv = make_split(protos, vs)
            for arr in (Z, Y, lab, Zv, Yv, labv):
                arr.setflags(write=False)
            tasks.append(TaskData(Z=Z, Y=Y, labels=lab, Z_val=Zv, Y_val=Yv, labels_val=labv))
        clients.append(
            HyperRepClient(
                client_id=m,
                tasks=tasks,
                embed_dim=embed_dim,
                feat_dim=features,
                n_way=n_way,
                l2=l2,
            )
        )

    x0 = (gen.standard_normal((embed_dim, features)) / np.sqrt(features)).ravel()
    constants = _measure_constants(clients, x0, seed)
    x0.setflags(write=False)
    planted.setflags(write=False)
    return HyperRepFamily(clients=clients, constants=constants, seed=seed, x0=x0, planted=planted)


def _measure_constants(clients: list[HyperRepClient], x0: DenseVector, seed: int) -> ProblemConstants:
    mu = np.inf
    L = 0.0
    probe_gen = RngStream(seed, client=0, step=1, purpose=int(Purpose.PROBE)).generator()
    for c in clients:
        X = x0.reshape(c.embed_dim, c.feat_dim)
        for task in c.tasks:
            Phi = task.Z @ X.T
            eigs = np.linalg.eigvalsh(Phi.T @ Phi / c.n_train)
            mu = min(mu, (c.l2 + eigs[0]) / c.T)
            L = max(L, (c.l2 + eigs[-1]) / c.T)
            Phiv = task.Z_val @ X.T
            L = max(L, float(np.linalg.eigvalsh(Phiv.T @ Phiv)[-1]) / (c.T * c.n_val))
        # coupling norm from random probes through the mixed block
        y = c.lower_solution(x0)
        for _ in range(20):
            v = probe_gen.standard_normal(c.d)
            L = max(L, float(np.linalg.norm(c.jvp_gxy(x0, y, v)) / np.linalg.norm(v)))
    y0 = clients[0].lower_solution(x0)
    sigma_sq = 0.0
    full = clients[0].grad_g_y(x0, y0)
    for i in range(50):
        stream = RngStream(seed, client=0, step=i, purpose=int(Purpose.PROBE) + 64)
        batch = clients[0].draw(stream, 1, "lower")
        sigma_sq += float(np.sum((clients[0].grad_g_y(x0, y0, batch) - full) ** 2)) / 50.0
    C_f = estimate_grad_bound(clients, x0, y0, seed)
    return ProblemConstants(
        mu=float(mu), L=float(L), C_f=C_f, kappa=float(L / mu), sigma=float(np.sqrt(sigma_sq)), L_upper=None
    )
