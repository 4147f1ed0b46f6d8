"""Hot inner-loop kernels with a numba fast path and a numpy fallback.

The data-cleaning family evaluates softmax cross-entropy gradients, HVPs and
JVPs over row subsets thousands of times per run; these are the only kernels
worth fusing. Backend selection happens once at import:

* ``FEDBILEVEL_BACKEND=numba`` requires numba and fails loudly without it,
* ``FEDBILEVEL_BACKEND=numpy`` forces the fallback,
* unset or ``auto`` picks numba when importable.

Both implementations are exposed (``*_numba`` / ``*_numpy``) so tests and the
benchmark can compare them; the unsuffixed names are the selected backend.
Within one backend every kernel is deterministic; across backends results may
differ by float association, which is why the choice is pinned by environment
rather than decided per call.

All kernels take ``W`` of shape (C, D) (one row per class), rows ``Z`` of
shape (N, D), integer ``labels`` (N,), a row-index subset ``idx`` and, where
relevant, per-selected-row coefficients ``coef`` (len(idx),). Regularization
terms are added by the caller, not here.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "BACKEND",
    "HAS_NUMBA",
    "xent_loss",
    "xent_grad_w",
    "xent_hvp",
    "xent_gradw_dot",
    "argmax_errors",
]

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def xent_loss_numpy(W, Z, labels, idx):
    """Per-row cross-entropy -log softmax(W z)[label] for rows in idx."""
    S = Z[idx] @ W.T
    m = S.max(axis=1)
    lse = m + np.log(np.exp(S - m[:, None]).sum(axis=1))
    return lse - S[np.arange(len(idx)), labels[idx]]


def xent_grad_w_numpy(W, Z, labels, idx, coef):
    """sum_i coef_i * (softmax_i - onehot_i) z_i^T over rows in idx."""
    Zs = Z[idx]
    P = _softmax_rows(Zs @ W.T)
    P[np.arange(len(idx)), labels[idx]] -= 1.0
    return (coef[:, None] * P).T @ Zs


def xent_hvp_numpy(W, Z, labels, idx, coef, V):
    """Cross-entropy Hessian-vector product in W, summed with coef weights.

    Per row the logit Hessian is diag(p) - p p^T; chaining through z gives
    sum_i coef_i * (p_i * s_i - p_i <p_i, s_i>) z_i^T with s_i = V z_i.
    """
    Zs = Z[idx]
    P = _softmax_rows(Zs @ W.T)
    S = Zs @ V.T
    Q = P * S - P * (P * S).sum(axis=1, keepdims=True)
    return (coef[:, None] * Q).T @ Zs


def xent_gradw_dot_numpy(W, Z, labels, idx, V):
    """Per-row inner products <grad_W loss_i, V> for rows in idx."""
    Zs = Z[idx]
    P = _softmax_rows(Zs @ W.T)
    P[np.arange(len(idx)), labels[idx]] -= 1.0
    return (P * (Zs @ V.T)).sum(axis=1)


def argmax_errors_numpy(W, Z, labels):
    """Count of rows whose argmax class differs from the label."""
    pred = np.argmax(Z @ W.T, axis=1)
    return int(np.count_nonzero(pred != labels))


# ---------------------------------------------------------------------------
# numba implementations (same contracts, explicit loops)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _nb_row_softmax(W, z):
    C = W.shape[0]
    s = W @ z
    m = s[0]
    for c in range(1, C):
        if s[c] > m:
            m = s[c]
    tot = 0.0
    for c in range(C):
        s[c] = np.exp(s[c] - m)
        tot += s[c]
    for c in range(C):
        s[c] /= tot
    return s


@njit(cache=True)
def xent_loss_numba(W, Z, labels, idx):
    k = idx.shape[0]
    out = np.empty(k)
    C = W.shape[0]
    for i in range(k):
        z = Z[idx[i]]
        s = W @ z
        m = s[0]
        for c in range(1, C):
            if s[c] > m:
                m = s[c]
        tot = 0.0
        for c in range(C):
            tot += np.exp(s[c] - m)
        out[i] = m + np.log(tot) - s[labels[idx[i]]]
    return out


@njit(cache=True)
def xent_grad_w_numba(W, Z, labels, idx, coef):
    C, D = W.shape
    G = np.zeros((C, D))
    for i in range(idx.shape[0]):
        z = Z[idx[i]]
        p = _nb_row_softmax(W, z)
        p[labels[idx[i]]] -= 1.0
        a = coef[i]
        for c in range(C):
            pc = a * p[c]
            for j in range(D):
                G[c, j] += pc * z[j]
    return G


@njit(cache=True)
def xent_hvp_numba(W, Z, labels, idx, coef, V):
    C, D = W.shape
    G = np.zeros((C, D))
    for i in range(idx.shape[0]):
        z = Z[idx[i]]
        p = _nb_row_softmax(W, z)
        s = V @ z
        ps = 0.0
        for c in range(C):
            ps += p[c] * s[c]
        a = coef[i]
        for c in range(C):
            qc = a * (p[c] * s[c] - p[c] * ps)
            for j in range(D):
                G[c, j] += qc * z[j]
    return G


@njit(cache=True)
def xent_gradw_dot_numba(W, Z, labels, idx, V):
    k = idx.shape[0]
    out = np.empty(k)
    C = W.shape[0]
    for i in range(k):
        z = Z[idx[i]]
        p = _nb_row_softmax(W, z)
        p[labels[idx[i]]] -= 1.0
        s = V @ z
        acc = 0.0
        for c in range(C):
            acc += p[c] * s[c]
        out[i] = acc
    return out


@njit(cache=True)
def argmax_errors_numba(W, Z, labels):
    n = Z.shape[0]
    C = W.shape[0]
    errs = 0
    for i in range(n):
        s = W @ Z[i]
        best = 0
        for c in range(1, C):
            if s[c] > s[best]:
                best = c
        if best != labels[i]:
            errs += 1
    return errs


def _select_backend() -> str:
    choice = os.environ.get("FEDBILEVEL_BACKEND", "auto").lower()
    if choice not in ("auto", "numba", "numpy"):
        raise ValueError(f"FEDBILEVEL_BACKEND must be auto|numba|numpy, got {choice!r}")
    if choice == "numba" and not HAS_NUMBA:
        raise ImportError("FEDBILEVEL_BACKEND=numba but numba is not installed")
    if choice == "auto":
        return "numba" if HAS_NUMBA else "numpy"
    return choice


BACKEND = _select_backend()

if BACKEND == "numba":
    xent_loss = xent_loss_numba
    xent_grad_w = xent_grad_w_numba
    xent_hvp = xent_hvp_numba
    xent_gradw_dot = xent_gradw_dot_numba
    argmax_errors = argmax_errors_numba
else:
    xent_loss = xent_loss_numpy
    xent_grad_w = xent_grad_w_numpy
    xent_hvp = xent_hvp_numpy
    xent_gradw_dot = xent_gradw_dot_numpy
    argmax_errors = argmax_errors_numpy
