"""Exact t-SNE (van der Maaten & Hinton 2008), no tree approximations."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError

log = logging.getLogger(__name__)


@dataclass
class TsneEmbedding:
    coordinates: np.ndarray  # (n, 2), mean-centred
    perplexity: float
    kl_divergence: float
    iterations: int


def squared_distances(X: np.ndarray) -> np.ndarray:
    sq = np.sum(X * X, axis=1)
    D = sq[:, None] - 2.0 * X @ X.T + sq[None, :]
    np.maximum(D, 0.0, out=D)
    np.fill_diagonal(D, 0.0)
    return D


def _row_entropy(D: np.ndarray, beta: np.ndarray):
    """Entropy (nats) and normalized rows of exp(-beta * D) with the diagonal excluded.

    ``D`` has its per-row minimum off-diagonal distance already subtracted and
    +inf on the diagonal.
    """
    P = np.exp(-D * beta[:, None])
    s = P.sum(axis=1)
    H = np.log(s) + beta * np.sum(np.where(np.isfinite(D), D, 0.0) * P, axis=1) / s
    return H, P / s[:, None]


def conditional_probabilities(D: np.ndarray, perplexity: float, tol: float = 1e-6, max_iter: int = 200):
    """Per-point Gaussian bandwidths hitting ``perplexity`` by bisection.

    Works on all rows at once: the precision ``beta`` of each row is bracketed
    and bisected in log space until ``|H_i - log(perplexity)| < tol``.
    Returns ``(P_cond, beta, entropy)`` with entropies in nats.
    """
    n = D.shape[0]
    target = np.log(perplexity)
    Dm = D.astype(np.float64, copy=True)
    np.fill_diagonal(Dm, np.inf)
    Dm -= Dm.min(axis=1, keepdims=True)  # shift for stability; leaves P unchanged
    log_beta = np.zeros(n)
    lo = np.full(n, -np.inf)
    hi = np.full(n, np.inf)
    scale = np.median(Dm[np.isfinite(Dm)]) if n > 1 else 1.0
    log_beta[:] = -np.log(max(scale, 1e-12))
    H, P = _row_entropy(Dm, np.exp(log_beta))
    for _ in range(max_iter):
        err = H - target
        todo = np.abs(err) >= tol
        if not todo.any():
            break
        # entropy decreases with beta: too high entropy -> raise beta
        up = todo & (err > 0)
        down = todo & (err < 0)
        lo[up] = log_beta[up]
        hi[down] = log_beta[down]
        nxt = log_beta.copy()
        both = np.isfinite(lo) & np.isfinite(hi)
        nxt[todo & both] = 0.5 * (lo[todo & both] + hi[todo & both])
        nxt[up & ~both] = log_beta[up & ~both] + 1.0
        nxt[down & ~both] = log_beta[down & ~both] - 1.0
        rows = np.flatnonzero(todo)
        log_beta[rows] = nxt[rows]
        H[rows], P[rows] = _row_entropy(Dm[rows], np.exp(log_beta[rows]))
    bad = np.abs(H - target) >= tol
    if bad.any():
        log.warning("bandwidth search did not converge for %d points", int(bad.sum()))
    return P, np.exp(log_beta), H


def joint_probabilities(X: np.ndarray, perplexity: float, tol: float = 1e-6):
    """Symmetrized affinities P = (P_cond + P_cond^T) / 2n, plus the conditional entropies."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if perplexity <= 0 or 3 * perplexity > n:
        raise ConfigurationError(f"perplexity {perplexity} infeasible for {n} points (need n >= 3 * perplexity)")
    P_cond, _, H = conditional_probabilities(squared_distances(X), perplexity, tol)
    P = (P_cond + P_cond.T) / (2.0 * n)
    return P, H


def _student_t(Y: np.ndarray):
    W = 1.0 / (1.0 + squared_distances(Y))
    np.fill_diagonal(W, 0.0)
    return W, W / W.sum()


def kl_divergence(P: np.ndarray, Y: np.ndarray) -> float:
    """KL(P || Q) for embedding ``Y`` (zero-probability pairs contribute nothing)."""
    _, Q = _student_t(Y)
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / np.maximum(Q[mask], 1e-300))))


def kl_gradient(P: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """dKL/dY = 4 sum_j (p_ij - q_ij) (y_i - y_j) / (1 + |y_i - y_j|^2)."""
    W, Q = _student_t(Y)
    M = (P - Q) * W
    return 4.0 * (M.sum(axis=1)[:, None] * Y - M @ Y)


def tsne(X, perplexity: float = 250.0, n_iters: int = 1000, learning_rate: float = 200.0, seed: int = 0,
         n_components: int = 2, exaggeration: float = 12.0, exaggeration_iters: int = 250,
         momentum: tuple[float, float] = (0.5, 0.8), min_gain: float = 0.01) -> TsneEmbedding:
    """Gradient descent with momentum, gains and early exaggeration."""
    P, _ = joint_probabilities(X, perplexity)
    n = P.shape[0]
    rng = np.random.default_rng(seed)
    Y = 1e-4 * rng.standard_normal((n, n_components))
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    for it in range(n_iters):
        early = it < exaggeration_iters
        grad = kl_gradient(P * exaggeration if early else P, Y)
        mom = momentum[0] if early else momentum[1]
        same = np.sign(grad) == np.sign(update)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, min_gain, out=gains)
        update = mom * update - learning_rate * gains * grad
        Y = Y + update
        Y -= Y.mean(axis=0)
    return TsneEmbedding(Y, float(perplexity), kl_divergence(P, Y), n_iters)
