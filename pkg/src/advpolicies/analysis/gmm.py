"""Gaussian mixture density models fitted by EM, with BIC/validation selection."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from ..errors import ConfigurationError, NumericalFault

log = logging.getLogger(__name__)

COV_TYPES = ("full", "diagonal")
JITTER = 1e-6
MIN_WEIGHT = 1e-8
LOG_2PI = np.log(2 * np.pi)


@dataclass
class GmmModel:
    weights: np.ndarray  # (k,)
    means: np.ndarray  # (k, d)
    cov_type: str
    covariances: np.ndarray  # (k, d, d) for full, (k, d) for diagonal
    jitter: float = JITTER
    iterations: int = 0
    log_likelihood: float = float("nan")  # mean per-row training log-likelihood
    history: list[float] = field(default_factory=list)
    converged: bool = False
    reseeded: int = 0

    def __post_init__(self):
        self._factor()

    def _factor(self) -> None:
        if self.cov_type == "full":
            self.chol = np.linalg.cholesky(self.covariances)
            self.log_det = 2 * np.log(np.diagonal(self.chol, axis1=1, axis2=2)).sum(axis=1)
        else:
            self.log_det = np.log(self.covariances).sum(axis=1)

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def component_log_density(self, X: np.ndarray) -> np.ndarray:
        """log N(x | mu_j, Sigma_j) for every row and component, shape (n, k)."""
        X = np.asarray(X, dtype=np.float64)
        n, d = X.shape
        out = np.empty((n, self.k))
        for j in range(self.k):
            diff = X - self.means[j]
            if self.cov_type == "full":
                z = solve_triangular(self.chol[j], diff.T, lower=True, check_finite=False)
                maha = np.einsum("ij,ij->j", z, z)
            else:
                maha = np.sum(diff * diff / self.covariances[j], axis=1)
            out[:, j] = -0.5 * (d * LOG_2PI + self.log_det[j] + maha)
        return out

    def weighted_log_density(self, X) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return self.component_log_density(X) + np.log(self.weights)

    def score_samples(self, X) -> np.ndarray:
        """Per-row log density under the mixture."""
        return logsumexp(self.weighted_log_density(X), axis=1)

    def responsibilities(self, X) -> np.ndarray:
        lw = self.weighted_log_density(X)
        return np.exp(lw - logsumexp(lw, axis=1, keepdims=True))

    def n_parameters(self) -> int:
        return n_free_parameters(self.k, self.dim, self.cov_type)

    def bic(self, X) -> float:
        n = np.asarray(X).shape[0]
        return float(self.n_parameters() * np.log(n) - 2 * self.score_samples(X).sum())


def n_free_parameters(k: int, d: int, cov_type: str) -> int:
    cov = d * (d + 1) // 2 if cov_type == "full" else d
    return k * (d + cov) + (k - 1)


def kmeans_plus_plus(X: np.ndarray, k: int, rng: np.random.Generator, n_trials: int | None = None) -> np.ndarray:
    """Greedy k-means++ seeding; returns row indices of the seeds.

    Each step draws ``n_trials`` candidates by D^2 sampling and keeps the one
    that lowers the total squared distance the most.
    """
    n = X.shape[0]
    n_trials = n_trials or 2 + int(np.log(k))
    idx = [int(rng.integers(n))]
    d2 = np.sum((X - X[idx[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            cands = rng.integers(n, size=n_trials)
        else:
            cands = rng.choice(n, size=n_trials, p=d2 / total)
        cand_d2 = np.minimum(d2[None, :], _chunked_sqdist(X[cands], X).clip(min=0.0))
        best = int(np.argmin(cand_d2.sum(axis=1)))
        idx.append(int(cands[best]))
        d2 = cand_d2[best]
    return np.array(idx)


def lloyd(X: np.ndarray, centers: np.ndarray, n_iters: int = 20) -> np.ndarray:
    """Plain k-means refinement; returns the hard assignment of every row."""
    centers = centers.copy()
    labels = None
    for _ in range(n_iters):
        new = np.argmin(_chunked_sqdist(X, centers), axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        counts = np.bincount(labels, minlength=centers.shape[0])
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, X)
        keep = counts > 0  # an emptied cluster keeps its old centre
        centers[keep] = sums[keep] / counts[keep, None]
    return labels


def _m_step(X, resp, cov_type, jitter):
    n, d = X.shape
    nk = resp.sum(axis=0)
    weights = nk / n
    safe = np.maximum(nk, 1e-300)
    means = (resp.T @ X) / safe[:, None]
    if cov_type == "full":
        covs = np.empty((resp.shape[1], d, d))
        for j in range(resp.shape[1]):
            diff = X - means[j]
            covs[j] = (resp[:, j, None] * diff).T @ diff / safe[j]
            covs[j].flat[::d + 1] += jitter
    else:
        covs = (resp.T @ (X * X)) / safe[:, None] - means ** 2
        covs = np.maximum(covs, 0.0) + jitter
    return weights, means, covs


def fit_gmm(X, k: int, cov_type: str = "full", max_iters: int = 200, tol: float = 1e-6, seed: int = 0,
            jitter: float = JITTER, init_iters: int = 20) -> GmmModel:
    """EM from a k-means++ seeded, Lloyd-refined start until the mean log-likelihood gain drops below ``tol``.

    ``jitter * I`` is added to every covariance at each M-step. A component
    whose weight falls below 1e-8 is re-seeded once at the worst-explained
    row; a second collapse raises :class:`NumericalFault`.
    """
    X = np.asarray(getattr(X, "matrix", X), dtype=np.float64)
    n, d = X.shape
    if cov_type not in COV_TYPES:
        raise ConfigurationError(f"cov_type must be one of {COV_TYPES}")
    if n < 10 * k:
        raise ConfigurationError(f"need at least 10*k = {10 * k} rows to fit {k} components, got {n}")
    rng = np.random.default_rng(seed)
    labels = lloyd(X, X[kmeans_plus_plus(X, k, rng)], init_iters)
    resp = np.zeros((n, k))
    resp[np.arange(n), labels] = 1.0
    # seeds always own themselves unless duplicated; guard against empty clusters
    empty = resp.sum(axis=0) == 0
    if empty.any():
        resp[:, empty] = 1.0 / n
    model = GmmModel(*_pack(_m_step(X, resp, cov_type, jitter), cov_type), jitter=jitter)
    history: list[float] = []
    reseeded = 0
    converged = False
    for it in range(max_iters):
        lw = model.weighted_log_density(X)
        norm = logsumexp(lw, axis=1, keepdims=True)
        ll = float(norm.mean())
        if not np.isfinite(ll):
            raise NumericalFault("non-finite GMM log-likelihood", step=it)
        history.append(ll)
        if len(history) > 1 and abs(history[-1] - history[-2]) < tol:
            converged = True
            break
        resp = np.exp(lw - norm)
        weights, means, covs = _m_step(X, resp, cov_type, jitter)
        dead = weights < MIN_WEIGHT
        if dead.any():
            if reseeded:
                raise NumericalFault(f"GMM component collapse after re-seeding ({int(dead.sum())} components)", step=it)
            reseeded += 1
            worst = np.argsort(norm[:, 0])[:int(dead.sum())]
            full_cov = np.cov(X.T).reshape(d, d) + jitter * np.eye(d)
            for j, row in zip(np.flatnonzero(dead), worst):
                means[j] = X[row]
                covs[j] = full_cov if cov_type == "full" else np.diag(full_cov)
                weights[j] = 1.0 / k
            weights /= weights.sum()
            log.warning("re-seeded %d collapsed GMM component(s) at iteration %d", int(dead.sum()), it)
            history.clear()  # the objective restarts from the re-seeded model
        model = GmmModel(weights, means, cov_type, covs, jitter=jitter)
    if not converged:
        # the last M-step has not been scored yet
        history.append(float(model.score_samples(X).mean()))
    model.iterations = len(history)
    model.history = history
    model.log_likelihood = history[-1]
    model.converged = converged
    model.reseeded = reseeded
    return model


def _pack(params, cov_type):
    weights, means, covs = params
    return weights, means, cov_type, covs


def _chunked_sqdist(X, C, chunk=4096):
    out = np.empty((X.shape[0], C.shape[0]))
    cc = np.sum(C * C, axis=1)
    for s in range(0, X.shape[0], chunk):
        x = X[s:s + chunk]
        out[s:s + chunk] = np.sum(x * x, axis=1)[:, None] - 2 * x @ C.T + cc[None]
    return out


@dataclass
class SelectionRow:
    k: int
    cov_type: str
    n_parameters: int
    train_log_likelihood: float
    validation_log_likelihood: float
    bic: float
    iterations: int
    converged: bool


def select_gmm(train, validation, k_list=(5, 10, 20, 40, 80), cov_types=COV_TYPES, max_iters: int = 200,
               tol: float = 1e-6, seed: int = 0, tie_tolerance: float = 1e-2, n_init: int = 1):
    """Fit every (k, covariance type) pair and pick the best.

    The winner has the highest mean validation log-likelihood; candidates
    within ``tie_tolerance`` nats per row of the best are ranked by BIC.
    Combinations violating the ``n >= 10 k`` requirement are skipped.
    Returns ``(best_model, rows)``.
    """
    Xt = np.asarray(getattr(train, "matrix", train), dtype=np.float64)
    Xv = np.asarray(getattr(validation, "matrix", validation), dtype=np.float64)
    rows: list[SelectionRow] = []
    models = []
    for cov_type in cov_types:
        for k in k_list:
            if Xt.shape[0] < 10 * k:
                log.warning("skipping k=%d: only %d training rows", k, Xt.shape[0])
                continue
            best = None
            for r in range(n_init):
                m = fit_gmm(Xt, k, cov_type, max_iters, tol, seed=seed + 7919 * r)
                if best is None or m.log_likelihood > best.log_likelihood:
                    best = m
            m = best
            rows.append(SelectionRow(k, cov_type, m.n_parameters(), m.log_likelihood,
                                     float(m.score_samples(Xv).mean()), m.bic(Xt), m.iterations, m.converged))
            models.append(m)
    if not rows:
        raise ConfigurationError("no (k, cov_type) combination could be fitted")
    top = max(r.validation_log_likelihood for r in rows)
    contenders = [i for i, r in enumerate(rows) if r.validation_log_likelihood >= top - tie_tolerance]
    best_i = min(contenders, key=lambda i: rows[i].bic)
    return models[best_i], rows


def score_loglik(model: GmmModel, probe) -> tuple[float, tuple[float, float]]:
    """Mean per-row log-likelihood of ``probe`` and its normal-approximation 95% CI."""
    X = np.asarray(getattr(probe, "matrix", probe), dtype=np.float64)
    if X.shape[1] != model.dim:
        raise ConfigurationError(f"probe has dim {X.shape[1]}, model has dim {model.dim}")
    ll = model.score_samples(X)
    mean = float(ll.mean())
    half = 1.959963984540054 * float(ll.std(ddof=1)) / np.sqrt(ll.size) if ll.size > 1 else float("inf")
    return mean, (mean - half, mean + half)
