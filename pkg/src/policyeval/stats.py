"""Numerical kernels: normal distribution, probit selection model, inverse
Mills ratio and cluster-robust standard errors of a mean."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

INDEX_CLAMP = 30.0
_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)
_MILLS_FLOOR = 1e-300


class PerfectSeparationError(ValueError):
    """Raised when the probit likelihood keeps improving at unbounded index."""


class RankDeficientError(ValueError):
    """Raised when a design matrix does not have full column rank."""


def _finite(z):
    arr = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite input to normal distribution kernel")
    return arr


def _out(arr, like):
    return float(arr) if np.ndim(like) == 0 else arr


def norm_pdf(z):
    """Standard normal density. Accepts a scalar or an array."""
    arr = _finite(z)
    return _out(np.exp(-0.5 * arr * arr - _LOG_SQRT_2PI), z)


def norm_cdf(z):
    """Standard normal distribution function. Accepts a scalar or an array."""
    arr = _finite(z)
    return _out(special.ndtr(arr), z)


def _log_pdf(x):
    return -0.5 * x * x - _LOG_SQRT_2PI


@dataclass(frozen=True)
class ProbitFit:
    gamma: np.ndarray
    cov: np.ndarray
    loglik: float
    n_iter: int
    converged: bool
    grad_norm: float
    loglik_path: tuple = field(default=(), repr=False)
    # True when the index clamp was active at the optimum; estimates are suspect.
    clamped: bool = False

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))


def probit_loglik(gamma, Z, T) -> float:
    xb = np.clip(Z @ gamma, -INDEX_CLAMP, INDEX_CLAMP)
    q = 2.0 * T - 1.0
    return float(np.sum(special.log_ndtr(q * xb)))


def _score_hessian(gamma, Z, T):
    xb = np.clip(Z @ gamma, -INDEX_CLAMP, INDEX_CLAMP)
    q = 2.0 * T - 1.0
    # generalized residual q*phi(xb)/Phi(q*xb), computed in log space
    r = q * np.exp(_log_pdf(xb) - special.log_ndtr(q * xb))
    grad = Z.T @ r
    hess = -(Z * (r * (r + xb))[:, None]).T @ Z
    return grad, hess


def _check_design(Z) -> np.ndarray:
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 2:
        raise ValueError("design matrix must be two-dimensional")
    if not np.all(np.isfinite(Z)):
        raise ValueError("design matrix contains non-finite values")
    return Z


def fit_probit(Z, T, tol: float = 1e-8, max_iter: int = 100) -> ProbitFit:
    """Maximum-likelihood probit fit by Newton-Raphson with step halving.

    Parameters
    ----------
    Z : (n, p) array
        Design matrix. The caller supplies the intercept column.
    T : (n,) array of {0, 1}
        Binary selection indicator.
    tol : float
        Convergence threshold on the max-norm of the score.
    max_iter : int
        Newton iterations before giving up with ``converged=False``.

    Returns
    -------
    ProbitFit
        ``cov`` is the inverse of the observed information at the estimate.
    """
    Z = _check_design(Z)
    T = np.asarray(T)
    n, p = Z.shape
    if T.shape != (n,):
        raise ValueError(f"T has shape {T.shape}, expected ({n},)")
    if not np.isin(T, (0, 1)).all():
        raise ValueError("T must be binary (0/1)")
    T = T.astype(float)
    if n <= p:
        raise ValueError(f"need n > p, got n={n}, p={p}")
    if T.min() == T.max():
        raise ValueError("T contains a single class")
    if np.linalg.matrix_rank(Z) < p:
        raise RankDeficientError("design matrix is rank deficient")

    gamma = np.zeros(p)
    ll = probit_loglik(gamma, Z, T)
    path = [ll]
    converged = False
    n_iter = 0
    grad, hess = _score_hessian(gamma, Z, T)
    for n_iter in range(1, max_iter + 1):
        if np.max(np.abs(grad)) <= tol:
            converged = True
            n_iter -= 1
            break
        try:
            step = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError as exc:
            raise RankDeficientError("singular information matrix") from exc
        t = 1.0
        while True:
            cand = gamma + t * step
            ll_cand = probit_loglik(cand, Z, T)
            if ll_cand >= ll:
                break
            t *= 0.5
            if t < 1e-12:
                cand, ll_cand = gamma, ll
                break
        if ll_cand > ll and np.max(np.abs(Z @ cand)) > INDEX_CLAMP:
            raise PerfectSeparationError(
                "probit index exceeds clamp while likelihood still increases; "
                "the classes are (quasi-)perfectly separated"
            )
        stalled = ll_cand == ll and t < 1e-12
        gamma, ll = cand, ll_cand
        path.append(ll)
        grad, hess = _score_hessian(gamma, Z, T)
        if stalled:
            converged = bool(np.max(np.abs(grad)) <= tol)
            break
    else:
        converged = bool(np.max(np.abs(grad)) <= tol)

    cov = np.linalg.inv(-hess)
    cov = 0.5 * (cov + cov.T)
    clamped = bool(np.max(np.abs(Z @ gamma)) >= INDEX_CLAMP)
    return ProbitFit(
        gamma=gamma,
        cov=cov,
        loglik=ll,
        n_iter=n_iter,
        converged=converged,
        grad_norm=float(np.max(np.abs(grad))),
        loglik_path=tuple(path),
        clamped=clamped,
    )


def _index(fit: ProbitFit, Z) -> np.ndarray:
    Z = _check_design(Z)
    if Z.shape[1] != fit.gamma.shape[0]:
        raise ValueError(
            f"Z has {Z.shape[1]} columns but the fit has {fit.gamma.shape[0]} coefficients"
        )
    return Z @ fit.gamma


def predict_probit(fit: ProbitFit, Z) -> np.ndarray:
    """Selection probabilities, kept strictly inside (0, 1)."""
    xb = np.clip(_index(fit, Z), -INDEX_CLAMP, INDEX_CLAMP)
    prob = special.ndtr(xb)
    return np.clip(prob, np.finfo(float).tiny, 1.0 - np.finfo(float).epsneg)


@dataclass(frozen=True)
class MillsVector:
    lam: np.ndarray
    treatment: np.ndarray


def mills_from_index(xb, T) -> MillsVector:
    """Inverse Mills ratio at a given probit index.

    ``phi/Phi`` for selected rows and ``-phi/(1 - Phi)`` for the rest.
    """
    xb = np.asarray(xb, dtype=float)
    T = np.asarray(T)
    if T.shape != xb.shape:
        raise ValueError("index and treatment lengths differ")
    if not np.isin(T, (0, 1)).all():
        raise ValueError("T must be binary (0/1)")
    sel = T == 1
    log_denom = np.where(sel, special.log_ndtr(xb), special.log_ndtr(-xb))
    bad = np.flatnonzero(log_denom < np.log(_MILLS_FLOOR))
    if bad.size:
        raise ValueError(f"selection probability underflows for rows {bad.tolist()}")
    ratio = np.exp(_log_pdf(xb) - log_denom)
    return MillsVector(lam=np.where(sel, ratio, -ratio), treatment=T.astype(np.int8))


def inverse_mills(fit: ProbitFit, Z, T) -> MillsVector:
    return mills_from_index(_index(fit, Z), T)


def cluster_se(scores, clusters) -> tuple[float, float]:
    """Mean of ``scores`` and its cluster-robust standard error.

    se = sqrt(sum_k (S_k - n_k * mean)^2) / n, where S_k is the score total
    in cluster k. No small-sample correction is applied.
    """
    scores = np.asarray(scores, dtype=float)
    clusters = np.asarray(clusters)
    if scores.shape != clusters.shape or scores.ndim != 1:
        raise ValueError("scores and clusters must be 1-d and of equal length")
    labels, inv = np.unique(clusters, return_inverse=True)
    if labels.size < 2:
        raise ValueError("cluster-robust standard error needs at least 2 clusters")
    n = scores.size
    mean = float(scores.mean())
    centered = np.bincount(inv, weights=scores - mean, minlength=labels.size)
    se = float(np.sqrt(np.sum(centered**2)) / n)
    return mean, se
