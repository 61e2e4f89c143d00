"""R-learner treatment-effect estimation on top of honest forests.

The propensity and marginal outcome are fit with out-of-bag forest
predictions, the effect forest is fit to the residual ratio with squared
treatment residuals as weights, and averages use the doubly-robust score

    gamma_i = tau_i + (W_i - e_i) / (e_i (1 - e_i)) * (Y_i - m_i - (W_i - e_i) tau_i)

with cluster-robust standard errors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import forest as fr
from .stats import cluster_se
from .table import ObservationTable, encode, stratify

logger = logging.getLogger(__name__)

Z95 = 1.959964
Z90 = 1.644854
RESIDUAL_GUARD = 1e-6
MAX_EXCLUDED_SHARE = 0.20


def derive_seed(seed: int, stream: int) -> int:
    state = np.random.SeedSequence([int(seed), int(stream)]).generate_state(1, np.uint64)
    return int(state[0])


def _arrays(table: ObservationTable):
    design = encode(table)
    return design, table.y.astype(float), table.w.astype(float), table.cluster


@dataclass(frozen=True, eq=False)
class NuisanceFits:
    e_hat: np.ndarray
    m_hat: np.ndarray
    trim: tuple = (0.05, 0.95)
    n_trimmed: int = 0


def _crossfit_predict(X, target, clusters, params, n_folds, seed):
    """K-fold predictions with folds formed from whole clusters."""
    labels = np.unique(clusters)
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 7], dtype=np.uint64)))
    fold_of = rng.permutation(labels.size) % n_folds
    row_fold = fold_of[np.searchsorted(labels, clusters)]
    out = np.empty(X.shape[0])
    for k in range(n_folds):
        test = row_fold == k
        model = fr.fit_forest(X[~test], target[~test], clusters=clusters[~test], params=params)
        out[test] = fr.predict(model, X[test])
    return out


def fit_nuisance(table: ObservationTable, params: fr.ForestParams | None = None,
                 trim=(0.05, 0.95), crossfit: str = "oob", n_folds: int = 5) -> NuisanceFits:
    """Out-of-bag propensity and marginal-outcome predictions.

    ``crossfit="kfold"`` replaces the out-of-bag device with cluster-level
    K-fold cross-fitting.
    """
    params = params or fr.ForestParams()
    lo, hi = trim
    if not 0 < lo < hi < 1:
        raise ValueError(f"trim bounds must satisfy 0 < lo < hi < 1, got {trim}")
    design, y, w, clusters = _arrays(table)
    if w.min() == w.max():
        raise ValueError("treatment has a single arm; propensity is not identified")
    p_e = replace(params, seed=derive_seed(params.seed, 1))
    p_m = replace(params, seed=derive_seed(params.seed, 2))
    X = design.matrix
    if crossfit == "oob":
        e_raw = fr.predict_oob(fr.fit_forest(X, w, clusters=clusters, params=p_e))
        m_hat = fr.predict_oob(fr.fit_forest(X, y, clusters=clusters, params=p_m))
    elif crossfit == "kfold":
        e_raw = _crossfit_predict(X, w, clusters, p_e, n_folds, p_e.seed)
        m_hat = _crossfit_predict(X, y, clusters, p_m, n_folds, p_m.seed)
    else:
        raise ValueError(f"crossfit must be 'oob' or 'kfold', got {crossfit!r}")
    e_hat = np.clip(e_raw, lo, hi)
    return NuisanceFits(e_hat=e_hat, m_hat=m_hat, trim=(lo, hi),
                        n_trimmed=int(np.sum(e_hat != e_raw)))


@dataclass(eq=False)
class CATEModel:
    forest: fr.ForestModel
    tau_hat: np.ndarray
    model_descriptor: str
    n_excluded: int
    feature_names: list


def fit_cate(table: ObservationTable, nuisance: NuisanceFits,
             params: fr.ForestParams | None = None) -> CATEModel:
    """Weighted forest on R-learner pseudo-outcomes.

    Rows with ``|W - e_hat| < 1e-6`` carry no information about the effect
    and are left out of the fit; their tau_hat comes from the full forest.
    """
    params = params or fr.ForestParams()
    design, y, w, clusters = _arrays(table)
    if nuisance.e_hat.shape != y.shape or nuisance.m_hat.shape != y.shape:
        raise ValueError("nuisance fits do not match the table")
    y_res = y - nuisance.m_hat
    w_res = w - nuisance.e_hat
    keep = np.abs(w_res) >= RESIDUAL_GUARD
    n_excl = int(np.sum(~keep))
    if n_excl > MAX_EXCLUDED_SHARE * y.size:
        raise ValueError(
            f"{n_excl} of {y.size} rows have a treatment residual below {RESIDUAL_GUARD}; "
            "the propensity model is degenerate"
        )
    pseudo = y_res[keep] / w_res[keep]
    weight = w_res[keep] ** 2
    p_tau = replace(params, seed=derive_seed(params.seed, 3))
    X = design.matrix
    model = fr.fit_forest(X[keep], pseudo, weight, clusters[keep], p_tau,
                          feature_names=design.feature_names)
    tau_hat = np.empty(y.size)
    tau_hat[keep] = fr.predict_oob(model)
    if n_excl:
        logger.info("excluded %d rows with near-zero treatment residual", n_excl)
        tau_hat[~keep] = fr.predict(model, X[~keep])
    descriptor = (f"honest regression forest on R-learner pseudo-outcomes; "
                  f"n_trees={p_tau.n_trees} min_leaf={p_tau.min_leaf} "
                  f"mtry={p_tau.mtry(X.shape[1])} subsample={p_tau.subsample_fraction}")
    return CATEModel(model, tau_hat, descriptor, n_excl, list(design.feature_names))


@dataclass(frozen=True)
class AteEstimate:
    ate: float
    se: float  # nan when fewer than 2 clusters
    n: int
    n_clusters: int

    @property
    def ci95(self) -> tuple:
        return (self.ate - Z95 * self.se, self.ate + Z95 * self.se)

    @property
    def ci90(self) -> tuple:
        return (self.ate - Z90 * self.se, self.ate + Z90 * self.se)

    @property
    def se_available(self) -> bool:
        return bool(np.isfinite(self.se))


def _tau_of(cate) -> np.ndarray:
    return np.asarray(cate.tau_hat if hasattr(cate, "tau_hat") else cate, dtype=float)


def dr_scores(table: ObservationTable, nuisance: NuisanceFits, cate) -> np.ndarray:
    y = table.y.astype(float)
    w = table.w.astype(float)
    e = nuisance.e_hat
    m = nuisance.m_hat
    tau = _tau_of(cate)
    if not (e.shape == m.shape == tau.shape == y.shape):
        raise ValueError("inputs are not aligned with the table")
    return tau + (w - e) / (e * (1.0 - e)) * (y - m - (w - e) * tau)


def _estimate(scores, clusters) -> AteEstimate:
    k = np.unique(clusters).size
    if k < 2:
        return AteEstimate(float(np.mean(scores)), float("nan"), int(scores.size), int(k))
    mean, se = cluster_se(scores, clusters)
    return AteEstimate(mean, se, int(scores.size), int(k))


def estimate_ate(table: ObservationTable, nuisance: NuisanceFits, cate) -> AteEstimate:
    """Doubly-robust ATE with cluster-robust standard error."""
    if table.n_clusters < 2:
        raise ValueError("ATE standard error needs at least 2 clusters")
    return _estimate(dr_scores(table, nuisance, cate), table.cluster)


@dataclass(frozen=True)
class GroupAte:
    value: object
    estimate: AteEstimate


def group_ate(table: ObservationTable, nuisance: NuisanceFits, cate, column: str,
              values=None) -> list:
    """Average the doubly-robust scores within each stratum of ``column``.

    The effect model is not refit per group. Empty strata are dropped with
    a warning; strata spanning a single cluster get ``se = nan``.
    """
    scores = dr_scores(table, nuisance, cate)
    out = []
    for s in stratify(table, column, values):
        if s.empty:
            continue
        est = _estimate(scores[s.rows], table.cluster[s.rows])
        if not est.se_available:
            logger.warning("group %s=%r spans one cluster; standard error unavailable", column, s.value)
        out.append(GroupAte(s.value, est))
    return out


@dataclass(frozen=True, eq=False)
class QuintileProfile:
    tau_mean: np.ndarray  # (5,)
    sizes: np.ndarray
    covariate_means: dict  # name -> (5,) array
    members: tuple  # row positions per quintile


def quintile_profile(cate, table: ObservationTable, covariates) -> QuintileProfile:
    """Rank rows by tau_hat (ties by row position) and cut five equal bins."""
    tau = _tau_of(cate)
    if tau.size < 5:
        raise ValueError("quintile profile needs at least 5 rows")
    design = encode(table)
    cols = {}
    for name in covariates:
        if name not in design.feature_names:
            raise KeyError(f"unknown covariate {name!r}; known: {design.feature_names}")
        cols[name] = design.matrix[:, design.feature_names.index(name)]
    order = np.argsort(tau, kind="stable")
    bins = np.array_split(order, 5)
    return QuintileProfile(
        tau_mean=np.array([tau[b].mean() for b in bins]),
        sizes=np.array([b.size for b in bins]),
        covariate_means={k: np.array([v[b].mean() for b in bins]) for k, v in cols.items()},
        members=tuple(np.sort(b) for b in bins),
    )


def moderator_importance(cate: CATEModel) -> list:
    """(feature, share) pairs sorted by descending split share."""
    imp = fr.split_importance(cate.forest)
    order = np.argsort(-imp.shares, kind="stable")
    return [(imp.feature_names[j], float(imp.shares[j])) for j in order]


@dataclass(frozen=True, eq=False)
class CateDistribution:
    counts: np.ndarray
    edges: np.ndarray
    mean: float
    sd: float
    min: float
    max: float
    deciles: np.ndarray  # 10%, 20%, ..., 90%


def cate_distribution(cate, bins: int = 30) -> CateDistribution:
    if bins < 1:
        raise ValueError("bins must be >= 1")
    tau = _tau_of(cate)
    lo, hi = float(tau.min()), float(tau.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    counts, edges = np.histogram(tau, bins=bins, range=(lo, hi))
    return CateDistribution(
        counts=counts,
        edges=edges,
        mean=float(tau.mean()),
        sd=float(tau.std(ddof=1)) if tau.size > 1 else 0.0,
        min=float(tau.min()),
        max=float(tau.max()),
        deciles=np.quantile(tau, np.arange(1, 10) / 10.0),
    )
