"""Synthetic child-level observation tables with known propensity and
treatment effect.

Base covariate distributions (all independent):

===================  ==========  ==========================================
column               level       distribution
===================  ==========  ==========================================
age                  row         uniform integer on 7..17
sex                  row         Bernoulli(0.5)
wealth               row         uniform integer on 1..5 (ordinal)
n_children           row         1 + Poisson(2.5)
dependency_ratio     cluster     Normal(78, 12)
education_spending   cluster     Normal(14, 5)
un_vote_g7           cluster     Uniform(0.5, 0.75)
x1..xp               row         Normal(0, 1)
===================  ==========  ==========================================

Every cluster also draws a random effect ``u ~ Normal(0, cluster_sd)`` and a
latent selection variable ``v ~ Normal(0, 1)``; neither is emitted in the
table. Outcome risk under the additive link is::

    base(x) = 0.2 + 0.02 z_age - 0.03 z_wealth + 0.02 z_dep + 0.02 z_children
              + 0.03 x1 + u + 0.05 s v + noise
    P(Y=1 | x, w) = clamp(base(x) + w tau(x), 0, 1)

where ``z_*`` standardizes by the population moments above and ``s`` is
``selection_strength``. The logistic link uses the same linear index
rescaled by 5 around logit(0.2), with ``tau`` on the log-odds scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import special

from .table import ColumnSpec, CovariateSchema, ObservationTable, from_frame

# population moments used for standardization
MOMENTS = {
    "age": (12.0, np.sqrt(10.0)),
    "sex": (0.5, 0.5),
    "wealth": (3.0, np.sqrt(2.0)),
    "n_children": (3.5, np.sqrt(2.5)),
    "dependency_ratio": (78.0, 12.0),
    "education_spending": (14.0, 5.0),
    "un_vote_g7": (0.625, 0.25 / np.sqrt(12.0)),
}
OUTCOME = "deprived"
TREATMENT = "imf_program"
CLUSTER = "country"
MAX_OUT_OF_RANGE = 0.05


@dataclass(frozen=True)
class Randomized:
    p0: float = 0.5


@dataclass(frozen=True)
class ProbitInX:
    """Row-level propensity Phi(intercept + slope * z(column))."""
    column: str = "wealth"
    intercept: float = 0.0
    slope: float = 0.5


@dataclass(frozen=True)
class ClusterProbit:
    """Cluster-level propensity; every row of a cluster shares one draw."""
    intercept: float = 0.0
    dependency_slope: float = 0.5
    vote_slope: float = 0.5


@dataclass(frozen=True)
class ConstantTau:
    value: float = 0.0


@dataclass(frozen=True)
class ThresholdTau:
    """tau = above if x[column] > cutoff else below."""
    column: str
    cutoff: float
    above: float
    below: float = 0.0


@dataclass(frozen=True)
class LinearTau:
    """tau = intercept + slope * z(column)."""
    column: str
    intercept: float = 0.0
    slope: float = 0.0


@dataclass(frozen=True)
class SyntheticSpec:
    n: int = 2000
    n_clusters: int = 40
    p: int = 2  # extra N(0,1) covariates x1..xp
    propensity: object = field(default_factory=Randomized)
    tau: object = field(default_factory=ConstantTau)
    noise_sd: float = 0.0
    cluster_sd: float = 0.03
    selection_strength: float = 0.0
    link: str = "additive"
    seed: int = 0

    def __post_init__(self):
        if not self.n >= self.n_clusters >= 2:
            raise ValueError("need n >= n_clusters >= 2")
        if self.p < 0:
            raise ValueError("p must be >= 0")
        if self.noise_sd < 0 or self.cluster_sd < 0:
            raise ValueError("noise_sd and cluster_sd must be >= 0")
        if self.link not in ("additive", "logistic"):
            raise ValueError("link must be 'additive' or 'logistic'")
        if not isinstance(self.propensity, (Randomized, ProbitInX, ClusterProbit)):
            raise ValueError(f"unknown propensity recipe {self.propensity!r}")
        if isinstance(self.propensity, Randomized) and not 0 < self.propensity.p0 < 1:
            raise ValueError("randomized p0 must lie in (0, 1)")
        if not isinstance(self.tau, (ConstantTau, ThresholdTau, LinearTau)):
            raise ValueError(f"unknown tau recipe {self.tau!r}")


@dataclass(frozen=True, eq=False)
class GroundTruth:
    e: np.ndarray  # true propensity (given the latent selection variable)
    tau: np.ndarray  # true per-row effect on the risk scale
    mu0: np.ndarray
    mu1: np.ndarray
    latent: np.ndarray  # per-row latent selection variable v
    ate: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"e": self.e, "tau": self.tau, "mu0": self.mu0,
                             "mu1": self.mu1, "latent": self.latent})


def schema_for(p: int) -> CovariateSchema:
    cols = [
        ColumnSpec(OUTCOME, "outcome", "binary"),
        ColumnSpec(TREATMENT, "treatment", "binary"),
        ColumnSpec(CLUSTER, "cluster", "categorical"),
        ColumnSpec("age", "covariate", "numeric"),
        ColumnSpec("sex", "covariate", "binary"),
        ColumnSpec("wealth", "covariate", "ordinal"),
        ColumnSpec("n_children", "covariate", "numeric"),
        ColumnSpec("dependency_ratio", "covariate", "numeric"),
        ColumnSpec("education_spending", "covariate", "numeric"),
        ColumnSpec("un_vote_g7", "covariate", "numeric"),
    ]
    cols += [ColumnSpec(f"x{j}", "covariate", "numeric") for j in range(1, p + 1)]
    return CovariateSchema(tuple(cols))


def _z(cov: dict, name: str) -> np.ndarray:
    if name in MOMENTS:
        mu, sd = MOMENTS[name]
        return (cov[name] - mu) / sd
    if name in cov:
        return cov[name]
    raise ValueError(f"unknown covariate {name!r}")


def _tau(recipe, cov) -> np.ndarray:
    n = cov["age"].shape[0]
    if isinstance(recipe, ConstantTau):
        return np.full(n, float(recipe.value))
    if isinstance(recipe, ThresholdTau):
        if recipe.column not in cov:
            raise ValueError(f"unknown covariate {recipe.column!r}")
        return np.where(cov[recipe.column] > recipe.cutoff, recipe.above, recipe.below).astype(float)
    return recipe.intercept + recipe.slope * _z(cov, recipe.column)


def generate(spec: SyntheticSpec) -> tuple[ObservationTable, GroundTruth]:
    """Draw a table and its ground truth; bit-identical for a fixed spec."""
    rng = np.random.Generator(np.random.Philox(key=np.array([spec.seed, 0x51A7], dtype=np.uint64)))
    n, K = spec.n, spec.n_clusters
    sizes = np.full(K, n // K)
    sizes[: n % K] += 1
    cl = np.repeat(np.arange(K), sizes)

    dep_k = rng.normal(78.0, 12.0, K)
    edu_k = rng.normal(14.0, 5.0, K)
    vote_k = rng.uniform(0.5, 0.75, K)
    u_k = rng.normal(0.0, spec.cluster_sd, K) if spec.cluster_sd > 0 else np.zeros(K)
    v_k = rng.normal(0.0, 1.0, K)

    cov = {
        "age": rng.integers(7, 18, n).astype(float),
        "sex": rng.integers(0, 2, n).astype(float),
        "wealth": rng.integers(1, 6, n).astype(float),
        "n_children": 1.0 + rng.poisson(2.5, n),
        "dependency_ratio": dep_k[cl],
        "education_spending": edu_k[cl],
        "un_vote_g7": vote_k[cl],
    }
    for j in range(1, spec.p + 1):
        cov[f"x{j}"] = rng.normal(0.0, 1.0, n)
    latent = v_k[cl]

    prop = spec.propensity
    if isinstance(prop, Randomized):
        e = np.full(n, prop.p0)
        w = (rng.random(n) < e).astype(np.int8)
    elif isinstance(prop, ProbitInX):
        e = special.ndtr(prop.intercept + prop.slope * _z(cov, prop.column))
        w = (rng.random(n) < e).astype(np.int8)
    else:
        idx_k = (prop.intercept
                 + prop.dependency_slope * (dep_k - 78.0) / 12.0
                 + prop.vote_slope * (vote_k - MOMENTS["un_vote_g7"][0]) / MOMENTS["un_vote_g7"][1]
                 + spec.selection_strength * v_k)
        e_k = special.ndtr(idx_k)
        e = e_k[cl]
        w = (rng.random(K) < e_k).astype(np.int8)[cl]
    if w.min() == w.max():
        raise ValueError("treatment draw produced a single arm; change seed or recipe")

    x1 = cov["x1"] if spec.p >= 1 else np.zeros(n)
    lin = (0.02 * _z(cov, "age") - 0.03 * _z(cov, "wealth") + 0.02 * _z(cov, "dependency_ratio")
           + 0.02 * _z(cov, "n_children") + 0.03 * x1 + u_k[cl]
           + 0.05 * spec.selection_strength * latent)
    if spec.noise_sd > 0:
        lin = lin + rng.normal(0.0, spec.noise_sd, n)
    tau_raw = _tau(spec.tau, cov)

    if spec.link == "additive":
        r0 = 0.2 + lin
        r1 = r0 + tau_raw
        outside = np.mean((r0 < 0) | (r0 > 1) | (r1 < 0) | (r1 > 1))
        if outside > MAX_OUT_OF_RANGE:
            raise ValueError(
                f"{outside:.1%} of rows have risk outside [0, 1] before clamping; "
                "the recipe is misconfigured"
            )
        mu0, mu1 = np.clip(r0, 0, 1), np.clip(r1, 0, 1)
        tau = tau_raw
    else:
        eta = special.logit(0.2) + 5.0 * lin
        mu0, mu1 = special.expit(eta), special.expit(eta + tau_raw)
        tau = mu1 - mu0

    risk = np.where(w == 1, mu1, mu0)
    y = (rng.random(n) < risk).astype(np.int8)

    frame = pd.DataFrame({OUTCOME: y, TREATMENT: w, CLUSTER: [f"C{k:03d}" for k in cl]})
    for name, vals in cov.items():
        frame[name] = vals.astype(np.int64) if name in ("age", "sex", "wealth", "n_children") else vals
    table = from_frame(frame, schema_for(spec.p), missing_policy="error", source="simulate")
    truth = GroundTruth(e=e, tau=tau, mu0=mu0, mu1=mu1, latent=latent, ate=float(np.mean(tau)))
    return table, truth


def spec_to_kv(spec: SyntheticSpec) -> dict:
    """Flat description of a spec, for headers and config hashing."""
    out = {k: str(getattr(spec, k)) for k in
           ("n", "n_clusters", "p", "noise_sd", "cluster_sd", "selection_strength", "link", "seed")}
    for prefix, recipe in (("propensity", spec.propensity), ("tau", spec.tau)):
        out[prefix] = type(recipe).__name__
        for k, v in vars(recipe).items():
            out[f"{prefix}.{k}"] = str(v)
    return out


def parse_propensity(text: str):
    """``randomized:0.5``, ``probit:wealth:0:0.5`` or ``cluster:0:0.5:0.5``."""
    kind, *args = text.split(":")
    if kind == "randomized":
        return Randomized(*(float(a) for a in args))
    if kind == "probit":
        col = args[0] if args else "wealth"
        return ProbitInX(col, *(float(a) for a in args[1:]))
    if kind == "cluster":
        return ClusterProbit(*(float(a) for a in args))
    raise ValueError(f"unknown propensity recipe {text!r}")


def parse_tau(text: str):
    """``constant:0.06``, ``threshold:age:11.5:0.04:0.09`` or ``linear:x1:0:0.05``."""
    kind, *args = text.split(":")
    if kind == "constant":
        return ConstantTau(*(float(a) for a in args))
    if kind == "threshold":
        return ThresholdTau(args[0], *(float(a) for a in args[1:]))
    if kind == "linear":
        return LinearTau(args[0], *(float(a) for a in args[1:]))
    raise ValueError(f"unknown tau recipe {text!r}")
