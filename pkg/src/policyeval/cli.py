"""Command-line front end: tag, simulate, balance, heckman, fit, report.

Settings come from a flat ``key = value`` config file (``--config``) and
are overridden by flags. Every artifact starts with ``#`` comment lines
naming the tool version, the command, a hash of the effective settings and
the seed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass

import numpy as np
import pandas as pd

from . import __version__
from . import causal as ca
from . import corpus as cp
from . import forest as fr
from . import simgen as sg
from . import stats as st
from .config import ConfigError, config_hash, read_kv
from .table import (ColumnSpec, CovariateSchema, SchemaError, balance_table, encode,
                    from_frame, ingest, read_csv_text)

logger = logging.getLogger("policyeval")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_SCHEMA = 4
EXIT_ESTIMATION = 5

LAMBDA_COLUMN = "political_will_lambda"
PATH_KEYS = ("in", "out", "fit", "dict", "config")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    values: dict
    command: str

    def get(self, key, default=None):
        v = self.values.get(key)
        return default if v is None or v == "" else v

    def require(self, key):
        v = self.get(key)
        if v is None:
            raise UsageError(f"missing required setting {key!r}")
        return v

    def get_int(self, key, default=None):
        v = self.get(key)
        try:
            return default if v is None else int(v)
        except ValueError as exc:
            raise UsageError(f"setting {key!r} must be an integer, got {v!r}") from exc

    def get_float(self, key, default=None):
        v = self.get(key)
        try:
            return default if v is None else float(v)
        except ValueError as exc:
            raise UsageError(f"setting {key!r} must be a number, got {v!r}") from exc

    def get_bool(self, key, default=False):
        v = self.get(key)
        if v is None:
            return default
        if v.lower() in ("1", "true", "on", "yes"):
            return True
        if v.lower() in ("0", "false", "off", "no"):
            return False
        raise UsageError(f"setting {key!r} must be on/off, got {v!r}")

    @property
    def seed(self) -> int:
        seed = self.get_int("seed")
        if seed is None:
            raise UsageError("a seed is required (--seed or 'seed' in the config)")
        if not 0 <= seed < 2**63:
            raise UsageError("seed must be a non-negative 63-bit integer")
        return seed

    def schema(self) -> CovariateSchema:
        return CovariateSchema.from_kv(self.values)

    def forest_params(self) -> fr.ForestParams:
        return fr.ForestParams(
            n_trees=self.get_int("trees", 1000),
            subsample_fraction=self.get_float("subsample", 0.5),
            honesty_fraction=self.get_float("honesty", 0.5),
            min_leaf=self.get_int("min_leaf", 5),
            max_features=self.get_int("max_features"),
            seed=self.seed,
            cluster_subsampling=self.get_bool("cluster_subsampling", True),
            n_jobs=self.get_int("n_jobs", 1),
        )

    def trim(self) -> tuple:
        text = self.get("trim", "0.05,0.95")
        try:
            lo, hi = (float(v) for v in text.split(","))
        except ValueError as exc:
            raise UsageError(f"trim must be 'lo,hi', got {text!r}") from exc
        return lo, hi


_FLAG_KEYS = {
    "config": "config", "seed": "seed", "input": "in", "out": "out", "fit_dir": "fit",
    "dict": "dict", "dict_mode": "dict_mode", "trees": "trees", "trim": "trim",
    "group": "group", "quintile_covariates": "quintile_covariates", "bins": "bins",
    "missing_policy": "missing_policy", "heckman": "heckman", "by": "by",
    "n": "simulate.n", "clusters": "simulate.clusters", "p": "simulate.p",
    "propensity": "simulate.propensity", "tau": "simulate.tau",
    "selection_strength": "simulate.selection_strength",
}


def build_config(args) -> RunConfig:
    values: dict = {}
    if args.config:
        if not os.path.isfile(args.config):
            raise FileNotFoundError(f"config file not found: {args.config}")
        values.update(read_kv(args.config))
    for attr, key in _FLAG_KEYS.items():
        v = getattr(args, attr, None)
        if v is not None and attr != "config":
            values[key] = str(v) if not isinstance(v, bool) else ("on" if v else "off")
    return RunConfig(values, args.command)


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def provenance(cfg: RunConfig, inputs=(), seed=None) -> list:
    items = {k: v for k, v in cfg.values.items() if k not in PATH_KEYS}
    items["command"] = cfg.command
    for i, path in enumerate(inputs):
        items[f"input{i}.sha256"] = _digest(path)
    if seed is None:
        seed = cfg.get("seed", "none")
    lines = [f"policyeval {__version__} command={cfg.command}",
             f"config_hash={config_hash(items)} seed={seed}"]
    return lines


def _out_dir(cfg: RunConfig) -> str:
    out = cfg.require("out")
    os.makedirs(out, exist_ok=True)
    return out


def _check_input(path):
    if not os.path.isfile(path):
        raise FileNotFoundError(f"input file not found: {path}")
    if not os.access(path, os.R_OK):
        raise PermissionError(f"input file not readable: {path}")


def _write_csv(path, header, columns, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for r in rows:
            writer.writerow([_fmt(v) for v in r])


def _write_text(path, header, body):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        fh.write(body)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def _load_table(cfg: RunConfig, path=None):
    path = path or cfg.require("in")
    _check_input(path)
    return ingest(path, cfg.schema(), cfg.get("missing_policy", "drop_row")), path


# --------------------------------------------------------------------------
# subcommands


def cmd_tag(cfg: RunConfig) -> int:
    path = cfg.require("in")
    _check_input(path)
    if cfg.get("dict"):
        _check_input(cfg.get("dict"))
        lex = cp.EducationLexicon.from_file(cfg.get("dict"))
    else:
        lex = cp.EducationLexicon.default(cfg.get("dict_mode", "corrected"))
    try:
        corpus = cp.read_corpus(path)
    except ValueError as exc:
        raise SchemaError(str(exc)) from exc
    tagged = cp.tag_corpus(corpus, lex)
    inputs = [path] + ([cfg.get("dict")] if cfg.get("dict") else [])
    header = provenance(cfg, inputs) + [f"lexicon_mode={lex.mode}"]
    out = _out_dir(cfg)
    cp.write_tagged(os.path.join(out, "tagged.csv"), corpus, tagged, header)
    counts = cp.country_year_counts(tagged, corpus)
    _write_csv(os.path.join(out, "counts.csv"), header,
               ["country", "year", "n_conditions", "n_education"],
               [(r.country, "" if r.year is None else r.year, r.n_conditions, r.n_education)
                for r in counts])
    total = counts[-1]
    print(f"tagged {total.n_conditions} conditions, {total.n_education} education policies")
    return EXIT_OK


def cmd_simulate(cfg: RunConfig) -> int:
    spec = sg.SyntheticSpec(
        n=cfg.get_int("simulate.n", 8000),
        n_clusters=cfg.get_int("simulate.clusters", 40),
        p=cfg.get_int("simulate.p", 2),
        propensity=sg.parse_propensity(cfg.get("simulate.propensity", "cluster:0:0.5:0.5")),
        tau=sg.parse_tau(cfg.get("simulate.tau", "constant:0.06")),
        noise_sd=cfg.get_float("simulate.noise_sd", 0.0),
        cluster_sd=cfg.get_float("simulate.cluster_sd", 0.03),
        selection_strength=cfg.get_float("simulate.selection_strength", 0.0),
        link=cfg.get("simulate.link", "additive"),
        seed=cfg.seed,
    )
    table, truth = sg.generate(spec)
    header = provenance(cfg, seed=spec.seed) + [f"true_ate={truth.ate!r}"]
    out = _out_dir(cfg)
    frame = table.to_frame()
    _write_frame(os.path.join(out, "data.csv"), header, frame)
    tf = truth.to_frame()
    tf.insert(0, "row_id", table.row_id)
    _write_frame(os.path.join(out, "truth.csv"), header, tf)
    _write_text(os.path.join(out, "schema.cfg"), header, table.schema.dumps())
    print(f"simulated n={spec.n} clusters={spec.n_clusters} true_ate={truth.ate:.6f}")
    return EXIT_OK


def _write_frame(path, header, frame: pd.DataFrame):
    rows = frame.itertuples(index=False, name=None)
    _write_csv(path, header, list(frame.columns), rows)


def cmd_balance(cfg: RunConfig) -> int:
    table, path = _load_table(cfg)
    bt = balance_table(table, by=cfg.get("by"))
    header = provenance(cfg, [path])
    out = _out_dir(cfg)
    frame = bt.to_frame()
    _write_frame(os.path.join(out, "balance.csv"), header, frame)
    _write_text(os.path.join(out, "balance.txt"), header, bt.to_text())
    sys.stdout.write(bt.to_text())
    return EXIT_OK


@dataclass
class HeckmanResult:
    fit: st.ProbitFit
    terms: list
    lam: np.ndarray  # per table row
    level: str


def heckman_lambda(table, covariates, level="cluster") -> HeckmanResult:
    """Probit of treatment on ``covariates`` and the per-row inverse Mills ratio.

    At ``level="cluster"`` one observation per cluster enters the probit;
    covariates and treatment must then be constant within clusters.
    """
    design = encode(table)
    missing = [c for c in covariates if c not in design.feature_names]
    if missing:
        raise SchemaError(f"unknown selection covariates {missing}")
    cols = [design.feature_names.index(c) for c in covariates]
    Z = design.matrix[:, cols]
    T = table.w.astype(int)
    if level == "cluster":
        K = table.n_clusters
        first = np.full(K, -1)
        for i in range(table.n - 1, -1, -1):
            first[table.cluster[i]] = i
        Zk, Tk = Z[first], T[first]
        if np.any(Zk[table.cluster] != Z) or np.any(Tk[table.cluster] != T):
            raise SchemaError("cluster-level selection needs treatment and selection "
                              "covariates constant within clusters; use heckman.level = row")
        Zd = np.column_stack([np.ones(K), Zk])
        fit = st.fit_probit(Zd, Tk)
        lam = st.inverse_mills(fit, Zd, Tk).lam[table.cluster]
    elif level == "row":
        Zd = np.column_stack([np.ones(table.n), Z])
        fit = st.fit_probit(Zd, T)
        lam = st.inverse_mills(fit, Zd, T).lam
    else:
        raise UsageError(f"heckman.level must be 'cluster' or 'row', got {level!r}")
    return HeckmanResult(fit, ["(intercept)"] + list(covariates), lam, level)


def _selection_covariates(cfg: RunConfig, table) -> list:
    text = cfg.get("heckman.covariates")
    if text:
        return [c.strip() for c in text.split(",") if c.strip()]
    # default: covariates constant within every cluster
    design = encode(table)
    out = []
    for j, name in enumerate(design.feature_names):
        col = design.matrix[:, j]
        lo = np.full(table.n_clusters, np.inf)
        hi = np.full(table.n_clusters, -np.inf)
        np.minimum.at(lo, table.cluster, col)
        np.maximum.at(hi, table.cluster, col)
        if np.all(lo == hi) and name != LAMBDA_COLUMN:
            out.append(name)
    if not out:
        raise UsageError("no cluster-level covariates found; set heckman.covariates")
    return out


def _with_lambda(table, lam):
    frame = table.to_frame()
    frame[LAMBDA_COLUMN] = lam
    schema = table.schema.with_column(ColumnSpec(LAMBDA_COLUMN, "covariate", "numeric"))
    return from_frame(frame, schema, "error", source="heckman"), schema


def cmd_heckman(cfg: RunConfig) -> int:
    table, path = _load_table(cfg)
    covs = _selection_covariates(cfg, table)
    res = heckman_lambda(table, covs, cfg.get("heckman.level", "cluster"))
    header = provenance(cfg, [path]) + [f"level={res.level} converged={res.fit.converged}"]
    out = _out_dir(cfg)

    raw = read_csv_text(path)
    if LAMBDA_COLUMN in raw.columns:
        raise SchemaError(f"input already has a {LAMBDA_COLUMN} column")
    lam_col = np.full(len(raw), "", dtype=object)
    lam_col[table.row_id] = [repr(float(v)) for v in res.lam]
    raw[LAMBDA_COLUMN] = lam_col
    _write_frame(os.path.join(out, "data.csv"), header, raw)
    schema = table.schema.with_column(ColumnSpec(LAMBDA_COLUMN, "covariate", "numeric"))
    _write_text(os.path.join(out, "schema.cfg"), header, schema.dumps())

    se = res.fit.se
    rows = [(t, g, s, g / s) for t, g, s in zip(res.terms, res.fit.gamma, se)]
    _write_csv(os.path.join(out, "probit.csv"), header, ["term", "coef", "se", "z"], rows)
    lines = [f"{t:<24} {g:>10.3f} ({s:.3f})" for t, g, s, _ in rows]
    n_obs = table.n_clusters if res.level == "cluster" else table.n
    lines.append(f"{'observations':<24} {n_obs:>10d}")
    lines.append(f"{'log likelihood':<24} {res.fit.loglik:>10.3f}")
    body = "\n".join(lines) + "\n"
    _write_text(os.path.join(out, "probit.txt"), header, body)
    sys.stdout.write(body)
    return EXIT_OK


def _ate_rows(label, est: ca.AteEstimate):
    lo95, hi95 = est.ci95
    lo90, hi90 = est.ci90
    return (label, est.ate, est.se, lo95, hi95, lo90, hi90, est.n, est.n_clusters)


ATE_COLUMNS = ["estimate", "ate", "se", "ci95_lo", "ci95_hi", "ci90_lo", "ci90_hi", "n", "n_clusters"]


def _ate_text(rows, label="estimate") -> str:
    lines = [f"{label:<16} {'ate':>9} {'se':>9} {'95% CI':>21} {'90% CI':>21} {'n':>8} {'K':>5}"]
    for r in rows:
        label, ate, se, l95, h95, l90, h90, n, k = r
        lines.append(f"{str(label):<16} {ate:>9.4f} {se:>9.4f} "
                     f"{f'[{l95:.4f}, {h95:.4f}]':>21} {f'[{l90:.4f}, {h90:.4f}]':>21} {n:>8d} {k:>5d}")
    return "\n".join(lines) + "\n"


def cmd_fit(cfg: RunConfig) -> int:
    table, path = _load_table(cfg)
    if cfg.get_bool("heckman", False):
        covs = _selection_covariates(cfg, table)
        res = heckman_lambda(table, covs, cfg.get("heckman.level", "cluster"))
        table, _ = _with_lambda(table, res.lam)
    params = cfg.forest_params()
    nuis = ca.fit_nuisance(table, params, trim=cfg.trim(), crossfit=cfg.get("crossfit", "oob"))
    cate = ca.fit_cate(table, nuis, params)
    est = ca.estimate_ate(table, nuis, cate)
    scores = ca.dr_scores(table, nuis, cate)

    header = provenance(cfg, [path], seed=params.seed)
    out = _out_dir(cfg)
    rows = zip(table.row_id, np.asarray(table.cluster_labels)[table.cluster],
               nuis.e_hat, nuis.m_hat, cate.tau_hat, scores)
    _write_csv(os.path.join(out, "rowwise.csv"), header,
               ["row_id", "cluster", "e_hat", "m_hat", "tau_hat", "score"], rows)
    ate_row = _ate_rows("ATE", est)
    _write_csv(os.path.join(out, "ate.csv"), header, ATE_COLUMNS, [ate_row])
    _write_text(os.path.join(out, "ate.txt"), header,
                _ate_text([ate_row]) + f"trimmed={nuis.n_trimmed} excluded={cate.n_excluded}\n"
                + f"model: {cate.model_descriptor}\n")
    blob = fr.dumps_forest(cate.forest, meta={"provenance": header})
    with open(os.path.join(out, "cate_forest.bin"), "wb") as fh:
        fh.write(blob)
    print(f"ATE {est.ate:.4f} (se {est.se:.4f}), 95% CI [{est.ci95[0]:.4f}, {est.ci95[1]:.4f}]")
    return EXIT_OK


def cmd_report(cfg: RunConfig) -> int:
    fit_dir = cfg.require("fit")
    data_path = cfg.require("in")
    _check_input(data_path)
    rowwise_path = os.path.join(fit_dir, "rowwise.csv")
    forest_path = os.path.join(fit_dir, "cate_forest.bin")
    for p in (rowwise_path, forest_path):
        _check_input(p)
    table = ingest(data_path, cfg.schema(), cfg.get("missing_policy", "drop_row"))
    rw = read_csv_text(rowwise_path)
    if rw["row_id"].astype(np.int64).tolist() != table.row_id.tolist():
        raise SchemaError("fit outputs do not match the data rows")
    e_hat = rw["e_hat"].astype(float).to_numpy()
    nuis = ca.NuisanceFits(e_hat=e_hat, m_hat=rw["m_hat"].astype(float).to_numpy())
    tau = rw["tau_hat"].astype(float).to_numpy()
    model = fr.load_forest(forest_path)
    cate = ca.CATEModel(model, tau, "", 0, list(model.feature_names))

    header = provenance(cfg, [data_path, rowwise_path, forest_path])
    out = _out_dir(cfg)
    summary = []

    group = cfg.get("group")
    if group:
        groups = ca.group_ate(table, nuis, cate, group)
        rows = [_ate_rows(g.value, g.estimate) for g in groups]
        _write_csv(os.path.join(out, "group_ate.csv"), header, [group] + ATE_COLUMNS[1:],
                   rows)
        text = _ate_text(rows, group)
        _write_text(os.path.join(out, "group_ate.txt"), header, text)
        summary.append(text)

    qcovs = cfg.get("quintile_covariates")
    ranking = ca.moderator_importance(cate)
    if qcovs:
        names = [c.strip() for c in qcovs.split(",") if c.strip()]
    else:
        names = [name for name, _ in ranking[:7]]
    try:
        prof = ca.quintile_profile(cate, table, names)
    except KeyError as exc:
        raise SchemaError(str(exc)) from exc
    qrows = [("tau_hat",) + tuple(prof.tau_mean)]
    qrows += [(k,) + tuple(v) for k, v in prof.covariate_means.items()]
    qrows.append(("n",) + tuple(int(s) for s in prof.sizes))
    _write_csv(os.path.join(out, "quintiles.csv"), header,
               ["variable", "Q1", "Q2", "Q3", "Q4", "Q5"], qrows)

    dist = ca.cate_distribution(cate, cfg.get_int("bins", 30))
    hist = [(dist.edges[i], dist.edges[i + 1], int(c)) for i, c in enumerate(dist.counts)]
    _write_csv(os.path.join(out, "cate_hist.csv"), header, ["lo", "hi", "count"], hist)
    srows = [("mean", dist.mean), ("sd", dist.sd), ("min", dist.min), ("max", dist.max)]
    srows += [(f"q{10 * (i + 1)}", q) for i, q in enumerate(dist.deciles)]
    _write_csv(os.path.join(out, "cate_summary.csv"), header, ["stat", "value"], srows)

    _write_csv(os.path.join(out, "importance.csv"), header, ["rank", "feature", "share"],
               [(i + 1, name, share) for i, (name, share) in enumerate(ranking)])
    summary.append("".join(f"{i + 1:>3} {n:<24} {s:.4f}\n" for i, (n, s) in enumerate(ranking)))
    sys.stdout.write("\n".join(summary))
    return EXIT_OK


COMMANDS = {
    "tag": cmd_tag,
    "simulate": cmd_simulate,
    "balance": cmd_balance,
    "heckman": cmd_heckman,
    "fit": cmd_fit,
    "report": cmd_report,
}


def make_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config")
    common.add_argument("--seed", type=int)
    common.add_argument("--in", dest="input")
    common.add_argument("--out")
    common.add_argument("--missing-policy", choices=("drop_row", "error"))
    common.add_argument("-v", "--verbose", action="store_true")

    forest_opts = _Parser(add_help=False)
    forest_opts.add_argument("--trees", type=int)
    forest_opts.add_argument("--trim")

    parser = _Parser(prog="policyeval", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"policyeval {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("tag", parents=[common], help="tag a policy-condition corpus")
    p.add_argument("--dict")
    p.add_argument("--dict-mode", choices=cp.MODES)

    p = sub.add_parser("simulate", parents=[common], help="write a synthetic dataset")
    p.add_argument("--n", type=int)
    p.add_argument("--clusters", type=int)
    p.add_argument("--p", type=int)
    p.add_argument("--propensity")
    p.add_argument("--tau")
    p.add_argument("--selection-strength", type=float)

    p = sub.add_parser("balance", parents=[common], help="covariate balance by arm")
    p.add_argument("--by")

    sub.add_parser("heckman", parents=[common], help="probit first stage and Mills ratio")

    p = sub.add_parser("fit", parents=[common, forest_opts], help="nuisance, CATE and ATE")
    p.add_argument("--heckman", action="store_true", default=None)

    p = sub.add_parser("report", parents=[common], help="group ATEs, quintiles, histogram")
    p.add_argument("--fit", dest="fit_dir")
    p.add_argument("--group")
    p.add_argument("--quintile-covariates")
    p.add_argument("--bins", type=int)
    return parser


def _fail(code: int, kind: str, message: str) -> int:
    one_line = " ".join(str(message).split())
    sys.stderr.write(f"policyeval: error code={code} kind={kind} msg={json.dumps(one_line)}\n")
    return code


def main(argv=None) -> int:
    try:
        args = make_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        return COMMANDS[args.command](cfg)
    except (UsageError, ConfigError) as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        return _fail(EXIT_IO, "io", str(exc))
    except SchemaError as exc:
        return _fail(EXIT_SCHEMA, "schema", str(exc))
    except (ValueError, np.linalg.LinAlgError) as exc:
        return _fail(EXIT_ESTIMATION, "estimation", str(exc))
    except Exception as exc:  # noqa: BLE001
        return _fail(EXIT_INTERNAL, "internal", f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
