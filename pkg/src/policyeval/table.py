"""Observation tables: schema, CSV ingestion, covariate encoding, balance
tables and stratification."""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .config import ConfigError, dump_kv, parse_kv

logger = logging.getLogger(__name__)

ROLES = ("outcome", "treatment", "covariate", "cluster", "ignore")
KINDS = ("binary", "numeric", "ordinal", "categorical")
MISSING_TOKENS = ("", "NA", "NaN", "nan", "null")
MISSING_POLICIES = ("drop_row", "error")


class SchemaError(ValueError):
    """The data or its declared schema are inconsistent."""


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    role: str
    kind: str
    levels: tuple | None = None  # declared level order for ordinal columns


@dataclass(frozen=True)
class CovariateSchema:
    columns: tuple

    def __post_init__(self):
        names = [c.name for c in self.columns]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise SchemaError(f"duplicate column names: {dupes}")
        for c in self.columns:
            if c.role not in ROLES:
                raise SchemaError(f"column {c.name}: unknown role {c.role!r}")
            if c.kind not in KINDS:
                raise SchemaError(f"column {c.name}: unknown kind {c.kind!r}")
        for role in ("outcome", "treatment", "cluster"):
            found = [c.name for c in self.columns if c.role == role]
            if len(found) != 1:
                raise SchemaError(f"schema needs exactly one {role} column, found {found}")
        for role in ("outcome", "treatment"):
            if self.column(self._role(role)).kind != "binary":
                raise SchemaError(f"{role} column must be binary")

    def _role(self, role):
        return next(c.name for c in self.columns if c.role == role)

    @property
    def outcome(self) -> str:
        return self._role("outcome")

    @property
    def treatment(self) -> str:
        return self._role("treatment")

    @property
    def cluster(self) -> str:
        return self._role("cluster")

    @property
    def covariates(self) -> list:
        return [c for c in self.columns if c.role == "covariate"]

    @property
    def names(self) -> list:
        return [c.name for c in self.columns]

    def column(self, name) -> ColumnSpec:
        for c in self.columns:
            if c.name == name:
                return c
        raise KeyError(name)

    def with_column(self, spec: ColumnSpec) -> "CovariateSchema":
        kept = tuple(c for c in self.columns if c.name != spec.name)
        return CovariateSchema(kept + (spec,))

    @classmethod
    def from_kv(cls, items: dict) -> "CovariateSchema":
        cols: dict = {}
        for key, value in items.items():
            if not key.startswith("column."):
                continue
            parts = key.split(".")
            if len(parts) != 3 or parts[2] not in ("role", "kind", "levels"):
                raise ConfigError(f"bad schema key {key!r}")
            cols.setdefault(parts[1], {})[parts[2]] = value
        specs = []
        for name, attrs in cols.items():
            if "role" not in attrs:
                raise SchemaError(f"column {name}: missing role")
            kind = attrs.get("kind", "numeric")
            levels = attrs.get("levels")
            if levels is not None:
                levels = tuple(v.strip() for v in levels.split(","))
            specs.append(ColumnSpec(name, attrs["role"], kind, levels))
        return cls(tuple(specs))

    @classmethod
    def parse(cls, text: str) -> "CovariateSchema":
        return cls.from_kv(parse_kv(text))

    def to_kv(self) -> dict:
        out = {}
        for c in self.columns:
            out[f"column.{c.name}.role"] = c.role
            out[f"column.{c.name}.kind"] = c.kind
            if c.levels is not None:
                out[f"column.{c.name}.levels"] = ",".join(c.levels)
        return out

    def dumps(self) -> str:
        return dump_kv(self.to_kv())


@dataclass(frozen=True, eq=False)
class ObservationTable:
    schema: CovariateSchema
    covariates: pd.DataFrame  # covariate columns in schema order, clean values
    y: np.ndarray
    w: np.ndarray
    cluster: np.ndarray  # dense 0..K-1
    cluster_labels: tuple  # cluster index -> original label
    weight: np.ndarray
    row_id: np.ndarray  # stable ids (source row positions)
    dropped: int = 0

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_labels)

    def column(self, name) -> np.ndarray:
        if name == self.schema.outcome:
            return self.y
        if name == self.schema.treatment:
            return self.w
        if name == self.schema.cluster:
            return np.asarray(self.cluster_labels, dtype=object)[self.cluster]
        if name in self.covariates.columns:
            return self.covariates[name].to_numpy()
        raise KeyError(f"no column {name!r}")

    def take(self, idx) -> "ObservationTable":
        idx = np.asarray(idx, dtype=np.int64)
        used, dense = np.unique(self.cluster[idx], return_inverse=True)
        return replace(
            self,
            covariates=self.covariates.iloc[idx].reset_index(drop=True),
            y=self.y[idx],
            w=self.w[idx],
            cluster=dense.astype(np.int64),
            cluster_labels=tuple(self.cluster_labels[k] for k in used),
            weight=self.weight[idx],
            row_id=self.row_id[idx],
            dropped=0,
        )

    def to_frame(self) -> pd.DataFrame:
        """Columns in schema order; ignore-role columns are not retained."""
        data = {}
        for c in self.schema.columns:
            if c.role != "ignore":
                data[c.name] = self.column(c.name)
        return pd.DataFrame(data)


def _is_missing(series: pd.Series) -> np.ndarray:
    vals = series.to_numpy(dtype=object)
    out = pd.isna(series).to_numpy()
    for tok in MISSING_TOKENS:
        out |= vals == tok
    return out


def _as_float(series: pd.Series, name: str, source: str) -> np.ndarray:
    vals = pd.to_numeric(series, errors="coerce").to_numpy(dtype=float)
    bad = np.flatnonzero(~np.isfinite(vals))
    if bad.size:
        r = bad[0]
        raise SchemaError(
            f"{source}: row {r + 1}, column {name!r}: value {series.iloc[r]!r} is not numeric"
        )
    return vals


def _as_binary(series, name, source) -> np.ndarray:
    vals = _as_float(series, name, source)
    bad = np.flatnonzero((vals != 0) & (vals != 1))
    if bad.size:
        r = bad[0]
        raise SchemaError(
            f"{source}: row {r + 1}, column {name!r}: value {series.iloc[r]!r} is not binary (0/1)"
        )
    return vals.astype(np.int8)


def from_frame(frame: pd.DataFrame, schema: CovariateSchema,
               missing_policy: str = "drop_row", source: str = "<frame>") -> ObservationTable:
    """Validate ``frame`` against ``schema`` and build an ObservationTable."""
    if missing_policy not in MISSING_POLICIES:
        raise ValueError(f"missing_policy must be one of {MISSING_POLICIES}")
    have = list(frame.columns)
    absent = [n for n in schema.names if n not in have]
    extra = [n for n in have if n not in schema.names]
    if absent or extra:
        raise SchemaError(f"{source}: header mismatch; missing {absent}, unexpected {extra}")
    frame = frame.reset_index(drop=True)
    used = [c.name for c in schema.columns if c.role != "ignore"]
    miss = np.zeros(len(frame), dtype=bool)
    for name in used:
        col_miss = _is_missing(frame[name])
        if col_miss.any() and missing_policy == "error":
            r = int(np.flatnonzero(col_miss)[0])
            raise SchemaError(f"{source}: row {r + 1}, column {name!r}: missing value")
        miss |= col_miss
    keep = np.flatnonzero(~miss)
    dropped = int(miss.sum())
    if dropped:
        logger.info("%s: dropped %d row(s) with missing values", source, dropped)
    frame = frame.iloc[keep].reset_index(drop=True)
    if len(frame) == 0:
        raise SchemaError(f"{source}: table is empty")

    y = _as_binary(frame[schema.outcome], schema.outcome, source)
    w = _as_binary(frame[schema.treatment], schema.treatment, source)
    labels = frame[schema.cluster].astype(str).to_numpy()
    uniq, dense = np.unique(labels, return_inverse=True)

    covs = {}
    for c in schema.covariates:
        s = frame[c.name]
        if c.kind == "numeric":
            covs[c.name] = _as_float(s, c.name, source)
        elif c.kind == "binary":
            covs[c.name] = _as_binary(s, c.name, source)
        elif c.kind == "ordinal" and c.levels is None:
            vals = _as_float(s, c.name, source)
            if np.any(vals != np.round(vals)):
                raise SchemaError(f"{source}: column {c.name!r}: ordinal values must be integers")
            covs[c.name] = vals.astype(np.int64)
        else:
            vals = s.astype(str).to_numpy(dtype=object)
            if c.levels is not None:
                bad = [v for v in vals if v not in c.levels]
                if bad:
                    raise SchemaError(f"{source}: column {c.name!r}: undeclared level {bad[0]!r}")
            covs[c.name] = vals
    return ObservationTable(
        schema=schema,
        covariates=pd.DataFrame(covs, columns=[c.name for c in schema.covariates]),
        y=y,
        w=w,
        cluster=dense.astype(np.int64),
        cluster_labels=tuple(str(u) for u in uniq),
        weight=np.ones(len(frame)),
        row_id=keep.astype(np.int64),
        dropped=dropped,
    )


def read_csv_text(path) -> pd.DataFrame:
    """RFC 4180 CSV, every field as text, ``#`` comment lines skipped."""
    with open(path, encoding="utf-8", newline="") as fh:
        text = fh.read()
    body = "".join(line for line in io.StringIO(text, newline="") if not line.startswith("#"))
    return pd.read_csv(io.StringIO(body), dtype=str, keep_default_na=False)


def ingest(path, schema: CovariateSchema, missing_policy: str = "drop_row") -> ObservationTable:
    try:
        frame = read_csv_text(path)
    except pd.errors.EmptyDataError as exc:
        raise SchemaError(f"{path}: empty file") from exc
    return from_frame(frame, schema, missing_policy, source=str(path))


@dataclass
class Design:
    matrix: np.ndarray
    feature_names: list
    mapping: dict = field(default_factory=dict)


def encode(table: ObservationTable, mapping: dict | None = None) -> Design:
    """Numeric design matrix for the covariate columns.

    Ordinal columns become integer codes (position in the declared level
    list, or the integer value itself when no levels are declared).
    Categorical columns are one-hot encoded without their lexicographically
    first level. Pass a previous ``Design.mapping`` to reuse its levels.
    """
    fresh = mapping is None
    mapping = {} if fresh else mapping
    cols, names = [], []
    for c in table.schema.covariates:
        vals = table.covariates[c.name].to_numpy()
        if c.kind in ("numeric", "binary") or (c.kind == "ordinal" and c.levels is None):
            cols.append(vals.astype(float))
            names.append(c.name)
        elif c.kind == "ordinal":
            lookup = {lv: i for i, lv in enumerate(c.levels)}
            cols.append(np.array([lookup[v] for v in vals], dtype=float))
            names.append(c.name)
        else:
            if fresh:
                mapping[c.name] = tuple(sorted(set(vals)))
            elif c.name not in mapping:
                raise KeyError(f"mapping has no entry for {c.name!r}")
            levels = mapping[c.name]
            unseen = sorted(set(vals) - set(levels))
            if unseen:
                raise ValueError(f"column {c.name!r}: unseen level(s) {unseen}")
            for lv in levels[1:]:
                cols.append((vals == lv).astype(float))
                names.append(f"{c.name}={lv}")
    matrix = np.column_stack(cols) if cols else np.empty((table.n, 0))
    return Design(np.ascontiguousarray(matrix, dtype=float), names, mapping)


# --------------------------------------------------------------------------
# balance tables


@dataclass(frozen=True)
class BalanceRow:
    variable: str
    level: str | None  # None for mean/sd rows
    stat: str  # "mean_sd" or "count_pct"
    arm0: tuple
    arm1: tuple


@dataclass(frozen=True)
class BalanceTable:
    by: str
    n: tuple  # rows per arm (0, 1)
    rows: tuple

    def to_frame(self) -> pd.DataFrame:
        recs = []
        for r in self.rows:
            recs.append({
                "variable": r.variable,
                "level": "" if r.level is None else r.level,
                "stat": r.stat,
                "arm0_a": r.arm0[0], "arm0_b": r.arm0[1],
                "arm1_a": r.arm1[0], "arm1_b": r.arm1[1],
            })
        return pd.DataFrame(recs, columns=["variable", "level", "stat",
                                           "arm0_a", "arm0_b", "arm1_a", "arm1_b"])

    def to_text(self) -> str:
        def cell(stat, pair):
            a, b = pair
            if stat == "mean_sd":
                return f"{a:.2f} ({b:.2f})"
            return f"{int(a)} ({b:.2f})"

        lines = [("", f"{self.by} = 0", f"{self.by} = 1"),
                 ("n", str(self.n[0]), str(self.n[1]))]
        seen = set()
        for r in self.rows:
            if r.stat == "mean_sd":
                lines.append((f"{r.variable} (mean (sd))", cell(r.stat, r.arm0), cell(r.stat, r.arm1)))
            else:
                if r.variable not in seen:
                    lines.append((f"{r.variable} (%)", "", ""))
                    seen.add(r.variable)
                lines.append((f"  {r.level}", cell(r.stat, r.arm0), cell(r.stat, r.arm1)))
        widths = [max(len(line[i]) for line in lines) for i in range(3)]
        out = []
        for line in lines:
            out.append(f"{line[0]:<{widths[0]}}  {line[1]:>{widths[1]}}  {line[2]:>{widths[2]}}".rstrip())
        return "\n".join(out) + "\n"


def _mean_sd(x) -> tuple:
    x = np.asarray(x, dtype=float)
    sd = float(np.std(x, ddof=1)) if x.size > 1 else float("nan")
    return float(np.mean(x)), sd


def balance_table(table: ObservationTable, by: str | None = None) -> BalanceTable:
    """Per-arm covariate summaries: mean (sample SD) or count (percent)."""
    by = by or table.schema.treatment
    arm = np.asarray(table.column(by)).astype(float)
    if not np.isin(arm, (0, 1)).all():
        raise ValueError(f"balance column {by!r} must be binary")
    masks = [arm == 0, arm == 1]
    sizes = tuple(int(m.sum()) for m in masks)
    if min(sizes) == 0:
        raise ValueError(f"balance column {by!r} has an empty arm: sizes {sizes}")

    rows = []
    numeric = [(table.schema.outcome, table.y, "binary")]
    numeric += [(c.name, table.covariates[c.name].to_numpy(), c.kind) for c in table.schema.covariates]
    for name, vals, kind in numeric:
        if name == by:
            continue
        spec = table.schema.column(name)
        if kind in ("numeric", "binary"):
            rows.append(BalanceRow(name, None, "mean_sd",
                                   _mean_sd(vals[masks[0]]), _mean_sd(vals[masks[1]])))
            continue
        if spec.levels is not None:
            levels = list(spec.levels)
        elif kind == "ordinal":
            levels = sorted(set(vals.tolist()))
        else:
            levels = sorted(set(vals.tolist()), key=str)
        for lv in levels:
            pair = []
            for m, size in zip(masks, sizes):
                count = int(np.sum(vals[m] == lv))
                pair.append((count, 100.0 * count / size))
            rows.append(BalanceRow(name, str(lv), "count_pct", pair[0], pair[1]))
    return BalanceTable(by=by, n=sizes, rows=tuple(rows))


# --------------------------------------------------------------------------
# stratification and lags


@dataclass(frozen=True, eq=False)
class Stratum:
    value: object
    rows: np.ndarray  # positions in the parent table
    table: ObservationTable | None  # None when the value is absent

    @property
    def empty(self) -> bool:
        return self.rows.size == 0

    @property
    def n(self) -> int:
        return int(self.rows.size)


def _match(col: np.ndarray, value) -> np.ndarray:
    if col.dtype.kind in "biuf":
        try:
            return col.astype(float) == float(value)
        except (TypeError, ValueError):
            return np.zeros(col.shape, dtype=bool)
    return col.astype(str) == str(value)


def stratify(table: ObservationTable, column: str, values=None) -> list:
    """One stratum per requested value; absent values yield an empty stratum.

    With ``values=None`` the distinct values of the column are used in
    sorted order.
    """
    col = np.asarray(table.column(column))
    if values is None:
        values = sorted(set(col.tolist()))
    out = []
    for v in values:
        rows = np.flatnonzero(_match(col, v))
        if rows.size == 0:
            logger.warning("stratum %s=%r is empty", column, v)
            out.append(Stratum(v, rows, None))
        else:
            out.append(Stratum(v, rows, table.take(rows)))
    return out


def lag_column(frame: pd.DataFrame, column: str, by: str, time: str, periods: int = 1) -> pd.Series:
    """``column`` shifted by ``periods`` time steps within each ``by`` group.

    The result is aligned with ``frame``'s index; the first ``periods``
    observations of each group are missing.
    """
    ordered = frame.sort_values([by, time], kind="stable")
    lagged = ordered.groupby(by, sort=False)[column].shift(periods)
    return lagged.reindex(frame.index)
