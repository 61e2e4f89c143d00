"""Honest regression forest with cluster-aware subsampling.

Each tree draws a subsample (whole clusters at a time by default), splits it
into a structure half that chooses the CART splits and an estimate half that
sets the leaf values. Out-of-bag predictions use only trees whose subsample
excluded the row.
"""

from __future__ import annotations

import json
import logging
import math
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numba
import numpy as np

logger = logging.getLogger(__name__)

FORMAT_MAGIC = b"PEFOREST"
FORMAT_VERSION = 1
LEAF = -1


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 1000
    subsample_fraction: float = 0.5
    honesty_fraction: float = 0.5
    min_leaf: int = 5
    max_features: int | None = None  # None -> ceil(sqrt(p))
    seed: int = 0
    cluster_subsampling: bool = True
    n_jobs: int = 1

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        for name in ("subsample_fraction", "honesty_fraction"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")
        if self.max_features is not None and self.max_features < 1:
            raise ValueError("max_features must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def mtry(self, p: int) -> int:
        if self.max_features is None:
            return max(1, math.ceil(math.sqrt(p)))
        return min(self.max_features, p)


@dataclass(frozen=True)
class Tree:
    feature: np.ndarray  # int32, LEAF for leaves
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # leaf value (weighted mean of estimate rows)
    n_estimation: np.ndarray  # estimate rows reaching the node
    n_node: np.ndarray  # structure + estimate rows reaching the node
    bag: np.ndarray  # sorted row ids in the subsample
    structure_half: np.ndarray
    estimate_half: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]


@dataclass
class ForestModel:
    trees: list
    params: ForestParams
    feature_names: list
    n_features: int
    n_train: int
    oob_counts: np.ndarray
    # Training covariates, kept so out-of-bag predictions need no arguments.
    X_train: np.ndarray = field(repr=False)
    # Rows excluded by the OOB rule; tree t excludes row i iff ~in_bag[t, i].
    in_bag: np.ndarray = field(repr=False)


# --------------------------------------------------------------------------
# numba kernels


@numba.njit(cache=True, nogil=True)
def _best_split(XT, y, w, S, E, s0, s1, e0, e1, features, min_leaf):
    """Lowest-SSE split over ``features`` on the structure rows of a node.

    ``S[f, s0:s1]`` and ``E[f, e0:e1]`` hold the node's structure and
    estimate rows sorted by feature f. Returns (feature, threshold, gain);
    feature == -1 when nothing is valid. Features are scanned in ascending
    order and thresholds ascending; only a strictly larger gain replaces the
    incumbent.
    """
    m_e = e1 - e0
    sw = 0.0
    swy = 0.0
    swyy = 0.0
    for i in range(s0, s1):
        r = S[0, i]
        sw += w[r]
        swy += w[r] * y[r]
        swyy += w[r] * y[r] * y[r]
    best_f = -1
    best_t = 0.0
    best_gain = 0.0
    if sw <= 0.0:
        return best_f, best_t, best_gain
    parent = swy * swy / sw
    min_gain = 1e-12 * swyy + 1e-300
    for f in features:
        wl = 0.0
        wyl = 0.0
        j = e0
        for i in range(s0, s1 - 1):
            r = S[f, i]
            wl += w[r]
            wyl += w[r] * y[r]
            v0 = XT[f, r]
            v1 = XT[f, S[f, i + 1]]
            if not v0 < v1:
                continue
            thr = v0 + 0.5 * (v1 - v0)
            if thr >= v1:
                thr = v0
            while j < e1 and XT[f, E[f, j]] <= thr:
                j += 1
            if j - e0 < min_leaf:
                continue
            if m_e - (j - e0) < min_leaf:
                break
            wr = sw - wl
            if wl <= 0.0 or wr <= 0.0:
                continue
            wyr = swy - wyl
            gain = wyl * wyl / wl + wyr * wyr / wr - parent
            if gain > best_gain and gain > min_gain:
                best_gain = gain
                best_f = f
                best_t = thr
    return best_f, best_t, best_gain


@numba.njit(cache=True, nogil=True)
def _partition(M, start, end, go_left, buf):
    """Stable partition of every row of M[:, start:end] by ``go_left``."""
    mid = start
    for f in range(M.shape[0]):
        k = start
        nr = 0
        for i in range(start, end):
            r = M[f, i]
            if go_left[r]:
                M[f, k] = r
                k += 1
            else:
                buf[nr] = r
                nr += 1
        for i in range(nr):
            M[f, k + i] = buf[i]
        mid = k
    return mid


@numba.njit(cache=True, nogil=True)
def _presorted(order, member, m):
    """Rows with ``member`` set, in the per-feature order of ``order``."""
    p = order.shape[0]
    out = np.empty((p, m), np.int64)
    for f in range(p):
        k = 0
        for i in range(order.shape[1]):
            r = order[f, i]
            if member[r]:
                out[f, k] = r
                k += 1
    return out


@numba.njit(cache=True, nogil=True)
def _grow(XT, y, w, order, s_rows, e_rows, feat_u, mtry, min_leaf):
    n = XT.shape[1]
    is_s = np.zeros(n, np.bool_)
    is_e = np.zeros(n, np.bool_)
    for r in s_rows:
        is_s[r] = True
    for r in e_rows:
        is_e[r] = True
    S = _presorted(order, is_s, s_rows.shape[0])
    E = _presorted(order, is_e, e_rows.shape[0])
    go_left = np.zeros(n, np.bool_)

    cap = feat_u.shape[0]
    feature = np.full(cap, -1, np.int32)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int32)
    right = np.full(cap, -1, np.int32)
    value = np.zeros(cap)
    n_est = np.zeros(cap, np.int32)
    n_node = np.zeros(cap, np.int32)
    buf = np.empty(max(s_rows.shape[0], e_rows.shape[0]), np.int64)

    # stack of (node, s_start, s_end, e_start, e_end)
    stack = np.empty((cap, 5), np.int64)
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = s_rows.shape[0]
    stack[0, 3] = 0
    stack[0, 4] = e_rows.shape[0]
    top = 1
    n_nodes = 1
    while top > 0:
        top -= 1
        node = stack[top, 0]
        s0 = stack[top, 1]
        s1 = stack[top, 2]
        e0 = stack[top, 3]
        e1 = stack[top, 4]
        n_est[node] = e1 - e0
        n_node[node] = (s1 - s0) + (e1 - e0)

        sw = 0.0
        swy = 0.0
        sy = 0.0
        for i in range(e0, e1):
            r = E[0, i]
            sw += w[r]
            swy += w[r] * y[r]
            sy += y[r]
        if sw > 0.0:
            value[node] = swy / sw
        elif e1 > e0:
            value[node] = sy / (e1 - e0)

        if e1 - e0 < 2 * min_leaf or s1 - s0 < 2 or n_nodes + 2 > cap:
            continue
        feats = np.sort(np.argsort(feat_u[node], kind="mergesort")[:mtry])
        f, thr, gain = _best_split(XT, y, w, S, E, s0, s1, e0, e1, feats, min_leaf)
        if f < 0:
            continue
        for i in range(s0, s1):
            r = S[0, i]
            go_left[r] = XT[f, r] <= thr
        for i in range(e0, e1):
            r = E[0, i]
            go_left[r] = XT[f, r] <= thr
        s_mid = _partition(S, s0, s1, go_left, buf)
        e_mid = _partition(E, e0, e1, go_left, buf)
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        feature[node] = f
        threshold[node] = thr
        left[node] = lc
        right[node] = rc
        # right pushed first so the left subtree is expanded first
        stack[top, 0] = rc
        stack[top, 1] = s_mid
        stack[top, 2] = s1
        stack[top, 3] = e_mid
        stack[top, 4] = e1
        top += 1
        stack[top, 0] = lc
        stack[top, 1] = s0
        stack[top, 2] = s_mid
        stack[top, 3] = e0
        stack[top, 4] = e_mid
        top += 1
    return (
        feature[:n_nodes],
        threshold[:n_nodes],
        left[:n_nodes],
        right[:n_nodes],
        value[:n_nodes],
        n_est[:n_nodes],
        n_node[:n_nodes],
    )


@numba.njit(cache=True, nogil=True)
def _predict_tree(X, feature, threshold, left, right, value, out):
    for i in range(X.shape[0]):
        node = 0
        while feature[node] != -1:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]


# --------------------------------------------------------------------------
# subsampling


def tree_rng(seed: int, t: int) -> np.random.Generator:
    """Independent Philox stream for tree ``t``; key = (seed, t)."""
    return np.random.Generator(np.random.Philox(key=np.array([seed, t], dtype=np.uint64)))


def _draw_tree_rows(rng, groups, params: ForestParams):
    """Subsample and honesty split. ``groups`` lists row-id arrays per unit."""
    n_units = len(groups)
    n_draw = int(round(params.subsample_fraction * n_units))
    n_draw = min(max(n_draw, 1), n_units - 1) if n_units > 1 else 1
    units = rng.permutation(n_units)[:n_draw]
    if n_draw >= 2:
        n_struct = int(round(params.honesty_fraction * n_draw))
        n_struct = min(max(n_struct, 1), n_draw - 1)
        s_rows = np.concatenate([groups[u] for u in units[:n_struct]])
        e_rows = np.concatenate([groups[u] for u in units[n_struct:]])
    else:
        # a single unit in the bag: fall back to a row-level honesty split
        rows = groups[units[0]]
        perm = rng.permutation(rows.size)
        n_struct = min(max(int(round(params.honesty_fraction * rows.size)), 1), rows.size - 1)
        s_rows = rows[perm[:n_struct]]
        e_rows = rows[perm[n_struct:]]
    s_rows = np.sort(s_rows).astype(np.int64)
    e_rows = np.sort(e_rows).astype(np.int64)
    bag = np.sort(np.concatenate([s_rows, e_rows]))
    return bag, s_rows, e_rows


def _unit_groups(n: int, clusters, cluster_subsampling: bool):
    if clusters is None or not cluster_subsampling:
        return [np.array([i], dtype=np.int64) for i in range(n)]
    labels, inv = np.unique(np.asarray(clusters), return_inverse=True)
    order = np.argsort(inv, kind="stable")
    bounds = np.cumsum(np.bincount(inv, minlength=labels.size))[:-1]
    return [g.astype(np.int64) for g in np.split(order, bounds)]


def _fit_tree(t, XT, y, w, order, groups, params, mtry):
    rng = tree_rng(params.seed, t)
    bag, s_rows, e_rows = _draw_tree_rows(rng, groups, params)
    cap = 2 * (e_rows.size // params.min_leaf) + 1
    feat_u = rng.random((cap, XT.shape[0]))
    arrays = _grow(XT, y, w, order, s_rows, e_rows, feat_u, mtry, params.min_leaf)
    return Tree(*arrays, bag=bag, structure_half=s_rows, estimate_half=e_rows)


def _as_inputs(X, y=None, weights=None):
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("X must be two-dimensional")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains missing or non-finite values")
    if y is None:
        return X
    y = np.ascontiguousarray(y, dtype=np.float64)
    if y.shape != (X.shape[0],):
        raise ValueError(f"y has shape {y.shape}, expected ({X.shape[0]},)")
    if not np.all(np.isfinite(y)):
        raise ValueError("y contains missing or non-finite values")
    if weights is None:
        w = np.ones_like(y)
    else:
        w = np.ascontiguousarray(weights, dtype=np.float64)
        if w.shape != y.shape or np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite, non-negative and match y")
    return X, y, w


def fit_forest(X, y, weights=None, clusters=None, params: ForestParams | None = None,
               feature_names=None) -> ForestModel:
    """Grow an honest regression forest.

    Parameters
    ----------
    X : (n, p) array
    y : (n,) array
    weights : (n,) array, optional
        Non-negative row weights for the split criterion and leaf means.
    clusters : (n,) array, optional
        Cluster labels. With ``params.cluster_subsampling`` trees sample
        whole clusters and out-of-bag rows are those of unsampled clusters.
    params : ForestParams
    feature_names : list of str, optional
    """
    params = params or ForestParams()
    X, y, w = _as_inputs(X, y, weights)
    n, p = X.shape
    if n < 2 * params.min_leaf:
        raise ValueError(f"need n >= 2*min_leaf = {2 * params.min_leaf}, got n={n}")
    if clusters is not None and np.asarray(clusters).shape != (n,):
        raise ValueError("clusters must have one label per row")
    names = list(feature_names) if feature_names is not None else [f"x{j}" for j in range(p)]
    if len(names) != p:
        raise ValueError("feature_names length does not match X")
    groups = _unit_groups(n, clusters, params.cluster_subsampling)
    mtry = params.mtry(p)
    XT = np.ascontiguousarray(X.T)
    order = np.argsort(XT, axis=1, kind="stable")

    def build(t):
        return _fit_tree(t, XT, y, w, order, groups, params, mtry)

    if params.n_jobs > 1:
        with ThreadPoolExecutor(params.n_jobs) as pool:
            trees = list(pool.map(build, range(params.n_trees)))
    else:
        trees = [build(t) for t in range(params.n_trees)]

    in_bag = np.zeros((params.n_trees, n), dtype=bool)
    for t, tree in enumerate(trees):
        in_bag[t, tree.bag] = True
    oob_counts = params.n_trees - in_bag.sum(axis=0)
    return ForestModel(
        trees=trees,
        params=params,
        feature_names=names,
        n_features=p,
        n_train=n,
        oob_counts=oob_counts,
        X_train=X,
        in_bag=in_bag,
    )


# --------------------------------------------------------------------------
# prediction


def predict_tree(tree: Tree, X) -> np.ndarray:
    X = _as_inputs(X)
    out = np.empty(X.shape[0])
    _predict_tree(X, tree.feature, tree.threshold, tree.left, tree.right, tree.value, out)
    return out


def _check_features(model: ForestModel, X):
    X = _as_inputs(X)
    if X.shape[1] != model.n_features:
        raise ValueError(f"X has {X.shape[1]} features, model expects {model.n_features}")
    return X


def predict_trees(model: ForestModel, X) -> np.ndarray:
    """Per-tree predictions, shape (n_trees, n_rows)."""
    X = _check_features(model, X)
    return np.stack([predict_tree(tree, X) for tree in model.trees])


def predict(model: ForestModel, X) -> np.ndarray:
    """Forest prediction: the mean over trees of each tree's leaf value."""
    X = _check_features(model, X)
    total = np.zeros(X.shape[0])
    buf = np.empty(X.shape[0])
    for tree in model.trees:
        _predict_tree(X, tree.feature, tree.threshold, tree.left, tree.right, tree.value, buf)
        total += buf
    return total / len(model.trees)


def predict_oob(model: ForestModel) -> np.ndarray:
    """Out-of-bag predictions for the training rows.

    Raises ValueError listing the rows that every tree sampled.
    """
    missing = np.flatnonzero(model.oob_counts == 0)
    if missing.size:
        shown = missing[:20].tolist()
        more = "" if missing.size <= 20 else f" (+{missing.size - 20} more)"
        raise ValueError(
            f"rows {shown}{more} are in every tree's subsample; increase n_trees"
        )
    X = model.X_train
    total = np.zeros(model.n_train)
    buf = np.empty(model.n_train)
    for t, tree in enumerate(model.trees):
        _predict_tree(X, tree.feature, tree.threshold, tree.left, tree.right, tree.value, buf)
        oob = ~model.in_bag[t]
        total[oob] += buf[oob]
    return total / model.oob_counts


@dataclass(frozen=True)
class Importance:
    shares: np.ndarray
    feature_names: list
    # True when no tree made a split; shares are then all zero.
    no_splits: bool = False


def split_importance(model: ForestModel) -> Importance:
    """Split counts per feature weighted by node size, normalized to sum 1."""
    counts = np.zeros(model.n_features)
    for tree in model.trees:
        internal = tree.feature != LEAF
        np.add.at(counts, tree.feature[internal], tree.n_node[internal])
    total = counts.sum()
    if total == 0:
        logger.warning("forest contains no splits; importance is all zero")
        return Importance(np.zeros(model.n_features), list(model.feature_names), True)
    return Importance(counts / total, list(model.feature_names))


def tune_forest(X, y, weights=None, clusters=None, base: ForestParams | None = None,
                min_leaf_grid=(1, 5, 10, 20), max_features_grid=(None,)):
    """Grid search over ``min_leaf`` and ``max_features`` by OOB mean squared error.

    Returns the best parameters and a list of (params, oob_mse) for every
    grid point, in grid order.
    """
    base = base or ForestParams()
    _, y_arr, w_arr = _as_inputs(X, y, weights)
    results = []
    for ml in min_leaf_grid:
        for mf in max_features_grid:
            params = ForestParams(**{**asdict(base), "min_leaf": ml, "max_features": mf})
            model = fit_forest(X, y, weights, clusters, params)
            resid = predict_oob(model) - y_arr
            mse = float(np.sum(w_arr * resid**2) / np.sum(w_arr))
            results.append((params, mse))
    best = min(results, key=lambda item: item[1])[0]
    return best, results


# --------------------------------------------------------------------------
# serialization
#
# Layout: MAGIC | u32 version | u64 header length | JSON header | zlib payload.
# The payload concatenates raw little-endian arrays in the order listed in
# the header. Output bytes depend only on the model.

_TREE_FIELDS = ("feature", "threshold", "left", "right", "value", "n_estimation",
                "n_node", "bag", "structure_half", "estimate_half")
_DTYPES = {"feature": "<i4", "threshold": "<f8", "left": "<i4", "right": "<i4",
           "value": "<f8", "n_estimation": "<i4", "n_node": "<i4", "bag": "<i8",
           "structure_half": "<i8", "estimate_half": "<i8"}


def dumps_forest(model: ForestModel, meta: dict | None = None) -> bytes:
    """Serialize ``model``; ``meta`` is stored verbatim in the header."""
    chunks = []
    sizes = []
    for tree in model.trees:
        row = []
        for name in _TREE_FIELDS:
            arr = np.ascontiguousarray(getattr(tree, name), dtype=_DTYPES[name])
            chunks.append(arr.tobytes())
            row.append(int(arr.shape[0]))
        sizes.append(row)
    chunks.append(np.ascontiguousarray(model.X_train, dtype="<f8").tobytes())
    header = {
        "version": FORMAT_VERSION,
        "params": asdict(model.params),
        "feature_names": list(model.feature_names),
        "n_features": model.n_features,
        "n_train": model.n_train,
        "tree_sizes": sizes,
    }
    if meta:
        header["meta"] = meta
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = zlib.compress(b"".join(chunks), 6)
    return FORMAT_MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(head)) + head + payload


def loads_forest(blob: bytes) -> ForestModel:
    if blob[:8] != FORMAT_MAGIC:
        raise ValueError("not a forest file")
    version, head_len = struct.unpack("<IQ", blob[8:20])
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported forest format version {version}")
    header = json.loads(blob[20:20 + head_len].decode("utf-8"))
    raw = zlib.decompress(blob[20 + head_len:])
    pos = 0

    def take(dtype, count):
        nonlocal pos
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=pos).copy()
        pos += arr.nbytes
        return arr

    trees = []
    for sizes in header["tree_sizes"]:
        fields = {name: take(_DTYPES[name], size) for name, size in zip(_TREE_FIELDS, sizes)}
        trees.append(Tree(**fields))
    n, p = header["n_train"], header["n_features"]
    X = take("<f8", n * p).reshape(n, p).astype(np.float64)
    params = ForestParams(**header["params"])
    in_bag = np.zeros((len(trees), n), dtype=bool)
    for t, tree in enumerate(trees):
        in_bag[t, tree.bag] = True
    return ForestModel(
        trees=trees,
        params=params,
        feature_names=header["feature_names"],
        n_features=p,
        n_train=n,
        oob_counts=len(trees) - in_bag.sum(axis=0),
        X_train=X,
        in_bag=in_bag,
    )


def save_forest(model: ForestModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_forest(model))


def load_forest(path) -> ForestModel:
    with open(path, "rb") as fh:
        return loads_forest(fh.read())


def forest_meta(blob: bytes) -> dict:
    """The ``meta`` header entry of a serialized forest (empty if absent)."""
    if blob[:8] != FORMAT_MAGIC:
        raise ValueError("not a forest file")
    _, head_len = struct.unpack("<IQ", blob[8:20])
    return json.loads(blob[20:20 + head_len].decode("utf-8")).get("meta", {})
