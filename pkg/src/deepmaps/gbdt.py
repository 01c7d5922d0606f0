"""Gradient-boosted regression trees with squared-error loss.

Trees are grown level by level on histogram-binned features (equal-frequency
bin edges taken from the training data). A row goes left when its value is
``<= threshold``. Split gain is the drop in squared error of the node's
residuals, and a column's importance is its summed gain over the ensemble.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import ConfigurationError, InputError, SchemaError

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

MAGIC = "DEEPMAPS-GBDT"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class GbdtParams:
    num_trees: int = 400
    max_depth: int = 6
    learning_rate: float = 0.05
    min_samples_leaf: int = 20
    row_subsample: float = 0.8
    feature_subsample: float = 0.8
    histogram_bins: int = 64
    seed: int = 0
    early_stopping_rounds: Optional[int] = None

    def __post_init__(self):
        if self.num_trees < 0:
            raise ConfigurationError("num_trees must be >= 0")
        if self.max_depth < 1:
            raise ConfigurationError("max_depth must be >= 1")
        if not 0 < self.learning_rate <= 1:
            raise ConfigurationError("learning_rate must be in (0, 1]")
        if self.min_samples_leaf < 1:
            raise ConfigurationError("min_samples_leaf must be >= 1")
        for name in ("row_subsample", "feature_subsample"):
            if not 0 < getattr(self, name) <= 1:
                raise ConfigurationError(f"{name} must be in (0, 1]")
        if not 2 <= self.histogram_bins <= 256:
            raise ConfigurationError("histogram_bins must be in [2, 256]")


@dataclass(frozen=True)
class TreeNode:
    split_feature: Optional[str]
    threshold: float = math.nan
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None
    leaf_value: float = 0.0
    gain: float = 0.0
    n_samples: int = 0

    @property
    def is_leaf(self) -> bool:
        return self.split_feature is None


@dataclass
class Tree:
    """Flat node arrays; ``feature[i] == -1`` marks a leaf. Node 0 is the root."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray
    n_samples: np.ndarray

    def __len__(self):
        return len(self.feature)

    @property
    def depth(self) -> int:
        depth = np.zeros(len(self), dtype=int)
        for i in range(len(self)):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def root(self, columns: Sequence[str]) -> TreeNode:
        def build(i):
            if self.feature[i] < 0:
                return TreeNode(None, leaf_value=float(self.value[i]), n_samples=int(self.n_samples[i]))
            return TreeNode(columns[self.feature[i]], float(self.threshold[i]), build(self.left[i]),
                            build(self.right[i]), float(self.value[i]), float(self.gain[i]),
                            int(self.n_samples[i]))
        return build(0)

    def preorder(self):
        stack = [0]
        while stack:
            i = stack.pop()
            yield i
            if self.feature[i] >= 0:
                stack += [self.right[i], self.left[i]]


@dataclass
class GbdtModel:
    base_score: float
    learning_rate: float
    trees: list
    columns: list
    params: GbdtParams
    train_mse: list = field(default_factory=list)

    @property
    def importance(self) -> dict:
        return column_importance(self)

    def predict(self, rows) -> np.ndarray:
        return predict(self, rows)


def _as_array(matrix, columns):
    if hasattr(matrix, "values") and hasattr(matrix, "columns"):
        return np.asarray(matrix.values, dtype=float), list(matrix.columns)
    X = np.asarray(matrix, dtype=float)
    if X.ndim != 2:
        raise InputError("feature matrix must be 2-D")
    if columns is None:
        columns = [f"f{i}" for i in range(X.shape[1])]
    return X, list(columns)


def _bin_edges(column: np.ndarray, n_bins: int) -> np.ndarray:
    qs = np.quantile(column, np.arange(1, n_bins) / n_bins)
    return np.unique(qs)


def _column_draw(seed: int, tree: int, name: str) -> float:
    digest = hashlib.blake2b(f"{seed}:{tree}:{name}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") / 2.0 ** 64


def _histograms_numpy(xb, rows, slot, resid, k, n_bins):
    fs = xb.shape[1]
    offsets = (np.arange(fs) * n_bins)[None, :]
    key = (slot[:, None] * (fs * n_bins) + offsets + xb[rows]).ravel()
    size = k * fs * n_bins
    g = np.bincount(key, weights=np.repeat(resid[rows], fs), minlength=size)
    c = np.bincount(key, minlength=size)
    return g.reshape(k, fs, n_bins), c.reshape(k, fs, n_bins)


def _histograms_loop(xb, rows, slot, resid, k, n_bins):
    fs = xb.shape[1]
    g = np.zeros((k, fs, n_bins))
    c = np.zeros((k, fs, n_bins), dtype=np.int64)
    for i in range(rows.shape[0]):
        r = rows[i]
        s = slot[i]
        v = resid[r]
        for f in range(fs):
            b = xb[r, f]
            g[s, f, b] += v
            c[s, f, b] += 1
    return g, c


_histograms = (numba.njit(cache=True, nogil=True)(_histograms_loop) if numba is not None
               else _histograms_numpy)


class _Builder:
    """Grows one tree on binned rows. Nodes are appended in breadth-first order."""

    def __init__(self, params: GbdtParams):
        self.p = params

    def grow(self, xb: np.ndarray, resid: np.ndarray, feats: np.ndarray, edges, n_bins: int):
        p = self.p
        m, fs = xb.shape
        feature, bin_thr, thr, left, right, value, gain, count = [], [], [], [], [], [], [], []

        def new_node(n, s):
            feature.append(-1)
            bin_thr.append(-1)
            thr.append(math.nan)
            left.append(-1)
            right.append(-1)
            value.append(s / n if n else 0.0)
            gain.append(0.0)
            count.append(n)
            return len(feature) - 1

        node_of = np.zeros(m, dtype=np.int64)
        frontier = [new_node(m, float(resid.sum()))]
        for _ in range(p.max_depth):
            split_nodes = [nd for nd in frontier if count[nd] >= 2 * p.min_samples_leaf]
            if not split_nodes:
                break
            local = np.full(len(feature), -1, dtype=np.int64)
            local[split_nodes] = np.arange(len(split_nodes))
            rows = np.flatnonzero(local[node_of] >= 0)
            k = len(split_nodes)
            g, c = _histograms(xb, rows, local[node_of[rows]], resid, k, n_bins)
            gl = np.cumsum(g, axis=2)[:, :, :-1]
            cl = np.cumsum(c, axis=2)[:, :, :-1]
            gt = g[:, :1, :].sum(axis=2, keepdims=True)
            ct = c[:, :1, :].sum(axis=2, keepdims=True)
            gr, cr = gt - gl, ct - cl
            ok = (cl >= p.min_samples_leaf) & (cr >= p.min_samples_leaf)
            with np.errstate(divide="ignore", invalid="ignore"):
                score = np.where(ok, gl * gl / cl + gr * gr / cr, -np.inf) - (gt * gt / ct)
            flat = score.reshape(k, -1)
            best = np.argmax(flat, axis=1)
            best_gain = flat[np.arange(k), best]
            next_frontier = []
            go_node = np.full(len(feature), -1, dtype=np.int64)
            split_f = np.zeros(len(feature), dtype=np.int64)
            split_b = np.zeros(len(feature), dtype=np.int64)
            for j, nd in enumerate(split_nodes):
                bg = best_gain[j]
                if not np.isfinite(bg) or bg <= 1e-12 * max(1.0, abs(gt[j, 0, 0]) ** 2 / ct[j, 0, 0]):
                    continue
                f, b = divmod(int(best[j]), n_bins - 1)
                feature[nd] = int(feats[f])
                bin_thr[nd] = b
                thr[nd] = float(edges[feats[f]][b])
                gain[nd] = float(bg)
                left[nd] = new_node(int(cl[j, f, b]), float(gl[j, f, b]))
                right[nd] = new_node(int(cr[j, f, b]), float(gr[j, f, b]))
                next_frontier += [left[nd], right[nd]]
                go_node[nd] = nd
                split_f[nd] = f
                split_b[nd] = b
            if not next_frontier:
                break
            go_node = np.concatenate([go_node, np.full(len(feature) - len(go_node), -1)])
            moving = rows[go_node[node_of[rows]] >= 0]
            nd = node_of[moving]
            goes_left = xb[moving, split_f[nd]] <= split_b[nd]
            node_of[moving] = np.where(goes_left, np.asarray(left)[nd], np.asarray(right)[nd])
            frontier = next_frontier
        tree = Tree(np.array(feature, dtype=np.int64), np.array(thr), np.array(left, dtype=np.int64),
                    np.array(right, dtype=np.int64), np.array(value), np.array(gain),
                    np.array(count, dtype=np.int64))
        return tree, np.array(bin_thr, dtype=np.int64)


def _apply_binned(tree: Tree, bin_thr: np.ndarray, xb: np.ndarray) -> np.ndarray:
    idx = np.zeros(len(xb), dtype=np.int64)
    rows = np.arange(len(xb))
    for _ in range(64):
        f = tree.feature[idx]
        inner = f >= 0
        if not inner.any():
            break
        go = xb[rows, np.maximum(f, 0)] <= bin_thr[idx]
        idx = np.where(inner, np.where(go, tree.left[idx], tree.right[idx]), idx)
    return tree.value[idx]


def fit(matrix, response, params: GbdtParams = GbdtParams(), columns=None, eval_set=None) -> GbdtModel:
    """Stagewise least-squares boosting.

    ``matrix`` is a :class:`~deepmaps.featurize.FeatureMatrix` or a 2-D array
    (``columns`` then names it). Columns are processed in sorted-name order and
    feature subsampling is keyed on names, so the fit does not depend on the
    column order. ``eval_set=(X, y)`` enables early stopping when
    ``params.early_stopping_rounds`` is set.
    """
    X, names = _as_array(matrix, columns)
    y = np.asarray(response, dtype=float)
    if len(X) != len(y):
        raise InputError("feature rows and response length differ")
    if len(y) < 2:
        raise InputError("need at least 2 training rows")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise InputError("non-finite values in training data")
    if len(set(names)) != len(names):
        raise InputError("duplicate column names")
    order = sorted(range(len(names)), key=lambda i: names[i])
    X = X[:, order]
    names = [names[i] for i in order]
    n, n_feat = X.shape

    base = float(y.mean())
    model = GbdtModel(base, params.learning_rate, [], names, params)
    pred = np.full(n, base)
    model.train_mse.append(float(np.mean((y - pred) ** 2)))
    if n_feat == 0 or np.ptp(y) == 0:
        return model

    n_bins = params.histogram_bins
    edges = [_bin_edges(X[:, j], n_bins) for j in range(n_feat)]
    xb = np.empty(X.shape, dtype=np.uint8)
    for j in range(n_feat):
        xb[:, j] = np.searchsorted(edges[j], X[:, j], side="left")

    rng = np.random.default_rng(params.seed)
    m = max(1, int(round(params.row_subsample * n)))
    k_feat = max(1, int(round(params.feature_subsample * n_feat)))
    builder = _Builder(params)

    val = None
    if eval_set is not None and params.early_stopping_rounds:
        Xv, vnames = _as_array(eval_set[0], names if not hasattr(eval_set[0], "columns") else None)
        Xv = _align(Xv, vnames, names)
        val = (Xv, np.asarray(eval_set[1], dtype=float), np.full(len(Xv), base))
        best_loss, best_round = float(np.mean((val[1] - base) ** 2)), 0

    for it in range(params.num_trees):
        resid = y - pred
        rows = np.sort(rng.choice(n, m, replace=False)) if m < n else np.arange(n)
        if k_feat < n_feat:
            draws = np.array([_column_draw(params.seed, it, nm) for nm in names])
            feats = np.sort(np.argsort(draws, kind="stable")[:k_feat])
        else:
            feats = np.arange(n_feat)
        tree, bin_thr = builder.grow(xb[np.ix_(rows, feats)], resid[rows], feats, edges, n_bins)
        model.trees.append(tree)
        pred = pred + params.learning_rate * _apply_binned(tree, bin_thr, xb)
        model.train_mse.append(float(np.mean((y - pred) ** 2)))
        if val is not None:
            val[2][:] += params.learning_rate * _predict_tree(tree, val[0])
            loss = float(np.mean((val[1] - val[2]) ** 2))
            if loss < best_loss:
                best_loss, best_round = loss, it + 1
            elif it + 1 - best_round >= params.early_stopping_rounds:
                del model.trees[best_round:]
                del model.train_mse[best_round + 1:]
                break
    return model


def _predict_tree(tree: Tree, X: np.ndarray) -> np.ndarray:
    idx = np.zeros(len(X), dtype=np.int64)
    rows = np.arange(len(X))
    for _ in range(64):
        f = tree.feature[idx]
        inner = f >= 0
        if not inner.any():
            break
        go = X[rows, np.maximum(f, 0)] <= tree.threshold[idx]
        idx = np.where(inner, np.where(go, tree.left[idx], tree.right[idx]), idx)
    return tree.value[idx]


def _align(X: np.ndarray, have: Sequence[str], need: Sequence[str]) -> np.ndarray:
    pos = {c: i for i, c in enumerate(have)}
    missing = [c for c in need if c not in pos]
    if missing:
        raise SchemaError(f"missing feature columns: {', '.join(missing)}")
    return X[:, [pos[c] for c in need]]


def _ensemble_sum_loop(X, roots, feature, threshold, left, right, value):
    out = np.zeros(X.shape[0])
    for i in range(X.shape[0]):
        total = 0.0
        for root in roots:
            idx = root
            while feature[idx] >= 0:
                if X[i, feature[idx]] <= threshold[idx]:
                    idx = left[idx]
                else:
                    idx = right[idx]
            total += value[idx]
        out[i] = total
    return out


_ensemble_sum = (numba.njit(cache=True, nogil=True)(_ensemble_sum_loop) if numba is not None
                 else _ensemble_sum_loop)


def predict(model: GbdtModel, rows, columns=None) -> np.ndarray:
    """``base_score + learning_rate * sum(tree outputs)`` for every row, unclamped."""
    X, names = _as_array(rows, columns if columns is not None else model.columns)
    if len(X) == 0:
        return np.zeros(0)
    X = _align(X, names, model.columns)
    out = np.full(len(X), model.base_score)
    if not model.trees:
        return out
    sizes = [len(t) for t in model.trees]
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    feature = np.concatenate([t.feature for t in model.trees])
    threshold = np.concatenate([t.threshold for t in model.trees])
    left = np.concatenate([t.left + o for t, o in zip(model.trees, offsets)])
    right = np.concatenate([t.right + o for t, o in zip(model.trees, offsets)])
    value = np.concatenate([t.value for t in model.trees])
    totals = _ensemble_sum(np.ascontiguousarray(X), offsets, feature, threshold, left, right, value)
    return out + model.learning_rate * totals


def column_importance(model: GbdtModel) -> dict:
    """Summed split gain per column, normalised to 1 (empty when no split exists)."""
    totals = np.zeros(len(model.columns))
    for tree in model.trees:
        inner = tree.feature >= 0
        np.add.at(totals, tree.feature[inner], tree.gain[inner])
    total = totals.sum()
    if total <= 0:
        return {}
    return {c: float(w / total) for c, w in zip(model.columns, totals) if w > 0}


def feature_importance(model: GbdtModel, grouping: Optional[dict] = None) -> dict:
    """Per-column weights, per-category rollups and per-macro-station weights.

    ``grouping`` maps column -> category (unmapped columns fall in "other").
    Macro columns named ``macro_<station>_<shift>`` are also summed per station.
    """
    per_column = column_importance(model)
    grouping = grouping or {}
    per_category: dict = {}
    per_station: dict = {}
    for col, w in per_column.items():
        cat = grouping.get(col, "other")
        per_category[cat] = per_category.get(cat, 0.0) + w
        if col.startswith("macro_"):
            station = col[len("macro_"):].rsplit("_", 1)[0]
            per_station[station] = per_station.get(station, 0.0) + w
    return {"columns": per_column, "categories": per_category, "macro_stations": per_station}


def write_importance_csv(model: GbdtModel, grouping: dict, path, header: str = "") -> None:
    weights = column_importance(model)
    lines = ["column,category,weight"]
    for col in sorted(weights, key=lambda c: (-weights[c], c)):
        lines.append(f"{col},{grouping.get(col, 'other')},{weights[col]!r}")
    Path(path).write_text(header + "\n".join(lines) + "\n", encoding="utf-8")


# -- serialisation ----------------------------------------------------------


def dumps(model: GbdtModel, extra: Optional[dict] = None) -> str:
    lines = [f"{MAGIC} {FORMAT_VERSION}"]
    lines.append("params " + json.dumps(asdict(model.params), sort_keys=True))
    if extra:
        lines.append("extra " + json.dumps(extra, sort_keys=True))
    lines.append(f"base_score {model.base_score!r}")
    lines.append(f"learning_rate {model.learning_rate!r}")
    lines.append("columns " + json.dumps(model.columns))
    lines.append("train_mse " + " ".join(repr(v) for v in model.train_mse))
    lines.append(f"trees {len(model.trees)}")
    for tree in model.trees:
        lines.append(f"tree {len(tree)}")
        for i in tree.preorder():
            if tree.feature[i] < 0:
                lines.append(f"L {float(tree.value[i])!r} {int(tree.n_samples[i])}")
            else:
                lines.append(f"N {int(tree.feature[i])} {float(tree.threshold[i])!r} {float(tree.gain[i])!r} "
                             f"{float(tree.value[i])!r} {int(tree.n_samples[i])}")
    return "\n".join(lines) + "\n"


def loads(text: str) -> GbdtModel:
    lines = iter(text.splitlines())
    head = next(lines, "").split()
    if len(head) != 2 or head[0] != MAGIC:
        raise SchemaError("not a deepmaps GBDT model file")
    if int(head[1]) != FORMAT_VERSION:
        raise SchemaError(f"unsupported model format version {head[1]}")
    fields = {}
    line = next(lines)
    while not line.startswith("trees "):
        key, _, rest = line.partition(" ")
        fields[key] = rest
        line = next(lines)
    params = GbdtParams(**json.loads(fields["params"]))
    trees = []
    for _ in range(int(line.split()[1])):
        size = int(next(lines).split()[1])
        rec = [next(lines).split() for _ in range(size)]
        trees.append(_tree_from_preorder(rec))
    mse = [float(v) for v in fields.get("train_mse", "").split()]
    return GbdtModel(float(fields["base_score"]), float(fields["learning_rate"]), trees,
                     json.loads(fields["columns"]), params, mse)


def _tree_from_preorder(records) -> Tree:
    n = len(records)
    feature = np.full(n, -1, dtype=np.int64)
    threshold = np.full(n, math.nan)
    left = np.full(n, -1, dtype=np.int64)
    right = np.full(n, -1, dtype=np.int64)
    value = np.zeros(n)
    gain = np.zeros(n)
    count = np.zeros(n, dtype=np.int64)
    pos = 0

    def build():
        nonlocal pos
        i = pos
        rec = records[pos]
        pos += 1
        if rec[0] == "L":
            value[i], count[i] = float(rec[1]), int(rec[2])
            return i
        feature[i], threshold[i], gain[i] = int(rec[1]), float(rec[2]), float(rec[3])
        value[i], count[i] = float(rec[4]), int(rec[5])
        left[i] = build()
        right[i] = build()
        return i

    build()
    return Tree(feature, threshold, left, right, value, gain, count)


def save(model: GbdtModel, path, extra: Optional[dict] = None) -> None:
    Path(path).write_text(dumps(model, extra), encoding="utf-8")


def load(path) -> GbdtModel:
    return loads(Path(path).read_text(encoding="utf-8"))
