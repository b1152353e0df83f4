"""Purely spatial baselines and co-occurrence abundance vectors.

``LocationIndex`` holds the distinct training locations with their per-species
counts. Nearest-location queries return the whole set of equidistant
locations, which is merged before counting.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from sdmkit import PREDICTION_LIMIT
from sdmkit.data import group_positions
from sdmkit.evaluation import RankedPrediction, rank_scores

# slack on the k-d tree radius so float rounding never drops a tied location;
# ties themselves are decided by the exact distance recomputation below
_TIE_SLACK = 1e-9


class EmptyIndexError(LookupError):
    pass


def distances(points: np.ndarray, q) -> np.ndarray:
    d = np.asarray(points, dtype=np.float64) - np.asarray(q, dtype=np.float64)
    return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1])


class LocationIndex:
    def __init__(self, positions, species, n_species: int):
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
        species = np.asarray(species, dtype=np.int64)
        if len(positions) == 0:
            raise EmptyIndexError("cannot index an empty set of locations")
        self.n_species = int(n_species)
        self.locations, inverse = group_positions(positions)
        ones = np.ones(len(species), dtype=np.int64)
        self.counts = sparse.csr_matrix((ones, (inverse, species)),
                                        shape=(len(self.locations), self.n_species), dtype=np.int64)
        self.counts.sum_duplicates()
        self.species_totals = np.bincount(species, minlength=self.n_species).astype(np.int64)
        self.tree = cKDTree(self.locations)

    def __len__(self) -> int:
        return len(self.locations)

    @classmethod
    def from_dataset(cls, ds, *tags: str) -> LocationIndex:
        sel = ds.mask(*(tags or ("train",)))
        return cls(ds.positions[sel], ds.species[sel], ds.n_species)

    def nearest(self, q, exclude_exact: bool = True) -> np.ndarray:
        """Indices of all locations at the minimal distance from ``q``, ascending."""
        q = np.asarray(q, dtype=np.float64)
        k = min(len(self), 2)
        _, idx = self.tree.query(q, k=k)
        idx = np.atleast_1d(idx)
        idx = idx[idx < len(self)]
        d = distances(self.locations[idx], q)
        if exclude_exact:
            idx, d = idx[d > 0], d[d > 0]
        if len(idx) == 0:
            raise EmptyIndexError(f"no indexed location left for query {tuple(q)}")
        dmin = d.min()
        cand = np.asarray(self.tree.query_ball_point(q, dmin * (1 + _TIE_SLACK) + 1e-300), dtype=np.int64)
        dc = distances(self.locations[cand], q)
        keep = dc > 0 if exclude_exact else np.ones(len(cand), dtype=bool)
        best = dc[keep].min()
        return np.sort(cand[keep & (dc == best)])

    def nearest_many(self, queries, exclude_exact: bool = True) -> list[np.ndarray]:
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
        return [self.nearest(q, exclude_exact) for q in queries]

    def local_counts(self, location_ids) -> np.ndarray:
        return np.asarray(self.counts[np.asarray(location_ids)].sum(axis=0)).ravel().astype(np.int64)


def nearest_location(index: LocationIndex, q, exclude_exact: bool = True) -> list[tuple[float, float]]:
    return [tuple(map(float, index.locations[i])) for i in index.nearest(q, exclude_exact)]


@dataclass(frozen=True)
class AbundanceVector:
    z: np.ndarray
    source_locations: tuple[tuple[float, float], ...]


def abundance_vector(index: LocationIndex, q, exclude_exact: bool = True) -> AbundanceVector:
    """Per-species counts over the nearest (tied) training locations, excluding ``q``'s own."""
    ids = index.nearest(q, exclude_exact)
    src = tuple(tuple(map(float, index.locations[i])) for i in ids)
    return AbundanceVector(index.local_counts(ids), src)


def abundance_matrix(index: LocationIndex, queries, exclude_exact: bool = True) -> np.ndarray:
    """Row ``i`` is the abundance vector of ``queries[i]``; shape (n, N), int64."""
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
    out = np.zeros((len(queries), index.n_species), dtype=np.int64)
    # queries sharing a position share the answer
    uniq, inverse = group_positions(queries)
    for u, pos in enumerate(uniq):
        out[inverse == u] = index.local_counts(index.nearest(pos, exclude_exact))
    return out


def closest_location_scores(index: LocationIndex, q, exclude_exact: bool = True) -> np.ndarray:
    """local count + global count / (1 + total): orders by local count, then global frequency."""
    local = index.local_counts(index.nearest(q, exclude_exact))
    total = index.species_totals.sum()
    return local + index.species_totals / (1.0 + total)


def closest_location_rank(index: LocationIndex, q, limit: int = PREDICTION_LIMIT,
                          occ_id: int | None = None, exclude_exact: bool = True) -> RankedPrediction:
    return rank_scores(closest_location_scores(index, q, exclude_exact), limit, occ_id)


# -- random forest on coordinates ----------------------------------------------

@dataclass
class Tree:
    """Array-encoded binary tree; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    depth: int = 0

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        while True:
            f = self.feature[node]
            internal = f >= 0
            if not internal.any():
                return node
            rows = np.nonzero(internal)[0]
            go_left = X[rows, f[rows]] <= self.threshold[node[rows]]
            node[rows] = np.where(go_left, self.left[node[rows]], self.right[node[rows]])


def _best_split(X: np.ndarray, y: np.ndarray, n_classes: int):
    """Best Gini split over both coordinates; thresholds are midpoints of sorted unique values.

    Ties resolve to the lower feature index, then the lower threshold.
    """
    n = len(y)
    best = None
    best_score = -np.inf
    for f in range(X.shape[1]):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        onehot = np.zeros((n, n_classes))
        onehot[np.arange(n), y[order]] = 1
        left = np.cumsum(onehot, axis=0)[:-1]
        valid = np.nonzero(xs[1:] > xs[:-1])[0]
        if valid.size == 0:
            continue
        left = left[valid]
        right = onehot.sum(axis=0) - left
        nl = (valid + 1).astype(np.float64)
        nr = n - nl
        # maximizing sum(c^2)/n on both sides minimizes weighted Gini impurity
        score = (left * left).sum(axis=1) / nl + (right * right).sum(axis=1) / nr
        k = int(np.argmax(score))
        if score[k] > best_score + 1e-12:
            best_score = score[k]
            i = valid[k]
            t = (xs[i] + xs[i + 1]) / 2.0
            # adjacent floats: the midpoint can round up onto the right value
            best = (f, t if t < xs[i + 1] else xs[i])
    return best


def fit_tree(X: np.ndarray, y: np.ndarray, n_classes: int, max_depth: int) -> Tree:
    feature, threshold, left, right, value = [], [], [], [], []

    def grow(rows, depth):
        node = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts = np.bincount(y[rows], minlength=n_classes).astype(np.float64)
        value.append(counts / counts.sum())
        if depth >= max_depth or len(rows) < 2 or np.count_nonzero(counts) == 1:
            return node
        split = _best_split(X[rows], y[rows], n_classes)
        if split is None:
            return node
        f, t = split
        mask = X[rows, f] <= t
        value[node] = np.zeros(n_classes)
        feature[node] = f
        threshold[node] = t
        left[node] = grow(rows[mask], depth + 1)
        right[node] = grow(rows[~mask], depth + 1)
        return node

    grow(np.arange(len(y)), 0)
    feature = np.asarray(feature, dtype=np.int64)
    tree = Tree(feature, np.asarray(threshold), np.asarray(left, dtype=np.int64),
                np.asarray(right, dtype=np.int64), np.asarray(value))
    tree.depth = tree_depth(tree)
    return tree


def tree_depth(tree: Tree, node: int = 0) -> int:
    if tree.feature[node] < 0:
        return 0
    return 1 + max(tree_depth(tree, tree.left[node]), tree_depth(tree, tree.right[node]))


@dataclass
class RandomForestModel:
    trees: list[Tree]
    n_classes: int
    max_depth: int
    seed: int
    meta: dict = field(default_factory=dict)

    def predict_proba(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64).reshape(-1, 2)
        out = np.zeros((len(X), self.n_classes))
        for t in self.trees:
            out += t.value[t.apply(X)]
        return out / len(self.trees)


def rf_fit(positions, species, n_classes: int | None = None, trees: int = 50, max_depth: int = 8,
           seed: int = 0) -> RandomForestModel:
    """Bootstrap-aggregated Gini trees on (x, y); tree ``t`` draws from stream (seed, t)."""
    X = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    y = np.asarray(species, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("cannot fit a random forest on an empty training set")
    n_classes = int(n_classes if n_classes is not None else y.max() + 1)
    forest = []
    for t in range(trees):
        rng = np.random.default_rng(np.random.SeedSequence([seed, t]))
        rows = rng.integers(0, len(y), size=len(y))
        forest.append(fit_tree(X[rows], y[rows], n_classes, max_depth))
    return RandomForestModel(forest, n_classes, max_depth, seed)


def rf_predict(model: RandomForestModel, q, limit: int = PREDICTION_LIMIT,
               occ_id: int | None = None) -> RankedPrediction:
    return rank_scores(model.predict_proba(np.asarray(q).reshape(1, 2))[0], limit, occ_id)


FOREST_MAGIC = b"SDMF"
FOREST_VERSION = 1


def _write_node(buf: bytearray, tree: Tree, node: int) -> None:
    if tree.feature[node] < 0:
        buf += struct.pack("<B", 0)
        buf += np.ascontiguousarray(tree.value[node], dtype="<f8").tobytes()
    else:
        buf += struct.pack("<BBd", 1, int(tree.feature[node]), float(tree.threshold[node]))
        _write_node(buf, tree, int(tree.left[node]))
        _write_node(buf, tree, int(tree.right[node]))


def save_forest(model: RandomForestModel, path) -> None:
    """``SDMF`` binary (preorder nodes) plus ``<path>.json`` metadata."""
    buf = bytearray(FOREST_MAGIC)
    buf += struct.pack("<HII", FOREST_VERSION, len(model.trees), model.n_classes)
    for t in model.trees:
        _write_node(buf, t, 0)
    Path(path).write_bytes(bytes(buf))
    meta = {"seed": model.seed, "max_depth": model.max_depth, "trees": len(model.trees),
            "n_species": model.n_classes}
    meta.update(model.meta)
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_forest(path) -> RandomForestModel:
    data = Path(path).read_bytes()
    if data[:4] != FOREST_MAGIC:
        raise ValueError(f"{path}: not an SDMF forest checkpoint")
    version, n_trees, n_classes = struct.unpack_from("<HII", data, 4)
    if version != FOREST_VERSION:
        raise ValueError(f"{path}: unsupported forest version {version}")
    off = 4 + struct.calcsize("<HII")
    trees = []
    for _ in range(n_trees):
        feature, threshold, left, right, value = [], [], [], [], []

        def read():
            nonlocal off
            node = len(feature)
            (is_split,) = struct.unpack_from("<B", data, off)
            off += 1
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            if not is_split:
                value.append(np.frombuffer(data, dtype="<f8", count=n_classes, offset=off).copy())
                off += 8 * n_classes
                return node
            value.append(np.zeros(n_classes))
            f, t = struct.unpack_from("<Bd", data, off)
            off += struct.calcsize("<Bd")
            feature[node], threshold[node] = f, t
            left[node] = read()
            right[node] = read()
            return node

        read()
        tree = Tree(np.asarray(feature, dtype=np.int64), np.asarray(threshold),
                    np.asarray(left, dtype=np.int64), np.asarray(right, dtype=np.int64), np.asarray(value))
        tree.depth = tree_depth(tree)
        trees.append(tree)
    meta = json.loads(Path(str(path) + ".json").read_text())
    return RandomForestModel(trees, n_classes, int(meta["max_depth"]), int(meta["seed"]))
