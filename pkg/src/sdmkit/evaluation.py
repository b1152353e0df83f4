"""Mean Reciprocal Rank, the ideal-MRR bound and the validation protocols."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from sdmkit import PREDICTION_LIMIT

HIT_KS = (1, 10, 100)


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class RankedPrediction:
    occ_id: int | None
    species: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        species = np.asarray(self.species, dtype=np.int64)
        scores = np.asarray(self.scores, dtype=np.float64)
        if species.shape != scores.shape:
            raise EvaluationError("species and scores differ in length")
        if len(np.unique(species)) != len(species):
            raise EvaluationError(f"query {self.occ_id}: duplicate species in ranking")
        if np.any(np.diff(scores) > 0):
            raise EvaluationError(f"query {self.occ_id}: scores increase along the ranking")
        object.__setattr__(self, "species", species)
        object.__setattr__(self, "scores", scores)

    def __len__(self) -> int:
        return len(self.species)

    def rank_of(self, species: int) -> int | None:
        hit = np.nonzero(self.species == species)[0]
        return int(hit[0]) + 1 if hit.size else None


def ranking_order(scores: np.ndarray) -> np.ndarray:
    """Species ids sorted by score descending, ties broken by id ascending."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(len(scores)), -scores))


def rank_scores(scores, limit: int = PREDICTION_LIMIT, occ_id: int | None = None) -> RankedPrediction:
    scores = np.asarray(scores, dtype=np.float64)
    order = ranking_order(scores)[:limit]
    return RankedPrediction(occ_id, order, scores[order])


def truth_ranks(scores: np.ndarray, truth) -> np.ndarray:
    """1-based rank of ``truth[i]`` in row ``i`` of ``scores`` under ``ranking_order``."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    truth = np.asarray(truth, dtype=np.int64)
    ts = scores[np.arange(len(truth)), truth][:, None]
    ids = np.arange(scores.shape[1])[None, :]
    ahead = (scores > ts) | ((scores == ts) & (ids < truth[:, None]))
    return 1 + ahead.sum(axis=1)


def reciprocal_ranks(scores: np.ndarray, truth, limit: int = PREDICTION_LIMIT) -> np.ndarray:
    ranks = truth_ranks(scores, truth)
    return np.where(ranks <= limit, 1.0 / ranks, 0.0)


@dataclass
class EvalReport:
    q: int
    mrr: float
    reciprocal_ranks: np.ndarray
    hit_rates: dict[int, float]
    ideal_mrr: float | None = None
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"Q": self.q, "MRR": self.mrr, "ideal_MRR": self.ideal_mrr,
                "hit_rates": {str(k): v for k, v in self.hit_rates.items()},
                "reciprocal_ranks": [float(r) for r in self.reciprocal_ranks],
                "meta": self.meta}

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_csv(self, path, occ_ids=None) -> None:
        occ_ids = list(occ_ids) if occ_ids is not None else list(range(self.q))
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["occ_id", "reciprocal_rank"])
            for o, r in zip(occ_ids, self.reciprocal_ranks):
                w.writerow([o, repr(float(r))])


def _report(rr: np.ndarray, ranks: np.ndarray, ideal: float | None) -> EvalReport:
    q = len(rr)
    hits = {k: float(np.mean((ranks > 0) & (ranks <= k))) for k in HIT_KS}
    return EvalReport(q, float(rr.mean()), rr, hits, ideal)


def mrr(predictions, truth, groups=None, limit: int = PREDICTION_LIMIT) -> EvalReport:
    """MRR of ranked predictions against true species.

    ``truth`` is either a mapping occ_id -> species (every key needs a
    prediction) or a sequence aligned with ``predictions``. A truth species
    missing from the (at most ``limit`` long) list contributes 0. If ``groups``
    gives the model-visible input key of each query, the report carries the
    ideal MRR of that grouping.
    """
    predictions = list(predictions)
    if isinstance(truth, dict):
        by_id = {p.occ_id: p for p in predictions}
        missing = [o for o in truth if o not in by_id]
        if missing:
            raise EvaluationError(f"no prediction for query {missing[0]}")
        predictions = [by_id[o] for o in truth]
        truth = list(truth.values())
    truth = list(truth)
    if len(truth) != len(predictions):
        raise EvaluationError(f"{len(predictions)} predictions for {len(truth)} queries")
    if not truth:
        raise EvaluationError("no queries")
    ranks = np.zeros(len(truth), dtype=np.int64)
    for i, (p, t) in enumerate(zip(predictions, truth)):
        r = p.rank_of(int(t))
        if r is not None and r <= limit:
            ranks[i] = r
    rr = np.where(ranks > 0, 1.0 / np.maximum(ranks, 1), 0.0)
    ideal = ideal_mrr(groups, truth, limit) if groups is not None else None
    return _report(rr, ranks, ideal)


def mrr_from_scores(scores: np.ndarray, truth, groups=None, limit: int = PREDICTION_LIMIT) -> EvalReport:
    """Same as ``mrr`` on ``rank_scores(scores[i])``, without materializing the rankings."""
    ranks = truth_ranks(scores, truth)
    ranks = np.where(ranks <= limit, ranks, 0)
    rr = np.where(ranks > 0, 1.0 / np.maximum(ranks, 1), 0.0)
    ideal = ideal_mrr(groups, truth, limit) if groups is not None else None
    return _report(rr, ranks, ideal)


def ideal_mrr(groups, truths, limit: int = PREDICTION_LIMIT) -> float:
    """Best MRR reachable when queries sharing a group key must share one ranking.

    Inside a group the optimal ranking lists the distinct true species by
    decreasing count, so the i-th most frequent species earns count / i.
    """
    groups = [g if np.isscalar(g) else tuple(np.ravel(g).tolist()) for g in groups]
    truths = [int(t) for t in truths]
    if len(groups) != len(truths):
        raise EvaluationError("groups and truths differ in length")
    if not truths:
        raise EvaluationError("empty query set")
    per_group: dict = {}
    for g, t in zip(groups, truths):
        per_group.setdefault(g, Counter())[t] += 1
    total = 0.0
    for counter in per_group.values():
        counts = sorted(counter.values(), reverse=True)[:limit]
        total += sum(c / (i + 1) for i, c in enumerate(counts))
    return total / len(truths)


def random_ranking_mrr(n_species: int, limit: int = PREDICTION_LIMIT) -> float:
    """Expected MRR of a uniformly random permutation of ``n_species`` species."""
    return sum(1.0 / k for k in range(1, min(limit, n_species) + 1)) / n_species


# -- validation protocols ------------------------------------------------------

def holdout_protocol(ds, seed: int, fraction: float = 0.1, eligible=None):
    """10% validation, then 10% of the remainder as pre-validation, the rest train.

    Only rows in ``eligible`` (default: everything not tagged ``test``) are
    re-tagged. Returns a new Dataset.
    """
    if eligible is None:
        eligible = np.nonzero(ds.split != "test")[0]
    eligible = np.asarray(eligible, dtype=np.int64)
    n = len(eligible)
    if n < 10:
        raise EvaluationError(f"holdout needs at least 10 occurrences, got {n}")
    n_val = int(math.floor(fraction * n + 0.5))
    n_pre = int(math.floor(fraction * (n - n_val) + 0.5))
    perm = np.random.default_rng(seed).permutation(eligible)
    tags = ds.split.copy()
    tags[perm] = "train"
    tags[perm[:n_val]] = "validation"
    tags[perm[n_val:n_val + n_pre]] = "prevalidation"
    return ds.with_split(tags)


@dataclass
class MonteCarloResult:
    kind: str
    per_split: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_split))


def monte_carlo_split(ds, seed: int, fraction: float = 0.1, drop_singletons: bool = False):
    """Random train/validation split keeping every validation species in train.

    With ``drop_singletons`` species seen only once are tagged ``none`` first.
    """
    counts = np.bincount(ds.species, minlength=ds.n_species)
    usable = counts[ds.species] >= (2 if drop_singletons else 1)
    rows = np.nonzero(usable)[0]
    rng = np.random.default_rng(seed)
    perm = rng.permutation(rows)
    n_val = int(math.floor(fraction * len(rows) + 0.5))
    tags = np.full(len(ds), "none", dtype="<U13")
    tags[perm] = "train"
    tags[perm[:n_val]] = "validation"
    in_train = np.zeros(ds.n_species, dtype=bool)
    in_train[ds.species[tags == "train"]] = True
    for i in perm[:n_val]:
        s = ds.species[i]
        if not in_train[s]:
            tags[i] = "train"
            in_train[s] = True
    return ds.with_split(tags)


def monte_carlo_protocol(ds, kind: str, splits: int = 20, seed: int = 0, seed_stride: int = 1,
                         fraction: float = 0.1, rf_trees: int = 50, rf_depth: int = 8,
                         limit: int = PREDICTION_LIMIT) -> MonteCarloResult:
    """Mean validation MRR of a spatial model over ``splits`` random splits.

    Split ``i`` uses seed ``seed + i * seed_stride``.
    """
    from sdmkit.spatial import LocationIndex, closest_location_scores, rf_fit

    if kind not in ("spa-cc", "spa-rf"):
        raise EvaluationError(f"Monte Carlo protocol covers spa-cc and spa-rf, not {kind!r}")
    per_split = []
    for i in range(splits):
        split_seed = seed + i * seed_stride
        part = monte_carlo_split(ds, split_seed, fraction, drop_singletons=kind == "spa-rf")
        train = part.mask("train")
        val = np.nonzero(part.mask("validation"))[0]
        if kind == "spa-cc":
            index = LocationIndex(part.positions[train], part.species[train], part.n_species)
            scores = np.array([closest_location_scores(index, part.positions[j]) for j in val])
        else:
            model = rf_fit(part.positions[train], part.species[train], part.n_species,
                           trees=rf_trees, max_depth=rf_depth, seed=split_seed)
            scores = model.predict_proba(part.positions[val])
        per_split.append(mrr_from_scores(scores, part.species[val], limit=limit).mrr)
    return MonteCarloResult(kind, per_split)
