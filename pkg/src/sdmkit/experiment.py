"""End-to-end desk experiment: synthetic world -> split -> features -> all models -> test MRR."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from sdmkit.data import Dataset, group_positions
from sdmkit.evaluation import EvalReport, holdout_protocol, ideal_mrr, mrr_from_scores
from sdmkit.raster import build_env_tensors, compute_norm_stats
from sdmkit.spatial import LocationIndex, abundance_matrix
from sdmkit.synth import World, WorldSpec, generate_world, sample_occurrences, split_100m
from sdmkit.zoo import MODEL_KINDS, ModelConfig, ModelInputs, desk_config, late_fuse_scores, predict_scores, \
    train_model

log = logging.getLogger(__name__)

LATE_FUSION = "late-fusion"


@dataclass
class DeskConfig:
    world: WorldSpec = field(default_factory=WorldSpec)
    n_occurrences: int = 6000
    test_fraction: float = 0.25
    patch_size: int = 8
    block_widths: tuple[int, ...] = (16, 32)
    feature_width: int = 64
    epochs: int = 40
    cooc_epochs: int = 30
    batch_size: int = 64
    lr: float = 0.05
    milestones: tuple[int, ...] = (30,)
    val_every: int = 5
    dropout_cnn: float = 0.3
    dropout_jnn: float = 0.3
    seed: int = 0
    workers: int = 1

    @classmethod
    def from_json(cls, d: dict) -> DeskConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown desk config keys: {sorted(unknown)}")
        d = dict(d)
        if "world" in d and isinstance(d["world"], dict):
            d["world"] = WorldSpec.from_json(d["world"])
        return cls(**d)

    def to_json(self) -> dict:
        d = asdict(self)
        d["block_widths"] = list(self.block_widths)
        d["milestones"] = list(self.milestones)
        return d

    def model_config(self, kind: str, n_species: int, in_channels: int) -> ModelConfig:
        common = {"seed": self.seed}
        if kind in ("spa-cc", "spa-rf"):
            return ModelConfig(kind, n_species=n_species, **common)
        if kind == "cooc-nn":
            return ModelConfig(kind, n_species=n_species, epochs=self.cooc_epochs, **common)
        dropout = self.dropout_cnn if kind == "env-cnn" else self.dropout_jnn
        return desk_config(kind, n_species, in_channels=in_channels, patch_size=self.patch_size,
                           block_widths=self.block_widths, feature_width=self.feature_width,
                           epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           milestones=self.milestones, val_every=self.val_every, dropout=dropout, **common)


@dataclass
class DeskData:
    world: World
    dataset: Dataset
    splits: dict[str, ModelInputs]
    norm_checksum: str


@dataclass
class DeskResult:
    reports: dict[str, EvalReport]
    scores: dict[str, np.ndarray]
    timings: dict[str, float]
    data: DeskData

    def mrr(self, kind: str) -> float:
        return self.reports[kind].mrr


def prepare_desk(cfg: DeskConfig) -> DeskData:
    """World, sample, 100 m split, holdout, abundance vectors and env tensors.

    ``cfg.seed`` seeds everything, including the world (it overrides ``cfg.world.seed``).
    """
    world = generate_world(replace(cfg.world, seed=cfg.seed))
    ds = sample_occurrences(world, cfg.n_occurrences, seed=cfg.seed)
    ds = split_100m(ds, cfg.test_fraction, seed=cfg.seed)
    ds = holdout_protocol(ds, seed=cfg.seed)
    train_rows = ds.mask("train")
    index = LocationIndex(ds.positions[train_rows], ds.species[train_rows], ds.n_species)
    cooc = abundance_matrix(index, ds.positions, exclude_exact=True)
    norm = compute_norm_stats(world.stack, ds.positions[train_rows], cfg.patch_size)
    env = build_env_tensors(world.stack, ds.positions, norm, cfg.patch_size, workers=cfg.workers)
    full = ModelInputs(ds.occ_ids, ds.positions, ds.species, env, cooc)
    splits = {tag: full.take(np.nonzero(ds.mask(tag))[0]) for tag in ("train", "validation", "test")}
    return DeskData(world, ds, splits, norm.checksum())


def run_desk(cfg: DeskConfig, kinds=MODEL_KINDS, data: DeskData | None = None) -> DeskResult:
    """Train the requested models and report test MRR (with the ideal bound
    for position-only inputs). Late fusion is added when both Env-CNN and
    Cooc-NN are present."""
    data = data if data is not None else prepare_desk(cfg)
    train, val, test = data.splits["train"], data.splits["validation"], data.splits["test"]
    n_species = data.dataset.n_species
    in_channels = data.world.stack.n_channels
    groups = [tuple(p) for p in test.positions]
    ideal = ideal_mrr(groups, test.species)
    reports, scores, timings = {}, {}, {}
    for kind in kinds:
        t0 = time.perf_counter()
        model = train_model(cfg.model_config(kind, n_species, in_channels), train, val, data.norm_checksum)
        scores[kind] = predict_scores(model, test)
        timings[kind] = time.perf_counter() - t0
        reports[kind] = mrr_from_scores(scores[kind], test.species)
        reports[kind].ideal_mrr = ideal
        reports[kind].meta = {"best_epoch": model.best_epoch, "best_val_mrr": model.best_val_mrr}
        log.info("%s: test MRR %.4f (%.1fs)", kind, reports[kind].mrr, timings[kind])
    if "env-cnn" in scores and "cooc-nn" in scores:
        scores[LATE_FUSION] = late_fuse_scores(scores["env-cnn"], scores["cooc-nn"])
        reports[LATE_FUSION] = mrr_from_scores(scores[LATE_FUSION], test.species)
        reports[LATE_FUSION].ideal_mrr = ideal
    return DeskResult(reports, scores, timings, data)
