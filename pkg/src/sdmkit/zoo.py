"""The compared models: Spa-CC, Spa-RF, Cooc-NN, Env-CNN, Env-Cooc-JNN and late fusion.

Neural models share one training loop (mini-batch SGD with momentum, periodic
validation MRR, best checkpoint retained). Spatial models are fitted directly.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from sdmkit import PREDICTION_LIMIT
from sdmkit.evaluation import RankedPrediction, mrr_from_scores, rank_scores
from sdmkit.nn import (BatchNorm, Conv3x3, Dense, Dropout, GlobalAvgPool, MaxPool2, Network, ReLU,
                       SGDMomentum)
from sdmkit.nn.checkpoint import load_weights, save_weights
from sdmkit.spatial import (LocationIndex, RandomForestModel, closest_location_scores, load_forest, rf_fit,
                            save_forest)

log = logging.getLogger(__name__)

MODEL_KINDS = ("spa-cc", "spa-rf", "cooc-nn", "env-cnn", "env-cooc-jnn")
NEURAL_KINDS = ("cooc-nn", "env-cnn", "env-cooc-jnn")
FULL_SPECIES = 3336
FULL_CHANNELS = 77
FULL_PATCH = 64
FULL_FEATURES = 2048


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    """Every constant a model needs. ``None`` fields take the per-kind defaults."""

    kind: str
    n_species: int = FULL_SPECIES
    in_channels: int = FULL_CHANNELS
    patch_size: int = FULL_PATCH
    block_widths: tuple[int, ...] = (64, 128, 256, 512)
    feature_width: int = FULL_FEATURES
    cooc_width: int = 32
    hidden_width: int = 256
    dropout: float | None = None
    lr: float | None = None
    momentum: float = 0.9
    batch_size: int | None = None
    milestones: tuple[int, ...] | None = None
    epochs: int = 200
    val_every: int | None = None
    log1p: bool = False
    rf_trees: int = 50
    rf_depth: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        self.block_widths = tuple(int(w) for w in self.block_widths)
        env = self.kind in ("env-cnn", "env-cooc-jnn")
        defaults = {
            "dropout": {"env-cnn": 0.7, "env-cooc-jnn": 0.8}.get(self.kind, 0.0),
            "lr": 0.001 if self.kind == "cooc-nn" else 0.1,
            "batch_size": 32 if self.kind == "cooc-nn" else 128,
            "milestones": () if self.kind == "cooc-nn" else (90, 130, 150, 170),
            "val_every": 1 if self.kind == "cooc-nn" else 10,
        }
        for key, value in defaults.items():
            if getattr(self, key) is None:
                setattr(self, key, value)
        self.milestones = tuple(int(m) for m in self.milestones)
        positive = ["n_species", "cooc_width", "hidden_width", "batch_size", "epochs", "val_every",
                    "rf_trees", "rf_depth"]
        if env:
            positive += ["in_channels", "patch_size", "feature_width"]
            if not self.block_widths or min(self.block_widths) <= 0:
                raise ConfigError("block_widths must be a non-empty list of positive widths")
            if self.patch_size % (2 ** len(self.block_widths)):
                raise ConfigError(f"patch size {self.patch_size} is not divisible by "
                                  f"2^{len(self.block_widths)} (one halving per block)")
        for key in positive:
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")

    @property
    def uses_env(self) -> bool:
        return self.kind in ("env-cnn", "env-cooc-jnn")

    @property
    def uses_cooc(self) -> bool:
        return self.kind in ("cooc-nn", "env-cooc-jnn")

    def to_json(self) -> dict:
        d = asdict(self)
        d["block_widths"] = list(self.block_widths)
        d["milestones"] = list(self.milestones)
        return d

    @classmethod
    def from_json(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# -- architectures --------------------------------------------------------------

def env_backbone(cfg: ModelConfig) -> list:
    """conv3x3 -> BN -> ReLU -> maxpool2 per block, global average pool, dense feature(F) -> ReLU."""
    layers = []
    cin = cfg.in_channels
    for w in cfg.block_widths:
        layers += [Conv3x3(cin, w), BatchNorm(w), ReLU(), MaxPool2()]
        cin = w
    layers += [GlobalAvgPool(), Dense(cin, cfg.feature_width), ReLU()]
    return layers


def build_cooc_nn(cfg: ModelConfig, dtype=np.float32) -> Network:
    n = cfg.n_species
    layers = [Dense(n, cfg.hidden_width), BatchNorm(cfg.hidden_width), ReLU(), Dense(cfg.hidden_width, n)]
    return Network([layers], input_shapes=[(n,)], seed=cfg.seed, dtype=dtype)


def build_env_cnn(cfg: ModelConfig, dtype=np.float32) -> Network:
    layers = env_backbone(cfg) + [Dropout(cfg.dropout), Dense(cfg.feature_width, cfg.n_species)]
    shape = (cfg.in_channels, cfg.patch_size, cfg.patch_size)
    return Network([layers], input_shapes=[shape], seed=cfg.seed, dtype=dtype)


def build_joint_model(cfg: ModelConfig, dtype=np.float32) -> Network:
    """Env backbone and a dense(32) -> BN -> dense(32) co-occurrence branch,
    concatenated, then BN -> dropout -> classifier."""
    n = cfg.n_species
    cooc = [Dense(n, cfg.cooc_width), BatchNorm(cfg.cooc_width), Dense(cfg.cooc_width, cfg.cooc_width)]
    width = cfg.feature_width + cfg.cooc_width
    head = [BatchNorm(width), Dropout(cfg.dropout), Dense(width, n)]
    shapes = [(cfg.in_channels, cfg.patch_size, cfg.patch_size), (n,)]
    return Network([env_backbone(cfg), cooc], head, input_shapes=shapes, seed=cfg.seed, dtype=dtype)


def build_network(cfg: ModelConfig, dtype=np.float32) -> Network:
    builders = {"cooc-nn": build_cooc_nn, "env-cnn": build_env_cnn, "env-cooc-jnn": build_joint_model}
    if cfg.kind not in builders:
        raise ConfigError(f"{cfg.kind} is not a neural model")
    return builders[cfg.kind](cfg, dtype)


def concat_width(net: Network) -> int:
    """Feature width entering the shared head of a multi-branch network."""
    return net.head.layers[0].features if len(net.branches) > 1 else 0


# -- inputs and trained models ----------------------------------------------------

@dataclass
class ModelInputs:
    """Per-occurrence inputs of one split, row-aligned."""

    occ_ids: np.ndarray
    positions: np.ndarray
    species: np.ndarray
    env: np.ndarray | None = None
    cooc: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.occ_ids)

    def take(self, idx) -> ModelInputs:
        return ModelInputs(self.occ_ids[idx], self.positions[idx], self.species[idx],
                           None if self.env is None else self.env[idx],
                           None if self.cooc is None else self.cooc[idx])


def network_inputs(cfg: ModelConfig, data: ModelInputs) -> list[np.ndarray]:
    out = []
    if cfg.uses_env:
        if data.env is None:
            raise ConfigError(f"{cfg.kind} needs environmental tensors")
        out.append(data.env)
    if cfg.uses_cooc:
        if data.cooc is None:
            raise ConfigError(f"{cfg.kind} needs abundance vectors")
        z = data.cooc.astype(np.float32)
        out.append(np.log1p(z) if cfg.log1p else z)
    return out


@dataclass
class TrainedModel:
    config: ModelConfig
    network: Network | None = None
    forest: RandomForestModel | None = None
    index: LocationIndex | None = None
    best_val_mrr: float = float("nan")
    best_epoch: int = -1
    history: list[dict] = field(default_factory=list)
    norm_checksum: str | None = None


def _evaluate(net: Network, cfg: ModelConfig, data: ModelInputs) -> tuple[float, float]:
    probs = net.predict_proba(network_inputs(cfg, data))
    loss = float(-np.mean(np.log(np.maximum(probs[np.arange(len(data)), data.species], 1e-300))))
    return loss, mrr_from_scores(probs, data.species).mrr


def train_model(cfg: ModelConfig, train: ModelInputs, validation: ModelInputs | None = None,
                norm_checksum: str | None = None) -> TrainedModel:
    """Fit one model.

    Neural models validate after every ``val_every`` completed epochs and keep
    the weights with the highest validation MRR (earliest on ties). The
    history ends with a ``final`` row scoring the retained weights.
    """
    if len(train) == 0:
        raise TrainingError("empty training split")
    if cfg.kind == "spa-cc":
        index = LocationIndex(train.positions, train.species, cfg.n_species)
        return TrainedModel(cfg, index=index, norm_checksum=norm_checksum)
    if cfg.kind == "spa-rf":
        forest = rf_fit(train.positions, train.species, cfg.n_species, cfg.rf_trees, cfg.rf_depth, cfg.seed)
        return TrainedModel(cfg, forest=forest, norm_checksum=norm_checksum)
    if validation is None or len(validation) == 0:
        raise TrainingError("empty validation split")

    net = build_network(cfg)
    opt = SGDMomentum(cfg.lr, cfg.momentum, cfg.milestones)
    xs = network_inputs(cfg, train)
    y = train.species
    history = []
    best_state, best_mrr, best_epoch = None, -math.inf, -1
    for epoch in range(cfg.epochs):
        perm = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7, epoch])).permutation(len(train))
        losses = []
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            loss, _ = net.loss_and_grad([x[idx] for x in xs], y[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"{cfg.kind}: non-finite loss at epoch {epoch}, batch starting "
                                    f"{start}, lr {opt.lr_at(epoch):g}")
            opt.step(net.parameters(), net.gradients(), epoch)
            losses.append(loss)
        history.append({"epoch": epoch + 1, "split": "train", "loss": float(np.mean(losses)), "mrr": None})
        if (epoch + 1) % cfg.val_every == 0:
            vloss, vmrr = _evaluate(net, cfg, validation)
            history.append({"epoch": epoch + 1, "split": "validation", "loss": vloss, "mrr": vmrr})
            log.info("%s epoch %d: train loss %.4f, validation MRR %.4f", cfg.kind, epoch + 1,
                     history[-2]["loss"], vmrr)
            if vmrr > best_mrr:
                best_state, best_mrr, best_epoch = net.copy_state(), vmrr, epoch + 1
    if best_state is None:
        # fewer epochs than the validation cadence: validate the final weights once
        vloss, vmrr = _evaluate(net, cfg, validation)
        history.append({"epoch": cfg.epochs, "split": "validation", "loss": vloss, "mrr": vmrr})
        best_state, best_mrr, best_epoch = net.copy_state(), vmrr, cfg.epochs
    net.load_state(best_state)
    floss, fmrr = _evaluate(net, cfg, validation)
    history.append({"epoch": best_epoch, "split": "final", "loss": floss, "mrr": fmrr})
    return TrainedModel(cfg, network=net, best_val_mrr=best_mrr, best_epoch=best_epoch,
                        history=history, norm_checksum=norm_checksum)


def predict_scores(model: TrainedModel, data: ModelInputs) -> np.ndarray:
    """(n, N) scores; probabilities for every kind except Spa-CC."""
    cfg = model.config
    if cfg.kind == "spa-cc":
        return np.array([closest_location_scores(model.index, q) for q in data.positions]).reshape(-1, cfg.n_species)
    if cfg.kind == "spa-rf":
        return model.forest.predict_proba(data.positions)
    return model.network.predict_proba(network_inputs(cfg, data))


def predict(model: TrainedModel, data: ModelInputs, limit: int = PREDICTION_LIMIT) -> list[RankedPrediction]:
    scores = predict_scores(model, data)
    return [rank_scores(s, limit, int(o)) for s, o in zip(scores, data.occ_ids)]


def late_fuse_scores(a: np.ndarray, b: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"late fusion needs equal shapes, got {a.shape} and {b.shape}")
    for name, p in (("a", a), ("b", b)):
        if np.any(np.abs(p.sum(axis=-1) - 1) > tol):
            raise ValueError(f"late fusion input {name} is not a probability vector")
    return (a + b) / 2


def late_fuse(a, b, limit: int = PREDICTION_LIMIT, occ_id: int | None = None) -> RankedPrediction:
    """Average two probability vectors and re-rank."""
    return rank_scores(late_fuse_scores(a, b), limit, occ_id)


# -- persistence ------------------------------------------------------------------

def save_model(model: TrainedModel, path) -> None:
    path = Path(path)
    meta = {"config": model.config.to_json(), "best_val_mrr": model.best_val_mrr,
            "best_epoch": model.best_epoch, "norm_checksum": model.norm_checksum}
    if model.network is not None:
        opt = SGDMomentum(model.config.lr, model.config.momentum, model.config.milestones)
        meta.update({"epoch": model.best_epoch, "lr": opt.lr_at(max(model.best_epoch - 1, 0))})
        save_weights(model.network, path, meta)
    elif model.forest is not None:
        model.forest.meta = meta
        save_forest(model.forest, path)
    else:
        np.savez(path, locations=model.index.locations, counts=model.index.counts.toarray())
        if path.suffix != ".npz":
            Path(str(path) + ".npz").rename(path)
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_model(path) -> TrainedModel:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    cfg = ModelConfig.from_json(meta["config"])
    common = {"best_val_mrr": meta.get("best_val_mrr", float("nan")),
              "best_epoch": meta.get("best_epoch", -1), "norm_checksum": meta.get("norm_checksum")}
    if cfg.kind in NEURAL_KINDS:
        net, _ = load_weights(path)
        return TrainedModel(cfg, network=net, **common)
    if cfg.kind == "spa-rf":
        return TrainedModel(cfg, forest=load_forest(path), **common)
    with np.load(path) as z:
        locations, counts = z["locations"], z["counts"]
    loc_idx, sp = np.nonzero(counts)
    reps = counts[loc_idx, sp]
    index = LocationIndex(np.repeat(locations[loc_idx], reps, axis=0), np.repeat(sp, reps), cfg.n_species)
    return TrainedModel(cfg, index=index, **common)


def write_predictions(predictions: list[RankedPrediction], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["occ_id", "rank", "species_id", "score"])
        for p in predictions:
            for r, (s, sc) in enumerate(zip(p.species, p.scores), start=1):
                w.writerow([p.occ_id, r, int(s), repr(float(sc))])


def read_predictions(path) -> list[RankedPrediction]:
    rows: dict[int, list] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["occ_id", "rank", "species_id", "score"]:
            raise ValueError(f"{path}: expected header occ_id,rank,species_id,score")
        for r in reader:
            rows.setdefault(int(r["occ_id"]), []).append((int(r["rank"]), int(r["species_id"]), float(r["score"])))
    out = []
    for occ, items in rows.items():
        items.sort()
        out.append(RankedPrediction(occ, [s for _, s, _ in items], [sc for _, _, sc in items]))
    return out


def write_history(history: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "split", "loss", "mrr"])
        for h in history:
            w.writerow([h["epoch"], h["split"], repr(float(h["loss"])),
                        "" if h["mrr"] is None else repr(float(h["mrr"]))])


def desk_config(kind: str, n_species: int, **overrides) -> ModelConfig:
    """Small widths for CPU runs; everything else keeps the per-kind defaults."""
    base = {"n_species": n_species, "in_channels": 8, "patch_size": 32, "block_widths": (16, 32),
            "feature_width": 64}
    base.update(overrides)
    return ModelConfig(kind, **base)


__all__ = ["ModelConfig", "ModelInputs", "TrainedModel", "build_cooc_nn", "build_env_cnn",
           "build_joint_model", "build_network", "train_model", "predict", "predict_scores",
           "late_fuse", "late_fuse_scores", "save_model", "load_model", "write_predictions",
           "read_predictions", "write_history", "desk_config"]
