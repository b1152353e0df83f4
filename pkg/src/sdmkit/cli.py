"""``sdmkit`` command line: one subcommand per pipeline stage, composed through files.

Exit codes: 0 success, 1 validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from sdmkit import PREDICTION_LIMIT, SPLIT_TAGS
from sdmkit.data import DataError, Dataset, group_positions, load_occurrences, load_split, \
    write_occurrences, write_species_table, write_split
from sdmkit.evaluation import EvaluationError, holdout_protocol, ideal_mrr, mrr, rank_scores
from sdmkit.nn.gradcheck import run_gradcheck, summarize
from sdmkit.raster import RasterError, build_env_tensors, compute_norm_stats, load_raster_stack, \
    read_tensor_cache, write_raster_stack, write_tensor_cache
from sdmkit.spatial import LocationIndex, abundance_matrix
from sdmkit.synth import WorldSpec, check_split, generate_world, sample_occurrences, split_100m
from sdmkit.zoo import MODEL_KINDS, ConfigError, ModelConfig, ModelInputs, late_fuse_scores, load_model, \
    predict_scores, read_predictions, save_model, train_model, write_history, write_predictions

log = logging.getLogger("sdmkit")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    """Bad command line; reported with exit code 1."""


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class RunConfig:
    """Defaults for the pipeline subcommands; explicit flags win."""

    occurrences: str | None = None
    split: str | None = None
    rasters: str | None = None
    cache: str | None = None
    output_dir: str | None = None
    crs: str = "planar"
    model: dict | None = None
    protocol: str = "holdout"
    seed: int = 0
    workers: int = 1

    @classmethod
    def load(cls, path) -> RunConfig:
        path = Path(path)
        d = _read_json(path)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"{path}: unknown run config keys {sorted(unknown)}")
        cfg = cls(**d)
        if cfg.protocol not in ("holdout", "monte-carlo"):
            raise ConfigError(f"{path}: protocol must be holdout or monte-carlo")
        # relative paths are resolved against the config file and must exist now
        base = path.parent
        for key in ("occurrences", "split", "rasters", "cache"):
            value = getattr(cfg, key)
            if value is not None:
                p = Path(value) if Path(value).is_absolute() else base / value
                if not p.exists():
                    raise ConfigError(f"{path}: {key} path {p} does not exist")
                setattr(cfg, key, str(p))
        if cfg.output_dir is not None and not Path(cfg.output_dir).is_absolute():
            cfg.output_dir = str(base / cfg.output_dir)
        return cfg


def _read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such file")
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return d


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _pick(args, cfg: RunConfig, name: str, required: bool = True):
    value = getattr(args, name, None)
    if value is None:
        value = getattr(cfg, name, None)
    if value is None and required:
        raise UsageError(f"--{name.replace('_', '-')} is required (flag or run config)")
    return value


def _dataset(args, cfg: RunConfig, with_split: bool = True) -> Dataset:
    ds = load_occurrences(_pick(args, cfg, "occurrences"), crs=_pick(args, cfg, "crs"))
    if with_split:
        ds = load_split(ds, _pick(args, cfg, "split"))
    return ds


def _inputs(ds: Dataset, rows: np.ndarray, env: np.ndarray | None, cooc: np.ndarray | None) -> ModelInputs:
    return ModelInputs(ds.occ_ids[rows], ds.positions[rows], ds.species[rows],
                       None if env is None else env[rows], None if cooc is None else cooc[rows])


def _train_index(ds: Dataset) -> LocationIndex:
    train = ds.mask("train")
    if not np.any(train):
        raise DataError("split has no train occurrences")
    return LocationIndex(ds.positions[train], ds.species[train], ds.n_species)


def _env_for(ds: Dataset, cache_path) -> tuple[np.ndarray, dict]:
    tensors, index = read_tensor_cache(cache_path)
    pos = {int(o): i for i, o in enumerate(index["occ_ids"])}
    missing = [int(o) for o in ds.occ_ids if int(o) not in pos]
    if missing:
        raise DataError(f"{cache_path}: no tensor for occurrence {missing[0]}")
    return tensors[[pos[int(o)] for o in ds.occ_ids]], index


# -- subcommands ------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> int:
    d = _read_json(args.spec)
    n_occ = int(d.pop("n_occurrences", 5000))
    if args.seed is not None:
        d["seed"] = args.seed
    try:
        spec = WorldSpec.from_json(d)
    except TypeError as e:
        raise ConfigError(f"{args.spec}: {e}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    world = generate_world(spec)
    ds = sample_occurrences(world, n_occ, seed=spec.seed)
    write_raster_stack(world.stack, out / "rasters")
    write_occurrences(ds, out / "occurrences.csv")
    write_species_table(ds, out / "species.csv")
    truth = world.to_json()
    truth["n_occurrences"] = n_occ
    _write_json(out / "world.json", truth)
    counts = ds.species_counts()
    n_loc = len(group_positions(ds.positions)[0])
    print(f"species: {ds.n_species}  occurrences: {len(ds)}  distinct locations: {n_loc}")
    print(f"per-species counts: min {counts.min()}  median {int(np.median(counts))}  max {counts.max()}")
    print(f"rasters: {len(world.stack.layers)} ({world.stack.n_channels} channels) -> {out / 'rasters'}")
    return EXIT_OK


def cmd_split(args, cfg: RunConfig) -> int:
    ds = _dataset(args, cfg, with_split=False)
    seed = _pick(args, cfg, "seed")
    ds = split_100m(ds, args.test_fraction, seed=seed, radius=args.radius)
    violations = check_split(ds, args.radius)
    if args.holdout:
        ds = holdout_protocol(ds, seed=seed)
    write_split(ds, args.out)
    report = {"radius": args.radius, "seed": seed, "violations": [asdict(v) for v in violations],
              "counts": {t: int(np.sum(ds.split == t)) for t in SPLIT_TAGS}}
    _write_json(args.report or f"{args.out}.report.json", report)
    log.info("split: %s", report["counts"])
    if violations:
        log.error("split violates the %g m constraint %d times", args.radius, len(violations))
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_extract(args, cfg: RunConfig) -> int:
    ds = _dataset(args, cfg)
    stack = load_raster_stack(_pick(args, cfg, "rasters"))
    train = ds.mask("train")
    if not np.any(train):
        raise DataError("split has no train occurrences for the normalization statistics")
    norm = compute_norm_stats(stack, ds.positions[train], args.patch_size)
    workers = _pick(args, cfg, "workers")
    tensors = build_env_tensors(stack, ds.positions, norm, args.patch_size, workers=workers)
    extra = {"patch_size": args.patch_size, "channels": stack.channel_names(), "norm": norm.to_json(),
             "norm_checksum": norm.checksum()}
    write_tensor_cache(args.out, tensors, ds.occ_ids, extra)
    log.info("extract: %d tensors of shape %s", len(tensors), tensors.shape[1:])
    return EXIT_OK


def _model_config(args, cfg: RunConfig, n_species: int, in_channels: int | None, patch: int | None) -> ModelConfig:
    d = dict(cfg.model or {})
    d["kind"] = args.model or d.get("kind")
    if d["kind"] is None:
        raise UsageError("--model is required (flag or run config)")
    d["n_species"] = n_species
    if in_channels is not None:
        d["in_channels"] = in_channels
        d["patch_size"] = patch
    seed = _pick(args, cfg, "seed")
    d["seed"] = seed
    if args.epochs is not None:
        d["epochs"] = args.epochs
    return ModelConfig.from_json(d)


def cmd_train(args, cfg: RunConfig) -> int:
    ds = _dataset(args, cfg)
    kind = args.model or (cfg.model or {}).get("kind")
    env = index = None
    in_channels = patch = None
    checksum = None
    if kind in ("env-cnn", "env-cooc-jnn"):
        env, meta = _env_for(ds, _pick(args, cfg, "cache"))
        in_channels, patch = env.shape[1], env.shape[2]
        checksum = meta.get("norm_checksum")
    mcfg = _model_config(args, cfg, ds.n_species, in_channels, patch)
    cooc = None
    if mcfg.uses_cooc:
        cooc = abundance_matrix(_train_index(ds), ds.positions, exclude_exact=True)
    train = _inputs(ds, np.nonzero(ds.mask("train"))[0], env, cooc)
    val = _inputs(ds, np.nonzero(ds.mask("validation"))[0], env, cooc)
    model = train_model(mcfg, train, val, checksum)
    save_model(model, args.out)
    if model.history:
        write_history(model.history, args.log or f"{args.out}.log.csv")
    log.info("train: %s best validation MRR %.4f at epoch %d", kind, model.best_val_mrr, model.best_epoch)
    return EXIT_OK


def cmd_predict(args, cfg: RunConfig) -> int:
    ds = _dataset(args, cfg)
    model = load_model(args.checkpoint)
    mcfg = model.config
    if mcfg.n_species != ds.n_species:
        raise DataError(f"checkpoint has {mcfg.n_species} species, occurrences have {ds.n_species}")
    env = cooc = None
    if mcfg.uses_env:
        env, meta = _env_for(ds, _pick(args, cfg, "cache"))
        if model.norm_checksum and meta.get("norm_checksum") != model.norm_checksum:
            raise DataError("tensor cache was normalized with different statistics than the checkpoint")
    if mcfg.uses_cooc:
        cooc = abundance_matrix(_train_index(ds), ds.positions, exclude_exact=True)
    rows = np.nonzero(ds.mask(*args.tag))[0]
    if len(rows) == 0:
        raise DataError(f"no occurrences tagged {args.tag}")
    data = _inputs(ds, rows, env, cooc)
    scores = predict_scores(model, data)
    preds = [rank_scores(s, args.limit, int(o)) for s, o in zip(scores, data.occ_ids)]
    write_predictions(preds, args.out)
    if args.probs:
        if mcfg.kind == "spa-cc":
            raise ConfigError("spa-cc scores are not probabilities; --probs is unavailable")
        with open(args.probs, "wb") as fh:
            np.savez(fh, occ_ids=data.occ_ids, probs=scores)
    log.info("predict: %d queries -> %s", len(preds), args.out)
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    ds = _dataset(args, cfg)
    preds = read_predictions(args.predictions)
    rows = np.nonzero(ds.mask(*args.tag))[0]
    if len(rows) == 0:
        raise DataError(f"no occurrences tagged {args.tag}")
    truth = {int(ds.occ_ids[i]): int(ds.species[i]) for i in rows}
    groups = [tuple(p) for p in ds.positions[rows]]
    report = mrr(preds, truth, limit=args.limit)
    report.ideal_mrr = ideal_mrr(groups, [truth[int(ds.occ_ids[i])] for i in rows], args.limit)
    report.meta = {"ideal_grouping": "position; upper-bounds spatial ambiguity only",
                   "tags": list(args.tag), "predictions": Path(args.predictions).name}
    if not np.isfinite(report.mrr):
        log.error("MRR is NaN")
        return EXIT_RUNTIME
    report.write_json(args.out)
    if args.csv:
        report.write_csv(args.csv, list(truth))
    print(f"Q={report.q}  MRR={report.mrr:.6f}  ideal={report.ideal_mrr:.6f}")
    return EXIT_OK


def _load_probs(path):
    with np.load(path) as z:
        if "occ_ids" not in z or "probs" not in z:
            raise DataError(f"{path}: expected arrays occ_ids and probs")
        return z["occ_ids"], z["probs"]


def cmd_fuse(args, cfg: RunConfig) -> int:
    ids_a, pa = _load_probs(args.probs_a)
    ids_b, pb = _load_probs(args.probs_b)
    if not np.array_equal(ids_a, ids_b):
        raise DataError("probability files cover different occurrences")
    fused = late_fuse_scores(pa, pb)
    preds = [rank_scores(s, args.limit, int(o)) for s, o in zip(fused, ids_a)]
    write_predictions(preds, args.out)
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    results = run_gradcheck(trials=args.trials, seed=_pick(args, cfg, "seed"), tolerance=args.tol)
    rows = summarize(results)
    print(f"{'kind':<15}{'trials':>7}{'max rel err':>14}  status")
    for kind, worst, passed in rows:
        print(f"{kind:<15}{args.trials:>7}{worst:>14.3e}  {'PASS' if passed else 'FAIL'}")
    return EXIT_OK if all(passed for _, _, passed in rows) else EXIT_RUNTIME


# -- parser -------------------------------------------------------------------------

def build_parser() -> ArgumentParser:
    p = ArgumentParser(prog="sdmkit", description="Species distribution models from occurrences, "
                                                  "environmental rasters and co-occurrences.")
    p.add_argument("--config", help="run config JSON supplying defaults for paths, model, seed, workers")
    p.add_argument("--verbose", action="store_true", help="debug logging on standard error")
    sub = p.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    def common(sp, split=True):
        sp.add_argument("--occurrences", help="occurrence CSV (occ_id,lon,lat,species_id)")
        sp.add_argument("--crs", choices=("planar", "lonlat"), help="coordinate system of the CSV (default planar)")
        if split:
            sp.add_argument("--split", help="split tag CSV (occ_id,split)")
        sp.add_argument("--seed", type=int, help="random seed (default 0)")

    s = sub.add_parser("synth", help="generate a synthetic world")
    s.add_argument("--spec", required=True, help="WorldSpec JSON; may also set n_occurrences")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, help="override the WorldSpec seed")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("split", help="100 m train/test split plus holdout validation")
    common(s, split=False)
    s.add_argument("--out", required=True, help="split tag CSV to write")
    s.add_argument("--report", help="constraint report JSON (default <out>.report.json)")
    s.add_argument("--test-fraction", type=float, default=0.25, help="tentative test share (default 0.25)")
    s.add_argument("--radius", type=float, default=100.0, help="exclusion radius in metres (default 100)")
    s.add_argument("--no-holdout", dest="holdout", action="store_false",
                   help="skip the validation/prevalidation holdout of the train part")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("extract", help="environmental tensor cache")
    common(s)
    s.add_argument("--rasters", help="raster manifest JSON")
    s.add_argument("--out", required=True, help="tensor cache to write")
    s.add_argument("--patch-size", type=int, default=64, help="patch edge in pixels (default 64)")
    s.add_argument("--workers", type=int, help="extraction threads (default 1)")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("train", help="fit a model and write its checkpoint")
    common(s)
    s.add_argument("--model", choices=MODEL_KINDS, help="model kind")
    s.add_argument("--cache", help="tensor cache (env models)")
    s.add_argument("--epochs", type=int, help="override the epoch count")
    s.add_argument("--out", required=True, help="checkpoint to write")
    s.add_argument("--log", help="training log CSV (default <out>.log.csv)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="ranked predictions from a checkpoint")
    common(s)
    s.add_argument("--checkpoint", required=True, help="checkpoint written by train")
    s.add_argument("--cache", help="tensor cache (env models)")
    s.add_argument("--tag", nargs="+", default=["test"], choices=SPLIT_TAGS, help="split tags to predict")
    s.add_argument("--limit", type=int, default=PREDICTION_LIMIT, help="list length (default 100)")
    s.add_argument("--out", required=True, help="prediction CSV to write")
    s.add_argument("--probs", help="also write the full probability matrix (npz) for fuse")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", help="MRR report of a prediction CSV")
    common(s)
    s.add_argument("--predictions", required=True, help="prediction CSV")
    s.add_argument("--tag", nargs="+", default=["test"], choices=SPLIT_TAGS, help="split tags to score")
    s.add_argument("--limit", type=int, default=PREDICTION_LIMIT, help="list length (default 100)")
    s.add_argument("--out", required=True, help="EvalReport JSON to write")
    s.add_argument("--csv", help="also write per-query reciprocal ranks as CSV")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("fuse", help="late fusion of two probability files")
    s.add_argument("--probs-a", required=True, help="npz from predict --probs")
    s.add_argument("--probs-b", required=True, help="npz from predict --probs")
    s.add_argument("--limit", type=int, default=PREDICTION_LIMIT, help="list length (default 100)")
    s.add_argument("--out", required=True, help="prediction CSV to write")
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("gradcheck", help="finite-difference check of every layer kind")
    s.add_argument("--trials", type=int, default=20, help="random cases per kind (default 20)")
    s.add_argument("--tol", type=float, default=1e-4, help="relative error bound (default 1e-4)")
    s.add_argument("--seed", type=int, help="random seed (default 0)")
    s.set_defaults(func=cmd_gradcheck)
    return p


VALIDATION_ERRORS = (UsageError, DataError, ConfigError, RasterError, EvaluationError, FileNotFoundError,
                     KeyError, ValueError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        return args.func(args, cfg)
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001 - every other failure is a runtime error
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
