"""Acceptance criteria, one test each; every test prints a PASS/FAIL line."""

from __future__ import annotations

import contextlib
import json
import time
from dataclasses import replace

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES
from oracles import (abundance_oracle, closest_rank_oracle, ideal_mrr_oracle, nearest_oracle, random_desk_instance,
                     rf_oracle, split_violations_oracle)
from test_cli import pipeline

from sdmkit.evaluation import RankedPrediction, ideal_mrr, mrr
from sdmkit.experiment import DeskConfig, run_desk
from sdmkit.nn.gradcheck import KINDS, run_gradcheck
from sdmkit.spatial import (LocationIndex, abundance_vector, closest_location_rank, nearest_location, rf_fit,
                            rf_predict)
from sdmkit.synth import WorldSpec, check_split, generate_world, sample_occurrences, split_100m
from sdmkit.zoo import ModelConfig, build_cooc_nn, build_env_cnn, build_joint_model, concat_width

SEEDS = (0, 1, 2)
NEURAL = ("env-cnn", "env-cooc-jnn")


@contextlib.contextmanager
def criterion(n, text):
    t0 = time.perf_counter()
    try:
        yield
    except BaseException:
        line = f"FAIL criterion {n}: {text} ({time.perf_counter() - t0:.1f}s)"
        print(line)
        ACCEPTANCE_LINES.append(line)
        raise
    line = f"PASS criterion {n}: {text} ({time.perf_counter() - t0:.1f}s)"
    print(line)
    ACCEPTANCE_LINES.append(line)


@pytest.fixture(scope="module")
def desk_runs():
    return {s: run_desk(DeskConfig(seed=s)) for s in SEEDS}


@pytest.fixture(scope="module")
def ablation_runs():
    cfg = DeskConfig(world=WorldSpec(community_strength=0.0))
    return {s: run_desk(replace(cfg, seed=s), kinds=NEURAL) for s in SEEDS}


def mean_mrr(runs, kind):
    return float(np.mean([r.mrr(kind) for r in runs.values()]))


class TestAcceptance:
    def test_c1_gradient_fidelity(self):
        with criterion(1, "finite-difference checks, 20 trials per layer kind, rel err < 1e-4, < 60 s"):
            t0 = time.perf_counter()
            results = run_gradcheck(trials=20, tolerance=1e-4)
            elapsed = time.perf_counter() - t0
            assert len(results) == 20 * len(KINDS)
            bad = [(r.kind, r.trial, r.max_rel_error) for r in results if not r.passed]
            assert bad == []
            assert elapsed < 60.0

    def test_c2_oracle_equivalence(self):
        with criterion(2, "spatial queries, random forest and ideal MRR match brute force on 100 instances"):
            t0 = time.perf_counter()
            rng = np.random.default_rng(2024)
            for _ in range(100):
                pos, sp, n, queries = random_desk_instance(rng)
                idx = LocationIndex(pos, sp, n)
                for q in queries:
                    expected = nearest_oracle(pos, q)
                    if not expected:
                        continue
                    assert sorted(nearest_location(idx, q)) == expected
                    np.testing.assert_array_equal(abundance_vector(idx, q).z, abundance_oracle(pos, sp, n, q))
                    np.testing.assert_array_equal(closest_location_rank(idx, q).species,
                                                  closest_rank_oracle(pos, sp, n, q))
                model = rf_fit(pos, sp, n, trees=3, max_depth=int(rng.integers(1, 6)), seed=int(rng.integers(1000)))
                for q in queries:
                    order, scores = rf_oracle(model, q)
                    np.testing.assert_array_equal(rf_predict(model, q).species, order)
                    np.testing.assert_allclose(model.predict_proba(q)[0], scores, rtol=0, atol=1e-9)
                groups = rng.integers(0, 4, len(queries)).tolist()
                truths = rng.integers(0, n, len(queries)).tolist()
                assert abs(ideal_mrr(groups, truths) - ideal_mrr_oracle(groups, truths)) <= 1e-9
            assert time.perf_counter() - t0 < 60.0

    def test_c3_mrr_arithmetic(self):
        with criterion(3, "ranks (1, 2, 4) give 0.58333 and truth past the list scores zero"):
            def pred(i, species):
                return RankedPrediction(i, species, np.linspace(1, 0, len(species)))

            preds = [pred(0, [7, 1, 2, 3]), pred(1, [1, 7, 2, 3]), pred(2, [1, 2, 3, 7])]
            assert abs(mrr(preds, [7, 7, 7]).mrr - 7 / 12) <= 1e-12
            long = pred(0, list(range(150)))
            assert mrr([long], [99]).mrr == pytest.approx(0.01, abs=1e-15)
            assert mrr([long], [100]).mrr == 0.0
            assert mrr([pred(0, [1, 2])], [5]).mrr == 0.0

    def test_c4_split_constraint(self):
        with criterion(4, "50 random datasets split with zero 100 m violations and test species in train"):
            rng = np.random.default_rng(4)
            for i in range(50):
                spec = WorldSpec(nrows=32, ncols=32, n_species=int(rng.integers(3, 9)), seed=i,
                                 snap_fraction=float(rng.choice([0.0, 0.3, 0.8])),
                                 snap_spacing=float(rng.choice([60.0, 150.0, 600.0])))
                ds = sample_occurrences(generate_world(spec), int(rng.integers(60, 300)), seed=i)
                ds = split_100m(ds, float(rng.uniform(0.1, 0.5)), seed=i)
                assert split_violations_oracle(ds.positions, ds.species, ds.split) == []
                assert check_split(ds) == []
                test = set(ds.species[ds.split == "test"].tolist())
                assert test <= set(ds.species[ds.split == "train"].tolist())

    def test_c5_shape_contracts(self):
        with criterion(5, "full-size builds: 3336 classes, 77 input channels, joint concat width 2080"):
            cnn = build_env_cnn(ModelConfig("env-cnn"))
            assert cnn.input_shapes == [(77, 64, 64)]
            assert cnn.layers()[-1].out_features == 3336
            assert build_cooc_nn(ModelConfig("cooc-nn")).layers()[-1].out_features == 3336
            joint = build_joint_model(ModelConfig("env-cooc-jnn"))
            assert joint.input_shapes == [(77, 64, 64), (3336,)]
            assert joint.layers()[-1].out_features == 3336
            assert concat_width(joint) == 2080

    def test_c6_model_ordering(self, desk_runs):
        means = {k: mean_mrr(desk_runs, k) for k in ("spa-cc", "spa-rf", "env-cnn", "env-cooc-jnn")}
        text = ", ".join(f"{k} {v:.4f}" for k, v in means.items())
        with criterion(6, f"CNN > RF > CC by >= 0.01 and JNN >= CNN + 0.005 over 3 seeds ({text})"):
            assert means["env-cnn"] - means["spa-rf"] >= 0.01
            assert means["spa-rf"] - means["spa-cc"] >= 0.01
            assert means["env-cooc-jnn"] >= means["env-cnn"] + 0.005
            for run in desk_runs.values():
                assert run.data.world.stack.layers[0].grid.shape == (128, 128)
                assert len(run.data.world.stack.layers) == 8 and run.data.dataset.n_species == 20
                assert len(run.data.dataset) == 6000

    def test_c7_community_ablation(self, ablation_runs):
        gap = mean_mrr(ablation_runs, "env-cooc-jnn") - mean_mrr(ablation_runs, "env-cnn")
        with criterion(7, f"community loadings off: |JNN - CNN| = {abs(gap):.4f} < 0.02"):
            assert abs(gap) < 0.02

    def test_c8_determinism(self, tmp_path):
        with criterion(8, "pipeline run twice gives byte-identical prediction CSVs and reports"):
            a, b = pipeline(tmp_path / "a"), pipeline(tmp_path / "b")
            for name in ("spa-cc", "spa-rf", "cooc-nn", "env-cnn", "env-cooc-jnn", "fused"):
                assert (a / f"{name}.csv").read_bytes() == (b / f"{name}.csv").read_bytes()
                assert (a / f"{name}.json").read_bytes() == (b / f"{name}.json").read_bytes()

    def test_c9_ideal_bound(self, desk_runs, ablation_runs):
        with criterion(9, "model MRR <= ideal MRR on every run, including a snapped world"):
            snapped = run_desk(DeskConfig(world=WorldSpec(snap_fraction=0.3)))
            assert snapped.reports["spa-cc"].ideal_mrr < 1.0
            for runs in (desk_runs.values(), ablation_runs.values(), [snapped]):
                for run in runs:
                    for kind, report in run.reports.items():
                        assert report.mrr <= report.ideal_mrr + 1e-12, kind
