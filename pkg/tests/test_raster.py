from __future__ import annotations

import json

import numpy as np
import pytest

from sdmkit.raster import (NormStats, RasterError, RasterLayer, RasterStack, build_env_tensor, build_env_tensors,
                           compute_norm_stats, extract_patch, load_raster_stack, read_ascii_grid,
                           read_tensor_cache, unstack_categorical, write_ascii_grid, write_raster_stack,
                           write_tensor_cache)


def continuous(name, grid, cell=10.0, xll=0.0, yll=0.0, nodata=-9999.0):
    return RasterLayer(name, "continuous", np.asarray(grid, dtype=float), xll, yll, cell, nodata)


def categorical(name, grid, categories, cell=10.0, nodata=-9999.0):
    return RasterLayer(name, "categorical", np.asarray(grid, dtype=float), 0.0, 0.0, cell, nodata, categories)


def write_manifest(tmp_path, n_cont, cats=None, size=4):
    rng = np.random.default_rng(0)
    entries = []
    for k in range(n_cont):
        write_ascii_grid(tmp_path / f"c{k}.asc", rng.normal(size=(size, size)), 0.0, 0.0, 10.0)
        entries.append({"name": f"c{k}", "kind": "continuous", "path": f"c{k}.asc", "nodata": -9999})
    if cats:
        grid = rng.choice(cats, size=(size, size))
        write_ascii_grid(tmp_path / "lc.asc", grid, 0.0, 0.0, 10.0, integer=True)
        entries.append({"name": "lc", "kind": "categorical", "path": "lc.asc", "nodata": -9999,
                        "categories": list(cats)})
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(entries))
    return path


class TestLoadRasterStack:
    def test_full_scale_channel_plan(self, tmp_path):
        stack = load_raster_stack(write_manifest(tmp_path, 32, list(range(1, 46))))
        assert stack.n_channels == 77

    def test_single_layer(self, tmp_path):
        assert load_raster_stack(write_manifest(tmp_path, 1)).n_channels == 1

    def test_mixed(self, tmp_path):
        assert load_raster_stack(write_manifest(tmp_path, 2, [4, 7, 9])).n_channels == 5

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(RasterError):
            load_raster_stack(tmp_path / "none.json")

    def test_missing_grid(self, tmp_path):
        (tmp_path / "m.json").write_text(json.dumps([{"name": "a", "kind": "continuous", "path": "a.asc"}]))
        with pytest.raises(RasterError):
            load_raster_stack(tmp_path / "m.json")

    def test_categorical_without_categories(self, tmp_path):
        write_ascii_grid(tmp_path / "a.asc", np.ones((2, 2)), 0, 0, 1, integer=True)
        (tmp_path / "m.json").write_text(json.dumps([{"name": "a", "kind": "categorical", "path": "a.asc"}]))
        with pytest.raises(RasterError, match="category list"):
            load_raster_stack(tmp_path / "m.json")

    def test_inconsistent_crs(self):
        a = continuous("a", np.ones((2, 2)))
        b = RasterLayer("b", "continuous", np.ones((2, 2)), 0, 0, 1, crs="lonlat")
        with pytest.raises(RasterError, match="CRS"):
            RasterStack([a, b])

    def test_cell_outside_categories(self):
        with pytest.raises(RasterError):
            categorical("lc", [[1, 5]], [1, 2])

    def test_bad_cell_size(self):
        with pytest.raises(RasterError):
            continuous("a", np.ones((2, 2)), cell=0.0)

    def test_stack_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        stack = RasterStack([continuous("t", rng.normal(size=(5, 7))),
                             categorical("lc", rng.choice([2, 3], size=(5, 7)), [2, 3])])
        back = load_raster_stack(write_raster_stack(stack, tmp_path / "r"))
        for a, b in zip(stack.layers, back.layers):
            np.testing.assert_array_equal(a.grid, b.grid)
            assert (a.kind, a.categories, a.cell_size) == (b.kind, b.categories, b.cell_size)

    def test_ascii_center_header(self, tmp_path):
        p = tmp_path / "g.asc"
        p.write_text("ncols 2\nnrows 1\nxllcenter 5\nyllcenter 5\ncellsize 10\n1 2\n")
        g = read_ascii_grid(p)
        assert (g["xll"], g["yll"]) == (0.0, 0.0)

    def test_ascii_wrong_count(self, tmp_path):
        p = tmp_path / "g.asc"
        p.write_text("ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\n1 2 3\n")
        with pytest.raises(RasterError, match="expected 4"):
            read_ascii_grid(p)


def out_of_bounds_oracle(layer, center, size):
    """Count patch pixels whose centre falls outside the raster extent."""
    cs = layer.cell_size
    xmax = layer.xll + layer.ncols * cs
    ymax = layer.yll + layer.nrows * cs
    count = 0
    for i in range(size):
        for j in range(size):
            x = center[0] + (j - size / 2 + 0.5) * cs
            y = center[1] - (i - size / 2 + 0.5) * cs
            if not (layer.xll <= x < xmax and layer.yll <= y < ymax):
                count += 1
    return count


class TestExtractPatch:
    def test_constant_layer(self):
        layer = continuous("a", np.full((100, 100), 3.5))
        np.testing.assert_array_equal(extract_patch(layer, (500.0, 500.0)), np.full((64, 64), 3.5))

    @pytest.mark.parametrize("corner", [(0.0, 0.0), (1000.0, 1000.0), (0.0, 1000.0), (1000.0, 0.0)])
    def test_corner_fill_fraction(self, corner):
        layer = continuous("a", np.arange(1.0, 10001.0).reshape(100, 100))
        patch = extract_patch(layer, corner, 64, fill=0.0)
        assert int(np.sum(patch == 0.0)) == out_of_bounds_oracle(layer, corner, 64) == 64 * 64 * 3 // 4

    def test_fill_fraction_off_grid_centers(self):
        rng = np.random.default_rng(1)
        layer = continuous("a", np.ones((40, 30)))
        for _ in range(30):
            # centres on cell boundaries so pixel centres never sit on an edge
            c = (rng.integers(-10, 40) * 10.0, rng.integers(-10, 50) * 10.0)
            patch = extract_patch(layer, c, 16)
            assert int(np.isnan(patch).sum()) == out_of_bounds_oracle(layer, c, 16)

    def test_identity_read_back(self):
        grid = np.arange(64 * 64, dtype=float).reshape(64, 64)
        layer = continuous("a", grid)
        np.testing.assert_array_equal(extract_patch(layer, (320.0, 320.0)), grid)

    def test_identity_read_back_inside_center_cell(self):
        grid = np.arange(64 * 64, dtype=float).reshape(64, 64)
        layer = continuous("a", grid)
        np.testing.assert_array_equal(extract_patch(layer, (318.0, 322.0)), grid)

    def test_nodata_filled(self):
        grid = np.ones((8, 8))
        grid[3, 4] = -1.0
        layer = continuous("a", grid, nodata=-1.0)
        patch = extract_patch(layer, (40.0, 40.0), 8, fill=7.0)
        assert patch[3, 4] == 7.0 and np.sum(patch == 7.0) == 1

    def test_non_finite_center(self):
        with pytest.raises(RasterError):
            extract_patch(continuous("a", np.ones((4, 4))), (np.nan, 0.0), 4)


class TestUnstackCategorical:
    def test_single_category(self):
        cats = list(range(45))
        out = unstack_categorical(np.full((64, 64), 3.0), cats)
        assert out.shape == (45, 64, 64)
        np.testing.assert_array_equal(out[3], 1.0)
        assert out.sum() == 64 * 64

    def test_pop_counts(self):
        out = unstack_categorical(np.array([[0, 1], [1, 2]]), [0, 1, 2])
        np.testing.assert_array_equal(out.sum(axis=(1, 2)), [1, 2, 1])

    def test_one_hot_and_nodata(self):
        rng = np.random.default_rng(2)
        patch = rng.choice([5.0, 8.0, 13.0, -9999.0], size=(16, 16))
        out = unstack_categorical(patch, [5, 8, 13], nodata=-9999.0)
        np.testing.assert_array_equal(out.sum(axis=0), (patch != -9999.0).astype(float))

    def test_nan_pixels_are_zero(self):
        out = unstack_categorical(np.array([[np.nan, 1.0]]), [1])
        np.testing.assert_array_equal(out, [[[0.0, 1.0]]])

    def test_unknown_value_reports_pixel(self):
        with pytest.raises(RasterError, match=r"\(1, 0\)"):
            unstack_categorical(np.array([[1.0, 1.0], [4.0, 1.0]]), [1, 2])


def random_stack(seed=0, shape=(48, 48)):
    rng = np.random.default_rng(seed)
    return RasterStack([continuous("a", rng.normal(3, 2, shape)),
                        continuous("b", rng.uniform(-100, 5, shape)),
                        RasterLayer("o", "ordinal", rng.integers(1, 6, shape).astype(float), 0, 0, 10.0),
                        categorical("lc", rng.choice([1, 4, 6], size=shape), [1, 4, 6])])


class TestEnvTensor:
    def test_constant_layer_is_zero(self):
        stack = RasterStack([continuous("a", np.full((20, 20), 9.0))])
        centers = np.array([[100.0, 100.0], [50.0, 120.0]])
        norm = compute_norm_stats(stack, centers, 8)
        assert norm.std[0] == pytest.approx(1e-8)
        t = build_env_tensor(stack, centers[0], norm, 8)
        np.testing.assert_array_equal(t.data, 0.0)

    def test_standardized_training_patches(self):
        stack = random_stack()
        rng = np.random.default_rng(5)
        centers = rng.uniform(80, 400, (40, 2))
        norm = compute_norm_stats(stack, centers, 16)
        tensors = build_env_tensors(stack, centers, norm, 16).astype(np.float64)
        for ch in range(3):
            v = tensors[:, ch]
            assert abs(v.mean()) < 1e-6
            assert abs(v.std() - 1.0) < 1e-6

    def test_shape_and_categorical_channels(self):
        stack = random_stack()
        norm = compute_norm_stats(stack, [[200.0, 200.0]], 16)
        t = build_env_tensor(stack, (200.0, 200.0), norm, 16, occ_id=7)
        assert t.data.shape == (6, 16, 16) and t.occ_id == 7
        np.testing.assert_array_equal(t.data[3:].sum(axis=0), 1.0)
        assert set(np.unique(t.data[3:])) <= {0.0, 1.0}

    def test_edge_fill_is_zero_everywhere(self):
        stack = random_stack()
        norm = compute_norm_stats(stack, [[200.0, 200.0]], 16)
        t = build_env_tensor(stack, (0.0, 0.0), norm, 16)
        assert np.all(np.isfinite(t.data))
        np.testing.assert_array_equal(t.data[:, :, :8], 0.0)

    def test_deterministic_bytes(self):
        stack = random_stack()
        centers = np.random.default_rng(6).uniform(0, 480, (10, 2))
        norm = compute_norm_stats(stack, centers, 16)
        a = build_env_tensors(stack, centers, norm, 16)
        b = build_env_tensors(stack, centers, norm, 16, workers=3)
        assert a.tobytes() == b.tobytes()

    def test_validation_does_not_touch_train_stats(self):
        stack = random_stack()
        norm = compute_norm_stats(stack, [[100.0, 100.0], [300.0, 250.0]], 16)
        before = norm.checksum()
        build_env_tensors(stack, np.random.default_rng(1).uniform(0, 480, (5, 2)), norm, 16)
        assert norm.checksum() == before
        assert NormStats.from_json(norm.to_json()).checksum() == before


class TestTensorCache:
    def test_round_trip(self, tmp_path):
        t = np.random.default_rng(0).normal(size=(3, 5, 4, 4)).astype(np.float32)
        write_tensor_cache(tmp_path / "t.sdmt", t, [10, 11, 12], {"patch_size": 4})
        back, index = read_tensor_cache(tmp_path / "t.sdmt")
        assert back.tobytes() == t.tobytes()
        assert index["occ_ids"] == [10, 11, 12] and index["patch_size"] == 4
        assert (tmp_path / "t.sdmt").read_bytes()[:4] == b"SDMT"

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOPE" + bytes(40))
        with pytest.raises(RasterError):
            read_tensor_cache(tmp_path / "x")

    def test_rejects_wrong_rank(self, tmp_path):
        with pytest.raises(RasterError):
            write_tensor_cache(tmp_path / "x", np.zeros((2, 2)), [0, 1])
