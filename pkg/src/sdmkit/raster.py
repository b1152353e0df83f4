"""Environmental raster stacks and per-occurrence patch tensors."""

from __future__ import annotations

import hashlib
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

KINDS = ("continuous", "ordinal", "categorical")
STD_FLOOR = 1e-8

TENSOR_MAGIC = b"SDMT"
TENSOR_VERSION = 1


class RasterError(ValueError):
    pass


@dataclass(eq=False)
class RasterLayer:
    """One gridded variable. Row 0 of ``grid`` is the northern edge."""

    name: str
    kind: str
    grid: np.ndarray
    xll: float
    yll: float
    cell_size: float
    nodata: float = -9999.0
    categories: list[int] | None = None
    crs: str = "planar"

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.kind not in KINDS:
            raise RasterError(f"{self.name}: unknown kind {self.kind!r}")
        if self.grid.ndim != 2 or min(self.grid.shape) < 1:
            raise RasterError(f"{self.name}: grid must be 2-d and non-empty, got {self.grid.shape}")
        if not self.cell_size > 0:
            raise RasterError(f"{self.name}: cell size must be positive")
        if self.kind == "categorical":
            if not self.categories:
                raise RasterError(f"{self.name}: categorical layer without category list")
            self.categories = [int(c) for c in self.categories]
            valid = self.grid[self.grid != self.nodata]
            unknown = np.setdiff1d(np.unique(valid), self.categories)
            if unknown.size:
                raise RasterError(f"{self.name}: cell values {unknown[:5].tolist()} not in category list")
        self.grid.setflags(write=False)

    @property
    def nrows(self) -> int:
        return self.grid.shape[0]

    @property
    def ncols(self) -> int:
        return self.grid.shape[1]

    @property
    def n_channels(self) -> int:
        return len(self.categories) if self.kind == "categorical" else 1

    def cell_coords(self, x, y):
        """Continuous (row-from-top, col) coordinates; cell (r, c) spans [r, r+1) x [c, c+1)."""
        col = (np.asarray(x, dtype=np.float64) - self.xll) / self.cell_size
        row = self.nrows - (np.asarray(y, dtype=np.float64) - self.yll) / self.cell_size
        return row, col

    def sample(self, x, y) -> np.ndarray:
        """Value of the cell containing each point; NaN outside the grid or on nodata."""
        row, col = self.cell_coords(x, y)
        r = np.floor(row).astype(np.int64)
        c = np.floor(col).astype(np.int64)
        inside = (r >= 0) & (r < self.nrows) & (c >= 0) & (c < self.ncols)
        out = np.full(np.shape(r), np.nan)
        vals = self.grid[r[inside], c[inside]]
        out[inside] = np.where(vals == self.nodata, np.nan, vals)
        return out


@dataclass(eq=False)
class RasterStack:
    layers: list[RasterLayer]
    channel_plan: list[tuple[int, int | None]] = field(init=False)

    def __post_init__(self):
        if not self.layers:
            raise RasterError("empty raster stack")
        crs = {layer.crs for layer in self.layers}
        if len(crs) > 1:
            raise RasterError(f"inconsistent CRS modes in stack: {sorted(crs)}")
        self.channel_plan = []
        for i, layer in enumerate(self.layers):
            if layer.kind == "categorical":
                self.channel_plan.extend((i, c) for c in layer.categories)
            else:
                self.channel_plan.append((i, None))

    @property
    def n_channels(self) -> int:
        return len(self.channel_plan)

    @property
    def continuous_layers(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.kind != "categorical"]

    def channel_names(self) -> list[str]:
        return [self.layers[i].name if c is None else f"{self.layers[i].name}={c}"
                for i, c in self.channel_plan]


# -- ESRI ASCII grids --------------------------------------------------------

_HEADER_KEYS = {"ncols", "nrows", "xllcorner", "yllcorner", "xllcenter", "yllcenter",
                "cellsize", "nodata_value"}


def read_ascii_grid(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise RasterError(f"{path}: no such file")
    header = {}
    with open(path, encoding="ascii") as fh:
        lines = fh.read().split("\n")
    body_start = 0
    for body_start, line in enumerate(lines):
        parts = line.split()
        if len(parts) == 2 and parts[0].lower() in _HEADER_KEYS:
            header[parts[0].lower()] = float(parts[1])
        else:
            break
    for key in ("ncols", "nrows", "cellsize"):
        if key not in header:
            raise RasterError(f"{path}: header lacks {key}")
    nrows, ncols, cs = int(header["nrows"]), int(header["ncols"]), header["cellsize"]
    if "xllcorner" in header:
        xll, yll = header["xllcorner"], header["yllcorner"]
    elif "xllcenter" in header:
        xll, yll = header["xllcenter"] - cs / 2, header["yllcenter"] - cs / 2
    else:
        raise RasterError(f"{path}: header lacks xllcorner/xllcenter")
    values = np.array(" ".join(lines[body_start:]).split(), dtype=np.float64)
    if values.size != nrows * ncols:
        raise RasterError(f"{path}: expected {nrows * ncols} values, found {values.size}")
    return {"grid": values.reshape(nrows, ncols), "xll": xll, "yll": yll, "cell_size": cs,
            "nodata": header.get("nodata_value", -9999.0)}


def write_ascii_grid(path, grid: np.ndarray, xll: float, yll: float, cell_size: float,
                     nodata: float = -9999.0, integer: bool = False) -> None:
    grid = np.asarray(grid)
    fmt = "%d" if integer else "%.17g"
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"ncols {grid.shape[1]}\nnrows {grid.shape[0]}\n")
        fh.write(f"xllcorner {xll!r}\nyllcorner {yll!r}\ncellsize {cell_size!r}\n")
        fh.write(f"NODATA_value {nodata:g}\n")
        for row in grid:
            fh.write(" ".join(fmt % v for v in row) + "\n")


def load_raster_stack(manifest) -> RasterStack:
    """Load a JSON manifest: an array of {name, kind, path, nodata, categories?, crs?}.

    Relative paths resolve against the manifest's directory.
    """
    manifest = Path(manifest)
    if not manifest.exists():
        raise RasterError(f"{manifest}: no such file")
    entries = json.loads(manifest.read_text())
    if not isinstance(entries, list):
        raise RasterError(f"{manifest}: manifest must be a JSON array")
    layers = []
    for entry in entries:
        for key in ("name", "kind", "path"):
            if key not in entry:
                raise RasterError(f"{manifest}: layer entry lacks {key!r}")
        path = manifest.parent / entry["path"]
        g = read_ascii_grid(path)
        nodata = entry.get("nodata", g["nodata"])
        layers.append(RasterLayer(entry["name"], entry["kind"], g["grid"], g["xll"], g["yll"],
                                  g["cell_size"], nodata, entry.get("categories"),
                                  entry.get("crs", "planar")))
    return RasterStack(layers)


def write_raster_stack(stack: RasterStack, directory, manifest_name: str = "manifest.json") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for layer in stack.layers:
        fname = f"{layer.name}.asc"
        write_ascii_grid(directory / fname, layer.grid, layer.xll, layer.yll, layer.cell_size,
                         layer.nodata, integer=layer.kind == "categorical")
        entry = {"name": layer.name, "kind": layer.kind, "path": fname, "nodata": layer.nodata}
        if layer.categories is not None:
            entry["categories"] = layer.categories
        entries.append(entry)
    path = directory / manifest_name
    path.write_text(json.dumps(entries, indent=2) + "\n")
    return path


# -- patches -----------------------------------------------------------------

def window_origin(layer: RasterLayer, center, size: int) -> tuple[int, int]:
    """Top-left cell of the size x size window whose centre is nearest to ``center``."""
    row, col = layer.cell_coords(center[0], center[1])
    return int(np.floor(row - size / 2 + 0.5)), int(np.floor(col - size / 2 + 0.5))


def extract_patch(layer: RasterLayer, center, size: int = 64, fill: float = np.nan) -> np.ndarray:
    """size x size block of cells around ``center`` (nearest cell, no interpolation).

    Cells outside the grid or equal to the layer's nodata value are set to ``fill``.
    """
    if not np.all(np.isfinite(center)):
        raise RasterError(f"non-finite patch center {center}")
    r0, c0 = window_origin(layer, center, size)
    out = np.full((size, size), fill, dtype=np.float64)
    rs, re = max(r0, 0), min(r0 + size, layer.nrows)
    cs, ce = max(c0, 0), min(c0 + size, layer.ncols)
    if rs < re and cs < ce:
        block = layer.grid[rs:re, cs:ce]
        out[rs - r0:re - r0, cs - c0:ce - c0] = np.where(block == layer.nodata, fill, block)
    return out


def unstack_categorical(patch: np.ndarray, categories, nodata: float | None = None) -> np.ndarray:
    """One binary channel per category. NaN and ``nodata`` pixels are zero in every channel."""
    patch = np.asarray(patch, dtype=np.float64)
    cats = np.asarray(categories, dtype=np.float64)
    missing = np.isnan(patch)
    if nodata is not None:
        missing |= patch == nodata
    out = (patch[None, :, :] == cats[:, None, None]) & ~missing[None]
    bad = ~missing & ~out.any(axis=0)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise RasterError(f"pixel ({i}, {j}) has value {patch[i, j]:g} outside the category list")
    return out.astype(np.float64)


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.mean, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.std, dtype="<f8").tobytes())
        return h.hexdigest()

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> NormStats:
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def compute_norm_stats(stack: RasterStack, centers, size: int = 64) -> NormStats:
    """Per-layer mean/std over the valid pixels of the patches at ``centers``.

    Pass training-split centres only. Categorical layers get (0, 1).
    """
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    mean = np.zeros(len(stack.layers))
    std = np.ones(len(stack.layers))
    for i in stack.continuous_layers:
        layer = stack.layers[i]
        total = total_sq = count = 0.0
        for c in centers:
            p = extract_patch(layer, c, size)
            v = p[~np.isnan(p)]
            total += v.sum()
            total_sq += (v * v).sum()
            count += v.size
        if count:
            m = total / count
            mean[i] = m
            std[i] = max(np.sqrt(max(total_sq / count - m * m, 0.0)), STD_FLOOR)
    return NormStats(mean, std)


@dataclass(frozen=True)
class EnvTensor:
    data: np.ndarray
    occ_id: int | None = None
    center: tuple[float, float] | None = None


def build_env_tensor(stack: RasterStack, center, norm: NormStats, size: int = 64,
                     occ_id: int | None = None) -> EnvTensor:
    """(channels, size, size) tensor: standardized continuous/ordinal channels with
    missing pixels at 0 (the channel mean), then one-hot categorical channels."""
    chans = []
    for i, layer in enumerate(stack.layers):
        patch = extract_patch(layer, center, size)
        if layer.kind == "categorical":
            chans.append(unstack_categorical(patch, layer.categories))
        else:
            z = (patch - norm.mean[i]) / max(norm.std[i], STD_FLOOR)
            chans.append(np.nan_to_num(z, nan=0.0)[None])
    data = np.concatenate(chans, axis=0).astype(np.float32)
    return EnvTensor(data, occ_id, (float(center[0]), float(center[1])))


def build_env_tensors(stack: RasterStack, centers, norm: NormStats, size: int = 64,
                      workers: int = 1) -> np.ndarray:
    """Stack of tensors for many centres, shape (n, channels, size, size), float32."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    out = np.empty((len(centers), stack.n_channels, size, size), dtype=np.float32)

    def work(i):
        out[i] = build_env_tensor(stack, centers[i], norm, size).data

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(work, range(len(centers))))
    else:
        for i in range(len(centers)):
            work(i)
    return out


# -- tensor cache ------------------------------------------------------------

def write_tensor_cache(path, tensors: np.ndarray, occ_ids, extra: dict | None = None) -> None:
    """Binary ``SDMT`` file plus ``<path>.json`` index mapping rows to occurrence ids."""
    tensors = np.asarray(tensors)
    if tensors.ndim != 4:
        raise RasterError(f"tensor cache expects (n, C, H, W), got {tensors.shape}")
    n, c, h, w = tensors.shape
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<H3IQ", TENSOR_VERSION, c, h, w, n))
        fh.write(np.ascontiguousarray(tensors, dtype="<f4").tobytes())
    index = {"version": TENSOR_VERSION, "shape": [c, h, w], "count": n,
             "occ_ids": [int(o) for o in occ_ids]}
    index.update(extra or {})
    Path(str(path) + ".json").write_text(json.dumps(index, sort_keys=True) + "\n")


def read_tensor_cache(path) -> tuple[np.ndarray, dict]:
    data = Path(path).read_bytes()
    if data[:4] != TENSOR_MAGIC:
        raise RasterError(f"{path}: not an SDMT tensor cache")
    version, c, h, w, n = struct.unpack_from("<H3IQ", data, 4)
    if version != TENSOR_VERSION:
        raise RasterError(f"{path}: unsupported tensor cache version {version}")
    off = 4 + struct.calcsize("<H3IQ")
    tensors = np.frombuffer(data, dtype="<f4", count=n * c * h * w, offset=off).reshape(n, c, h, w)
    index = json.loads(Path(str(path) + ".json").read_text())
    if len(index["occ_ids"]) != n:
        raise RasterError(f"{path}: index lists {len(index['occ_ids'])} ids for {n} tensors")
    return tensors.astype(np.float32), index
