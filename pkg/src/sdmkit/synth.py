"""Synthetic worlds: smooth rasters, Gaussian niches, a hidden community factor,
biased presence-only sampling and the 100 m train/test split."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from sdmkit.data import Dataset
from sdmkit.raster import RasterLayer, RasterStack


@dataclass
class WorldSpec:
    """Synthetic world parameters; defaults give the desk world.

    Frequencies are in cycles across the domain. Environmental fields draw
    wave numbers in [min_cycles, max_cycles]; the hidden community factor in
    [latent_cycles / 2, latent_cycles], fine enough that the environment patch
    and a coordinate forest cannot resolve it while nearby co-occurrences can.
    """

    nrows: int = 128
    ncols: int = 128
    cell_size: float = 300.0
    n_continuous: int = 7
    n_categories: int = 4
    n_species: int = 20
    field_terms: int = 6
    min_cycles: float = 3.0
    max_cycles: float = 6.0
    niche_vars: int = 3
    min_breadth: float = 0.35
    max_breadth: float = 0.9
    community_strength: float = 3.0
    latent_cycles: float = 20.0
    bias_strength: float = 0.5
    snap_fraction: float = 0.0
    snap_spacing: float = 1200.0
    visit_size: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_species < 2:
            raise ValueError("a world needs at least 2 species")
        if not 0 < self.min_breadth <= self.max_breadth:
            raise ValueError("niche breadths must be positive and ordered")
        if self.nrows < 1 or self.ncols < 1 or self.cell_size <= 0:
            raise ValueError("raster extent must be positive")
        if not 1 <= self.niche_vars <= max(self.n_continuous, 1):
            raise ValueError("niche_vars must lie in [1, n_continuous]")
        if not 0 <= self.snap_fraction <= 1:
            raise ValueError("snap_fraction must lie in [0, 1]")
        if self.visit_size < 1:
            raise ValueError("visit_size must be at least 1")

    @property
    def width(self) -> float:
        return self.ncols * self.cell_size

    @property
    def height(self) -> float:
        return self.nrows * self.cell_size

    @classmethod
    def from_json(cls, d: dict) -> WorldSpec:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown WorldSpec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class CosineField:
    """Sum of plane waves, evaluated at planar positions."""

    wave: np.ndarray
    phase: np.ndarray
    amplitude: np.ndarray

    def __call__(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        arg = x[..., None] * self.wave[:, 0] + y[..., None] * self.wave[:, 1] + self.phase
        return (self.amplitude * np.cos(arg)).sum(axis=-1)

    @classmethod
    def random(cls, rng, terms: int, min_cycles: float, max_cycles: float, extent: float) -> CosineField:
        angle = rng.uniform(0, 2 * np.pi, terms)
        k = 2 * np.pi * rng.uniform(min_cycles, max_cycles, terms) / extent
        wave = np.column_stack([k * np.cos(angle), k * np.sin(angle)])
        amplitude = rng.uniform(0.5, 1.0, terms)
        amplitude /= np.sqrt((amplitude ** 2).sum() / 2)
        return cls(wave, rng.uniform(0, 2 * np.pi, terms), amplitude)


@dataclass
class SuitabilityOracle:
    """Ground-truth suitability in [0, 1] of every species on the raster cells.

    suitability(s, p) = prod_v exp(-(env_v(p) - optimum_sv)^2 / (2 breadth_sv^2))
                        * preference_s[category(p)] * exp(loading_s * latent(p)) / peak_s
    where every term is read at the cell containing p and peak_s is the
    species' maximum over the grid.
    """

    spec: WorldSpec
    stack: RasterStack
    latent: np.ndarray
    niche_vars: np.ndarray
    optimum: np.ndarray
    breadth: np.ndarray
    preference: np.ndarray
    loading: np.ndarray
    grid: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.grid = self.unnormalized(np.arange(self.spec.nrows)[:, None], np.arange(self.spec.ncols)[None, :])
        peak = self.grid.reshape(self.spec.n_species, -1).max(axis=1)
        if np.any(peak <= 0):
            raise ValueError("degenerate world: a species has zero suitability everywhere")
        self.peak = peak
        self.grid = self.grid / peak[:, None, None]

    def unnormalized(self, rows, cols) -> np.ndarray:
        """Formula evaluation at cell indices; shape (N, *broadcast(rows, cols))."""
        rows, cols = np.broadcast_arrays(np.asarray(rows), np.asarray(cols))
        n = self.spec.n_species
        out = np.ones((n,) + rows.shape)
        cont = [layer for layer in self.stack.layers if layer.kind != "categorical"]
        for s in range(n):
            for v, opt, br in zip(self.niche_vars[s], self.optimum[s], self.breadth[s]):
                env = cont[v].grid[rows, cols]
                out[s] *= np.exp(-((env - opt) ** 2) / (2 * br * br))
        cat = [layer for layer in self.stack.layers if layer.kind == "categorical"]
        if cat:
            klass = cat[0].grid[rows, cols].astype(np.int64) - 1
            out *= self.preference[:, klass]
        lat = self.latent[rows, cols]
        out *= np.exp(self.loading.reshape((-1,) + (1,) * lat.ndim) * lat)
        return out

    def cell_of(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        cs = self.spec.cell_size
        col = np.clip(np.floor(np.asarray(x) / cs).astype(np.int64), 0, self.spec.ncols - 1)
        row = np.clip(self.spec.nrows - 1 - np.floor(np.asarray(y) / cs).astype(np.int64), 0, self.spec.nrows - 1)
        return row, col

    def __call__(self, species: int, x, y) -> np.ndarray:
        row, col = self.cell_of(x, y)
        return self.grid[species, row, col]

    def all_species(self, x, y) -> np.ndarray:
        """(n_points, N) suitabilities."""
        row, col = self.cell_of(x, y)
        return self.grid[:, row, col].T

    def ground_truth(self) -> dict:
        return {"niche_vars": self.niche_vars.tolist(), "optimum": self.optimum.tolist(),
                "breadth": self.breadth.tolist(), "category_preference": self.preference.tolist(),
                "community_loading": self.loading.tolist(), "peak": self.peak.tolist()}


@dataclass
class World:
    spec: WorldSpec
    stack: RasterStack
    oracle: SuitabilityOracle
    bias: np.ndarray

    def to_json(self) -> dict:
        return {"spec": asdict(self.spec), "ground_truth": self.oracle.ground_truth()}

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _cell_centers(spec: WorldSpec):
    xs = (np.arange(spec.ncols) + 0.5) * spec.cell_size
    ys = (spec.nrows - np.arange(spec.nrows) - 0.5) * spec.cell_size
    return np.meshgrid(xs, ys)


def _standardize(values: np.ndarray) -> np.ndarray:
    std = values.std()
    return (values - values.mean()) / (std if std > 0 else 1.0)


def generate_world(spec: WorldSpec) -> World:
    """Rasters, niches and the hidden community factor, all fixed by ``spec.seed``."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1]))
    extent = max(spec.width, spec.height)
    gx, gy = _cell_centers(spec)
    layers = []
    for v in range(spec.n_continuous):
        f = CosineField.random(rng, spec.field_terms, spec.min_cycles, spec.max_cycles, extent)
        # float32-representable values survive the ASCII grid round trip exactly
        grid = _standardize(f(gx, gy)).astype(np.float32).astype(np.float64)
        layers.append(RasterLayer(f"env{v:02d}", "continuous", grid, 0.0, 0.0, spec.cell_size))
    if spec.n_categories > 0:
        f = CosineField.random(rng, spec.field_terms, spec.min_cycles, spec.max_cycles, extent)
        raw = f(gx, gy)
        cuts = np.quantile(raw, np.linspace(0, 1, spec.n_categories + 1)[1:-1])
        klass = np.searchsorted(cuts, raw, side="right") + 1
        layers.append(RasterLayer("landcover", "categorical", klass.astype(np.float64), 0.0, 0.0,
                                  spec.cell_size, categories=list(range(1, spec.n_categories + 1))))
    stack = RasterStack(layers)

    latent_field = CosineField.random(rng, spec.field_terms, 0.5 * spec.latent_cycles,
                                      spec.latent_cycles, extent)
    latent = _standardize(latent_field(gx, gy))
    bias = _standardize(CosineField.random(rng, spec.field_terms, 0.5, 1.5, extent)(gx, gy))

    n = spec.n_species
    niche_vars = np.array([np.sort(rng.choice(max(spec.n_continuous, 1), spec.niche_vars, replace=False))
                           for _ in range(n)]) if spec.n_continuous else np.zeros((n, 0), dtype=np.int64)
    optimum = rng.uniform(-1.5, 1.5, niche_vars.shape)
    breadth = rng.uniform(spec.min_breadth, spec.max_breadth, niche_vars.shape)
    preference = rng.uniform(0.25, 1.0, (n, max(spec.n_categories, 1)))
    signs = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    loading = spec.community_strength * signs * rng.uniform(0.5, 1.0, n)
    oracle = SuitabilityOracle(spec, stack, latent, niche_vars, optimum, breadth, preference, loading)
    return World(spec, stack, oracle, bias)


def sample_occurrences(world: World, n_total: int, bias_strength: float | None = None,
                       seed: int = 0, snap_fraction: float | None = None,
                       visit_size: float | None = None) -> Dataset:
    """Presence-only sample of ``n_total`` occurrences, recorded in visits.

    Visit positions are rejection-sampled with acceptance proportional to the
    summed suitability times exp(bias_strength * bias field). A visit records
    1 + Poisson(visit_size - 1) occurrences at one position, each species
    drawn proportionally to its suitability there. The last N occurrences
    are forced, one per species, so every species occurs. A fraction of visit
    positions is snapped to the centre of a coarse grid cell.
    """
    spec = world.spec
    oracle = world.oracle
    n = spec.n_species
    if n_total < n:
        raise ValueError(f"n_total={n_total} is smaller than the number of species {n}")
    bias_strength = spec.bias_strength if bias_strength is None else bias_strength
    snap_fraction = spec.snap_fraction if snap_fraction is None else snap_fraction
    visit_size = spec.visit_size if visit_size is None else visit_size
    if visit_size < 1:
        raise ValueError("visit_size must be at least 1")
    weight = np.exp(bias_strength * world.bias)
    total = oracle.grid.sum(axis=0) * weight
    if not np.any(total > 0):
        raise ValueError("degenerate oracle: suitability is zero everywhere")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))

    def draw(density: np.ndarray, count: int) -> np.ndarray:
        top = density.max()
        out = np.empty((0, 2))
        while len(out) < count:
            m = max(4 * (count - len(out)), 64)
            p = rng.uniform([0, 0], [spec.width, spec.height], size=(m, 2))
            row, col = oracle.cell_of(p[:, 0], p[:, 1])
            keep = rng.uniform(0, top, m) < density[row, col]
            out = np.concatenate([out, p[keep]])
        return out[:count]

    n_free = n_total - n
    sizes = np.empty(0, dtype=np.int64)
    while sizes.sum() < n_free:
        sizes = np.concatenate([sizes, 1 + rng.poisson(visit_size - 1, max(n_free // int(visit_size), 1))])
    sizes = sizes[:np.searchsorted(np.cumsum(sizes), n_free) + 1]
    sizes[-1] -= sizes.sum() - n_free
    visits = draw(total, len(sizes))
    snap = rng.uniform(0, 1, len(visits)) < snap_fraction
    sp = spec.snap_spacing
    visits[snap] = (np.floor(visits[snap] / sp) + 0.5) * sp
    pos = np.repeat(visits, sizes, axis=0)
    suit = oracle.all_species(pos[:, 0], pos[:, 1])
    cum = np.cumsum(suit, axis=1)
    u = rng.uniform(0, 1, n_free) * cum[:, -1]
    species = np.minimum((cum < u[:, None]).sum(axis=1), n - 1)
    forced = np.vstack([draw(oracle.grid[s] * weight, 1) for s in range(n)])
    pos = np.vstack([pos, forced])
    species = np.concatenate([species, np.arange(n)])
    return Dataset(np.arange(n_total), pos, species, np.arange(n))


def cooccurrence_pmi(ds: Dataset, cell: float, smoothing: float = 0.5) -> np.ndarray:
    """(N, N) pointwise mutual information of species co-presence in square cells.

    pmi[a, b] = log P(a and b present) / (P(a present) P(b present)) over the
    occupied cells of a ``cell``-sided grid, with additive smoothing of the
    joint counts. Positive values mean the pair shares cells more often than
    independence predicts.
    """
    keys = np.floor(ds.positions / cell).astype(np.int64)
    _, cell_id = np.unique(keys, axis=0, return_inverse=True)
    cell_id = cell_id.ravel()
    presence = np.zeros((cell_id.max() + 1, ds.n_species))
    presence[cell_id, ds.species] = 1.0
    n_cells = len(presence)
    joint = (presence.T @ presence + smoothing) / (n_cells + 2 * smoothing)
    marginal = (presence.sum(axis=0) + smoothing) / (n_cells + 2 * smoothing)
    return np.log(joint / np.outer(marginal, marginal))


# -- 100 m split ---------------------------------------------------------------

def _species_components(positions: np.ndarray, species: np.ndarray, radius: float) -> np.ndarray:
    """Component label per occurrence in the graph joining same-species pairs within ``radius``."""
    labels = np.empty(len(species), dtype=np.int64)
    offset = 0
    for s in np.unique(species):
        rows = np.nonzero(species == s)[0]
        pairs = cKDTree(positions[rows]).query_pairs(radius * (1 + 1e-9), output_type="ndarray")
        if len(pairs):
            d = np.hypot(*(positions[rows[pairs[:, 0]]] - positions[rows[pairs[:, 1]]]).T)
            pairs = pairs[d <= radius]
        graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])) if len(pairs) else
                           ([], ([], [])), shape=(len(rows), len(rows)))
        k, comp = connected_components(graph, directed=False)
        labels[rows] = comp + offset
        offset += k
    return labels


def split_100m(ds: Dataset, test_fraction: float = 0.25, seed: int = 0, radius: float = 100.0) -> Dataset:
    """Train/test tags such that every test occurrence lies more than ``radius``
    from all train occurrences of its species, and every test species has at
    least one train occurrence.

    Shuffled occurrences are tentatively tagged test up to ``test_fraction``;
    a test occurrence with a same-species train occurrence within ``radius`` is
    evicted to train, repeatedly, which settles to whole groups of
    same-species occurrences chained by the radius being tagged alike. A
    species left without train occurrences gets its first group moved to train.
    """
    n = len(ds)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    perm = rng.permutation(n)
    test = np.zeros(n, dtype=bool)
    test[perm[:int(round(test_fraction * n))]] = True
    comp = _species_components(ds.positions, ds.species, radius)
    n_comp = comp.max() + 1
    # a component with any train member evicts all its test members
    has_train = np.bincount(comp[~test], minlength=n_comp) > 0
    test &= ~has_train[comp]
    shuffle_rank = np.argsort(perm)
    for s in np.unique(ds.species[test]):
        rows = np.nonzero(ds.species == s)[0]
        if not np.any(~test[rows]):
            first = comp[rows[np.argmin(shuffle_rank[rows])]]
            test[comp == first] = False
    tags = np.where(test, "test", "train")
    return ds.with_split(tags)


@dataclass
class SplitViolation:
    kind: str
    species: int
    test_occ: int | None = None
    train_occ: int | None = None
    distance: float | None = None


def check_split(ds: Dataset, radius: float = 100.0) -> list[SplitViolation]:
    """Brute-force all-pairs audit of the train/test constraints."""
    violations = []
    test = np.nonzero(ds.split == "test")[0]
    train = np.nonzero(ds.split == "train")[0]
    train_species = set(ds.species[train].tolist())
    for s in sorted(set(ds.species[test].tolist())):
        if s not in train_species:
            violations.append(SplitViolation("species_not_in_train", s))
    for i in test:
        # every train row is scanned; no spatial index on purpose
        d = np.hypot(ds.positions[train, 0] - ds.positions[i, 0], ds.positions[train, 1] - ds.positions[i, 1])
        close = (ds.species[train] == ds.species[i]) & (d <= radius)
        for j in np.nonzero(close)[0]:
            violations.append(SplitViolation("too_close", int(ds.species[i]), int(ds.occ_ids[i]),
                                             int(ds.occ_ids[train[j]]), float(d[j])))
    return violations
