"""Occurrence records, datasets and location grouping."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sdmkit import SPLIT_TAGS

OCCURRENCE_HEADER = ["occ_id", "lon", "lat", "species_id"]
SPECIES_HEADER = ["species_id", "external_label"]
SPLIT_HEADER = ["occ_id", "split"]

EARTH_RADIUS_M = 6371008.8


class DataError(ValueError):
    """Malformed or inconsistent occurrence data."""


@dataclass(frozen=True)
class Occurrence:
    occ_id: int
    x: float
    y: float
    species: int

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class LocationKey:
    position: tuple[float, float]
    occ_ids: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.occ_ids)


@dataclass(eq=False)
class Dataset:
    """Column-oriented occurrence table.

    ``coords`` holds the coordinates exactly as read; ``positions`` holds the
    planar metre coordinates every model works with. In ``planar`` mode the two
    are identical, in ``lonlat`` mode ``positions`` is the equirectangular
    projection of ``coords`` about ``origin`` (lon0, lat0 in degrees).
    """

    occ_ids: np.ndarray
    coords: np.ndarray
    species: np.ndarray
    labels: np.ndarray
    crs: str = "planar"
    origin: tuple[float, float] | None = None
    split: np.ndarray | None = None
    positions: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.occ_ids = np.asarray(self.occ_ids, dtype=np.int64)
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        self.species = np.asarray(self.species, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.occ_ids)
        if self.coords.shape[0] != n or self.species.shape[0] != n:
            raise DataError("column lengths disagree")
        if not np.all(np.isfinite(self.coords)):
            raise DataError("non-finite coordinate")
        if n and (self.species.min() < 0 or self.species.max() >= len(self.labels)):
            raise DataError("species id outside [0, N)")
        if len(np.unique(self.occ_ids)) != n:
            raise DataError("duplicate occ_id")
        if self.split is None:
            self.split = np.full(n, "none", dtype="<U13")
        else:
            self.split = np.asarray(self.split, dtype="<U13")
            bad = set(np.unique(self.split)) - set(SPLIT_TAGS)
            if bad:
                raise DataError(f"unknown split tag(s): {sorted(bad)}")
        if self.crs == "planar":
            self.positions = self.coords.copy()
        elif self.crs == "lonlat":
            if self.origin is None:
                self.origin = (float(self.coords[:, 0].mean()), float(self.coords[:, 1].mean()))
            self.positions = project_equirectangular(self.coords, self.origin)
        else:
            raise DataError(f"unknown crs mode {self.crs!r}")
        for arr in (self.occ_ids, self.coords, self.species, self.labels, self.positions):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.occ_ids)

    @property
    def n_species(self) -> int:
        return len(self.labels)

    @property
    def domain_bounds(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax) of the planar positions."""
        lo = self.positions.min(axis=0)
        hi = self.positions.max(axis=0)
        return (float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))

    def occurrences(self):
        for i in range(len(self)):
            yield Occurrence(int(self.occ_ids[i]), float(self.positions[i, 0]),
                             float(self.positions[i, 1]), int(self.species[i]))

    def with_split(self, tags) -> Dataset:
        return Dataset(self.occ_ids, self.coords, self.species, self.labels,
                       crs=self.crs, origin=self.origin, split=np.asarray(tags))

    def mask(self, *tags: str) -> np.ndarray:
        return np.isin(self.split, tags)

    def subset(self, idx) -> Dataset:
        """Rows selected by ``idx``; the species table is kept whole."""
        idx = np.asarray(idx)
        return Dataset(self.occ_ids[idx], self.coords[idx], self.species[idx], self.labels,
                       crs=self.crs, origin=self.origin, split=self.split[idx])

    def species_counts(self, *tags: str) -> np.ndarray:
        sel = self.mask(*tags) if tags else slice(None)
        return np.bincount(self.species[sel], minlength=self.n_species)

    def same_as(self, other: Dataset) -> bool:
        return (self.crs == other.crs
                and np.array_equal(self.occ_ids, other.occ_ids)
                and np.array_equal(self.coords, other.coords)
                and np.array_equal(self.species, other.species)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.split, other.split))


def project_equirectangular(lonlat: np.ndarray, origin: tuple[float, float]) -> np.ndarray:
    lon0, lat0 = origin
    lonlat = np.asarray(lonlat, dtype=np.float64)
    x = EARTH_RADIUS_M * np.radians(lonlat[:, 0] - lon0) * math.cos(math.radians(lat0))
    y = EARTH_RADIUS_M * np.radians(lonlat[:, 1] - lat0)
    return np.column_stack([x, y])


def _parse_number(text: str, kind, lineno: int, column: str):
    try:
        value = kind(text)
    except ValueError:
        raise DataError(f"line {lineno}: non-numeric {column} {text!r}") from None
    if kind is float and not math.isfinite(value):
        raise DataError(f"line {lineno}: non-finite {column} {text!r}")
    return value


def load_occurrences(path, crs: str = "planar") -> Dataset:
    """Read an ``occ_id,lon,lat,species_id`` CSV.

    External species labels are remapped to dense ids ordered by label value,
    so the mapping does not depend on row order.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    occ_ids, coords, raw_species = [], [], []
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != OCCURRENCE_HEADER:
            raise DataError(f"{path}: expected header {','.join(OCCURRENCE_HEADER)}")
        for row in reader:
            lineno = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise DataError(f"line {lineno}: expected 4 fields, got {len(row)}")
            occ_id = _parse_number(row[0], int, lineno, "occ_id")
            lon = _parse_number(row[1], float, lineno, "coordinate")
            lat = _parse_number(row[2], float, lineno, "coordinate")
            label = _parse_number(row[3], int, lineno, "species_id")
            if occ_id in seen:
                raise DataError(f"line {lineno}: duplicate occ_id {occ_id}")
            seen.add(occ_id)
            occ_ids.append(occ_id)
            coords.append((lon, lat))
            raw_species.append(label)
    if not occ_ids:
        raise DataError(f"{path}: no occurrences")
    labels, species = np.unique(np.asarray(raw_species, dtype=np.int64), return_inverse=True)
    return Dataset(np.asarray(occ_ids), np.asarray(coords), species.ravel(), labels, crs=crs)


def write_occurrences(ds: Dataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OCCURRENCE_HEADER)
        for i in range(len(ds)):
            w.writerow([int(ds.occ_ids[i]), repr(float(ds.coords[i, 0])),
                        repr(float(ds.coords[i, 1])), int(ds.labels[ds.species[i]])])


def write_species_table(ds: Dataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SPECIES_HEADER)
        for sid, label in enumerate(ds.labels):
            w.writerow([sid, int(label)])


def load_species_table(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        rows = sorted((int(r["species_id"]), int(r["external_label"])) for r in reader)
    if [sid for sid, _ in rows] != list(range(len(rows))):
        raise DataError(f"{path}: species ids are not dense")
    return np.asarray([label for _, label in rows], dtype=np.int64)


def write_split(ds: Dataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SPLIT_HEADER)
        for occ_id, tag in zip(ds.occ_ids, ds.split):
            w.writerow([int(occ_id), tag])


def load_split(ds: Dataset, path) -> Dataset:
    """Attach the tags of a ``occ_id,split`` CSV to ``ds``."""
    tags = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SPLIT_HEADER:
            raise DataError(f"{path}: expected header {','.join(SPLIT_HEADER)}")
        for row in reader:
            if not row:
                continue
            tags[_parse_number(row[0], int, reader.line_num, "occ_id")] = row[1].strip()
    missing = [int(o) for o in ds.occ_ids if int(o) not in tags]
    if missing:
        raise DataError(f"{path}: no split tag for occ_id {missing[0]}"
                        + (f" and {len(missing) - 1} more" if len(missing) > 1 else ""))
    return ds.with_split([tags[int(o)] for o in ds.occ_ids])


def group_positions(positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact-equality grouping: (unique positions sorted lexicographically, inverse)."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    # +0.0 folds -0.0 into 0.0 so the byte-level sort agrees with float equality
    uniq, inverse = np.unique(positions + 0.0, axis=0, return_inverse=True)
    return uniq, inverse.ravel()


def quantize_locations(ds: Dataset) -> list[LocationKey]:
    if len(ds) == 0:
        raise DataError("empty dataset")
    uniq, inverse = group_positions(ds.positions)
    order = np.argsort(inverse, kind="stable")
    bounds = np.searchsorted(inverse[order], np.arange(len(uniq) + 1))
    keys = []
    for k in range(len(uniq)):
        members = ds.occ_ids[order[bounds[k]:bounds[k + 1]]]
        keys.append(LocationKey((float(uniq[k, 0]), float(uniq[k, 1])),
                                tuple(int(m) for m in members)))
    return keys
