"""Pairwise spatial features over grid transitions.

A feature assigns a real value to every (source cell, destination cell)
pair inside the movement neighborhood. Feature values are stored in the
grid's CSR edge layout and computed once per feature set; the transition
model consumes them as a (K, n_edges) matrix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import GridSpec

FEATURE_KINDS = ("distance_gaussian", "raster_delta", "nearest_distance", "tabulated")


@dataclass
class FeatureDef:
    """One pairwise feature.

    kind:
      distance_gaussian  -(|dst - src|^2)/2 over cell centers (meters^2)
      raster_delta       raster[dst] - raster[src]; payload is one value per
                         valid cell (length |Q| vector, or an
                         (n_rows, n_cols) raster read at valid cells)
      nearest_distance   -(d(dst) - d(src))^2 / 2 where d(c) is the distance
                         from c's center to the closest payload point;
                         payload is a list of (x, y) points
      tabulated          stored value per neighborhood pair; payload is a
                         vector in CSR edge order, or a dict
                         {(src, dst): value} covering every pair
    normalize: divide values by the largest absolute raw value over all
    neighborhood pairs so they land in [-1, 1] (all-zero features keep
    scale 1).
    """

    name: str
    kind: str
    payload: object = None
    normalize: bool = False

    def __post_init__(self):
        if self.kind not in FEATURE_KINDS:
            raise ValueError(f"unknown feature kind {self.kind!r}")


class ZoneMap:
    """Assigns each time step to a weight-vector zone.

    With ``intervals=None`` every step is zone 0. Otherwise intervals are
    (t_start, t_end, zone) with inclusive 0-based endpoints; together they
    must cover every step of the series they are applied to.
    """

    def __init__(self, n_zones: int = 1, intervals=None):
        if n_zones < 1:
            raise ValueError("n_zones must be >= 1")
        self.n_zones = int(n_zones)
        self.intervals = None
        if intervals is not None:
            self.intervals = [(int(a), int(b), int(z)) for a, b, z in intervals]
            for a, b, z in self.intervals:
                if not 0 <= z < self.n_zones:
                    raise ValueError(f"zone {z} outside [0, {self.n_zones})")
                if b < a:
                    raise ValueError(f"empty interval [{a}, {b}]")

    def sequence(self, n_steps: int) -> np.ndarray:
        """Zone id for each step t in [0, n_steps)."""
        if self.intervals is None:
            return np.zeros(n_steps, dtype=np.int64)
        seq = np.full(n_steps, -1, dtype=np.int64)
        for a, b, z in self.intervals:
            seq[max(a, 0):min(b, n_steps - 1) + 1] = z
        if (seq < 0).any():
            t = int(np.nonzero(seq < 0)[0][0])
            raise ValueError(f"zone map does not cover step {t}")
        return seq

    def to_config(self) -> dict:
        if self.intervals is None:
            return {"zones": self.n_zones, "assignment": "all"}
        return {"zones": self.n_zones,
                "assignment": [list(iv) for iv in self.intervals]}

    @classmethod
    def from_config(cls, cfg: dict) -> "ZoneMap":
        assignment = cfg.get("assignment", "all")
        intervals = None if assignment == "all" else assignment
        return cls(n_zones=int(cfg.get("zones", 1)), intervals=intervals)


class FeatureSet:
    """An ordered list of features bound to a grid, plus the zone map.

    Raw values and normalization scales are computed lazily, once, for all
    neighborhood pairs; cached matrices are safe for concurrent readers.
    """

    def __init__(self, grid: GridSpec, defs, zone_map: ZoneMap | None = None):
        if not defs:
            raise ValueError("at least one feature is required")
        self.grid = grid
        self.defs = list(defs)
        self.zone_map = zone_map if zone_map is not None else ZoneMap()
        self._raw = None
        self._scales = None
        self._values = None

    @property
    def n_features(self) -> int:
        return len(self.defs)

    @property
    def n_zones(self) -> int:
        return self.zone_map.n_zones

    def _raster_values(self, payload) -> np.ndarray:
        arr = np.asarray(payload, dtype=float)
        if arr.ndim == 2:
            if arr.shape != (self.grid.n_rows, self.grid.n_cols):
                raise ValueError("raster shape does not match the grid")
            rc = self.grid.cell_rc
            arr = arr[rc[:, 0], rc[:, 1]]
        if arr.shape != (self.grid.n_states,):
            raise ValueError("raster payload must cover every valid cell")
        if not np.all(np.isfinite(arr)):
            raise ValueError("raster payload must be finite")
        return arr

    def _tabulated_values(self, payload) -> np.ndarray:
        indptr, indices = self.grid.neighbor_structure()
        n_edges = self.grid.n_edges
        if isinstance(payload, dict):
            vals = np.full(n_edges, np.nan)
            src = np.repeat(np.arange(self.grid.n_states), np.diff(indptr))
            pos = {(int(s), int(d)): i for i, (s, d) in enumerate(zip(src, indices))}
            for (s, d), v in payload.items():
                if (s, d) not in pos:
                    raise ValueError(f"pair ({s}, {d}) is not a neighborhood pair")
                vals[pos[(s, d)]] = float(v)
            if np.isnan(vals).any():
                raise ValueError("tabulated payload must cover every neighborhood pair")
        else:
            vals = np.asarray(payload, dtype=float)
            if vals.shape != (n_edges,):
                raise ValueError(
                    f"tabulated payload length {vals.shape} != n_edges ({n_edges},)")
        if not np.all(np.isfinite(vals)):
            raise ValueError("tabulated payload must be finite")
        return vals

    def _raw_row(self, d: FeatureDef) -> np.ndarray:
        grid = self.grid
        indptr, indices = grid.neighbor_structure()
        src = np.repeat(np.arange(grid.n_states), np.diff(indptr))
        if d.kind == "distance_gaussian":
            delta = grid.centers[indices] - grid.centers[src]
            return -0.5 * np.einsum("ij,ij->i", delta, delta)
        if d.kind == "raster_delta":
            r = self._raster_values(d.payload)
            return r[indices] - r[src]
        if d.kind == "nearest_distance":
            pts = np.asarray(d.payload, dtype=float).reshape(-1, 2)
            if len(pts) == 0:
                raise ValueError(f"feature {d.name!r}: no payload points")
            diff = grid.centers[:, None, :] - pts[None, :, :]
            dmin = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff)).min(axis=1)
            dd = dmin[indices] - dmin[src]
            return -0.5 * dd * dd
        if d.kind == "tabulated":
            return self._tabulated_values(d.payload)
        raise ValueError(f"unknown feature kind {d.kind!r}")

    def raw_matrix(self) -> np.ndarray:
        """(K, n_edges) raw feature values in CSR edge order."""
        if self._raw is None:
            self._raw = np.vstack([self._raw_row(d) for d in self.defs])
        return self._raw

    def normalization_scale(self, k: int) -> float:
        """Largest absolute raw value of feature k over all neighborhood
        pairs; 1.0 for an identically zero feature."""
        if not 0 <= k < self.n_features:
            raise ValueError(f"feature index {k} outside [0, {self.n_features})")
        if self._scales is None:
            raw = self.raw_matrix()
            scales = np.abs(raw).max(axis=1)
            scales[scales == 0.0] = 1.0
            self._scales = scales
        return float(self._scales[k])

    def values_matrix(self) -> np.ndarray:
        """(K, n_edges) feature values with normalization applied."""
        if self._values is None:
            raw = self.raw_matrix()
            out = raw.astype(float, copy=True)
            for k, d in enumerate(self.defs):
                if d.normalize:
                    out[k] /= self.normalization_scale(k)
            self._values = out
        return self._values

    def _edge_index(self, x: int, xp: int) -> int:
        indptr, indices = self.grid.neighbor_structure()
        x = self.grid.check_cell(x)
        xp = self.grid.check_cell(xp)
        lo, hi = indptr[x], indptr[x + 1]
        pos = lo + np.searchsorted(indices[lo:hi], xp)
        if pos >= hi or indices[pos] != xp:
            raise ValueError(f"cell {xp} is not in the neighborhood of {x}")
        return int(pos)

    def eval_feature(self, k: int, x: int, xp: int) -> float:
        """Value of feature k on the neighborhood pair (x, xp)."""
        if not 0 <= k < self.n_features:
            raise ValueError(f"feature index {k} outside [0, {self.n_features})")
        return float(self.values_matrix()[k, self._edge_index(x, xp)])

    def feature_vector(self, x: int, xp: int) -> np.ndarray:
        """All K feature values on the pair (x, xp)."""
        return self.values_matrix()[:, self._edge_index(x, xp)].copy()


def single_distance_feature(grid: GridSpec, normalize: bool = True) -> FeatureSet:
    """Feature set holding only the squared-displacement feature, the
    discrete stand-in for an isotropic Gaussian random walk."""
    return FeatureSet(grid, [FeatureDef(name="distance", kind="distance_gaussian",
                                        normalize=normalize)])


def load_features(path, grid: GridSpec, zone_map: ZoneMap | None = None) -> FeatureSet:
    """Read a feature set from JSON.

    Schema: [{name, kind, normalize, payload}] where payload is a CSV path
    for raster_delta (grid-shaped) and tabulated (rows ``source,neighbor,
    value``), a list of [x, y] points for nearest_distance, and absent for
    distance_gaussian. Relative paths resolve against the config file.
    """
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    defs = []
    for e in raw:
        kind = e["kind"]
        payload = e.get("payload")
        if kind in ("raster_delta", "tabulated") and isinstance(payload, str):
            p = Path(payload)
            if not p.is_absolute():
                p = path.parent / p
            if kind == "raster_delta":
                payload = np.loadtxt(p, delimiter=",", ndmin=2)
            else:
                tbl = np.loadtxt(p, delimiter=",", skiprows=1, ndmin=2)
                payload = {(int(s), int(d)): v for s, d, v in tbl}
        defs.append(FeatureDef(name=e["name"], kind=kind, payload=payload,
                               normalize=bool(e.get("normalize", False))))
    return FeatureSet(grid, defs, zone_map=zone_map)


def save_features(fs: FeatureSet, dirpath) -> None:
    """Write a feature set as features.json plus payload CSVs in dirpath."""
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    entries = []
    indptr, indices = fs.grid.neighbor_structure()
    src = np.repeat(np.arange(fs.grid.n_states), np.diff(indptr))
    for k, d in enumerate(fs.defs):
        entry = {"name": d.name, "kind": d.kind, "normalize": d.normalize}
        if d.kind == "tabulated":
            fname = f"{k:02d}_{d.name}.csv"
            vals = fs._tabulated_values(d.payload)
            with open(dirpath / fname, "w", encoding="utf-8") as f:
                f.write("source,neighbor,value\n")
                for s, dd, v in zip(src, indices, vals):
                    f.write(f"{s},{dd},{float(v)!r}\n")
            entry["payload"] = fname
        elif d.kind == "raster_delta":
            fname = f"{k:02d}_{d.name}.csv"
            r = fs._raster_values(d.payload)
            full = np.zeros((fs.grid.n_rows, fs.grid.n_cols))
            rc = fs.grid.cell_rc
            full[rc[:, 0], rc[:, 1]] = r
            np.savetxt(dirpath / fname, full, delimiter=",")
            entry["payload"] = fname
        elif d.kind == "nearest_distance":
            entry["payload"] = [list(map(float, p)) for p in np.asarray(d.payload).reshape(-1, 2)]
        entries.append(entry)
    with open(dirpath / "features.json", "w", encoding="utf-8") as f:
        json.dump(entries, f, indent=2, sort_keys=True)
        f.write("\n")


def load_feature_dir(dirpath, grid: GridSpec, zone_map: ZoneMap | None = None) -> FeatureSet:
    """Read back a feature directory written by :func:`save_features`."""
    return load_features(Path(dirpath) / "features.json", grid, zone_map=zone_map)
