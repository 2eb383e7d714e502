"""Scenario directory layout shared by the generator and the CLI.

A scenario directory holds grid.json, towers.json, features/ (feature
config plus payload CSVs), bearings.csv, and, for synthetic data,
true_params.json and true_path.csv. Real datasets use the same layout
without the truth files; sparse ground-truth positions may be supplied as
gps.csv with rows ``t,x,y``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .features import FeatureSet, ZoneMap, load_feature_dir, save_features
from .grid import GridSpec, TowerSpec, load_grid, load_towers, save_grid, save_towers
from .model import BearingSeries, ModelParams
from .synth import Scenario


def write_path_csv(path, grid: GridSpec, file) -> None:
    """Write a cell-id path as CSV rows ``t,cell,center_x,center_y``."""
    arr = np.asarray(path, dtype=np.int64)
    with open(file, "w", encoding="utf-8") as f:
        f.write("t,cell,center_x,center_y\n")
        for t, c in enumerate(arr):
            x, y = grid.centers[c]
            f.write(f"{t},{c},{float(x)!r},{float(y)!r}\n")


def read_path_csv(file) -> np.ndarray:
    rows = np.loadtxt(file, delimiter=",", skiprows=1, ndmin=2)
    order = np.argsort(rows[:, 0])
    return rows[order, 1].astype(np.int64)


def read_gps_csv(file) -> dict[int, tuple[float, float]]:
    rows = np.loadtxt(file, delimiter=",", skiprows=1, ndmin=2)
    return {int(t): (float(x), float(y)) for t, x, y in rows}


def write_scenario(dirpath, sc: Scenario) -> Path:
    """Write a scenario directory; returns its path."""
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    save_grid(sc.grid, d / "grid.json")
    save_towers(sc.towers, d / "towers.json")
    save_features(sc.features, d / "features")
    sc.true_params.save(d / "true_params.json")
    write_path_csv(sc.true_path, sc.grid, d / "true_path.csv")
    sc.obs.to_csv(d / "bearings.csv")
    return d


class ScenarioDir:
    """Lazy reader over a scenario directory (synthetic or real)."""

    def __init__(self, dirpath, zone_map: ZoneMap | None = None):
        self.dir = Path(dirpath)
        if not self.dir.is_dir():
            raise FileNotFoundError(f"scenario directory {self.dir} not found")
        for req in ("grid.json", "towers.json", "features", "bearings.csv"):
            if not (self.dir / req).exists():
                raise FileNotFoundError(f"scenario is missing {req}")
        self.grid = load_grid(self.dir / "grid.json")
        self.towers = load_towers(self.dir / "towers.json")
        self.features = load_feature_dir(self.dir / "features", self.grid,
                                         zone_map=zone_map)
        self.obs = BearingSeries.from_csv(self.dir / "bearings.csv",
                                          n_towers=len(self.towers))

    @property
    def true_params(self) -> ModelParams | None:
        p = self.dir / "true_params.json"
        return ModelParams.load(p) if p.exists() else None

    @property
    def true_path(self) -> np.ndarray | None:
        p = self.dir / "true_path.csv"
        return read_path_csv(p) if p.exists() else None

    @property
    def gps(self) -> dict[int, tuple[float, float]] | None:
        p = self.dir / "gps.csv"
        return read_gps_csv(p) if p.exists() else None
