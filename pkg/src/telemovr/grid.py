"""Discretized latent state space: grid geometry, neighborhoods, tower bearings.

Valid cells carry consecutive integer ids in row-major order (row 0 first);
those ids are the latent states used throughout the package. Cell id 0 is the
first valid cell in row 0. All coordinates are planar meters.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(a: float | np.ndarray) -> float | np.ndarray:
    """Wrap angles into [-pi, pi).

    Accepts scalars or arrays. The interval is half-open: pi wraps to -pi,
    -pi stays -pi. Non-finite input is rejected.
    """
    arr = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError("angle must be finite")
    wrapped = np.mod(arr + np.pi, TWO_PI) - np.pi
    if wrapped.ndim == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class TowerSpec:
    """A fixed receiver tower at a planar position (meters)."""

    id: int
    position: tuple[float, float]

    def __post_init__(self):
        x, y = self.position
        if not (math.isfinite(x) and math.isfinite(y)):
            raise ValueError(f"tower {self.id}: position must be finite")


def bearing_to(tower: TowerSpec, target) -> float:
    """Radial bearing from a tower toward a target point, in [-pi, pi).

    Bearing pi/2 points north (+y) and bearing 0 points west (-x): with
    displacement (dx, dy) = target - tower, the bearing is
    wrap(atan2(dy, -dx)). Zero displacement is rejected.
    """
    dx = float(target[0]) - tower.position[0]
    dy = float(target[1]) - tower.position[1]
    if dx == 0.0 and dy == 0.0:
        raise ValueError(f"tower {tower.id}: bearing to its own position is undefined")
    return wrap_angle(math.atan2(dy, -dx))


class GridSpec:
    """Square-cell grid over a rectangle with a validity mask and move radius.

    Parameters
    ----------
    origin : (float, float)
        Lower-left corner (x, y) of the gridded rectangle, meters.
    cell_size : float
        Side length of the square cells, meters.
    n_rows, n_cols : int
        Grid dimensions; rows advance along +y, columns along +x.
    move_radius : float
        Maximum per-step displacement, meters. Must be >= cell_size so that
        at least the four axis neighbors are reachable.
    valid_mask : array of bool, shape (n_rows, n_cols), optional
        Cells marked False are excluded from the state space (e.g. water
        around an island). Defaults to all valid.
    """

    def __init__(self, origin, cell_size, n_rows, n_cols, move_radius,
                 valid_mask=None):
        if cell_size <= 0:
            raise ValueError("cell_size must be positive")
        if n_rows < 1 or n_cols < 1:
            raise ValueError("grid dimensions must be positive")
        if move_radius < cell_size:
            raise ValueError("move_radius must be at least cell_size")
        self.origin = (float(origin[0]), float(origin[1]))
        self.cell_size = float(cell_size)
        self.n_rows = int(n_rows)
        self.n_cols = int(n_cols)
        self.move_radius = float(move_radius)
        if valid_mask is None:
            mask = np.ones((self.n_rows, self.n_cols), dtype=bool)
        else:
            mask = np.asarray(valid_mask, dtype=bool)
            if mask.shape != (self.n_rows, self.n_cols):
                raise ValueError(
                    f"valid_mask shape {mask.shape} does not match "
                    f"({self.n_rows}, {self.n_cols})")
        self.valid_mask = mask
        if not mask.any():
            raise ValueError("grid has no valid cells")

        rows, cols = np.nonzero(mask)  # row-major order
        self.cell_rc = np.column_stack([rows, cols])
        self.n_states = len(rows)
        x0, y0 = self.origin
        self.centers = np.column_stack([
            x0 + (cols + 0.5) * self.cell_size,
            y0 + (rows + 0.5) * self.cell_size,
        ])
        self._id_grid = np.full((self.n_rows, self.n_cols), -1, dtype=np.int64)
        self._id_grid[rows, cols] = np.arange(self.n_states)
        self._csr = None
        self._by_dst = None
        self._edge_keys = None

    def __repr__(self):
        return (f"GridSpec({self.n_rows}x{self.n_cols}, cell={self.cell_size}, "
                f"radius={self.move_radius}, |Q|={self.n_states})")

    def check_cell(self, c: int) -> int:
        c = int(c)
        if not 0 <= c < self.n_states:
            raise ValueError(f"cell id {c} outside [0, {self.n_states})")
        return c

    def cell_center(self, c: int) -> tuple[float, float]:
        """Geometric midpoint of cell c."""
        c = self.check_cell(c)
        x, y = self.centers[c]
        return (float(x), float(y))

    def _disc_offsets(self):
        """Row/col offsets whose center distance is within move_radius."""
        r = int(math.floor(self.move_radius / self.cell_size + 1e-9))
        offs = []
        for di in range(-r, r + 1):
            for dj in range(-r, r + 1):
                if self.cell_size * math.hypot(di, dj) <= self.move_radius * (1 + 1e-12):
                    offs.append((di, dj))
        return offs

    def neighbor_structure(self):
        """CSR arrays (indptr, indices) of the movement neighborhoods.

        indices[indptr[c]:indptr[c+1]] are the valid cells within
        move_radius of c (self included), ascending. Built once and cached.
        """
        if self._csr is None:
            nr, nc = self.n_rows, self.n_cols
            idg = self._id_grid
            srcs, dsts = [], []
            for di, dj in self._disc_offsets():
                # overlap of the grid with itself shifted by (di, dj)
                r0, r1 = max(0, -di), min(nr, nr - di)
                c0, c1 = max(0, -dj), min(nc, nc - dj)
                if r0 >= r1 or c0 >= c1:
                    continue
                a = idg[r0:r1, c0:c1]
                b = idg[r0 + di:r1 + di, c0 + dj:c1 + dj]
                ok = (a >= 0) & (b >= 0)
                srcs.append(a[ok])
                dsts.append(b[ok])
            src = np.concatenate(srcs)
            dst = np.concatenate(dsts)
            order = np.lexsort((dst, src))
            src, dst = src[order], dst[order]
            indptr = np.zeros(self.n_states + 1, dtype=np.int64)
            np.add.at(indptr, src + 1, 1)
            np.cumsum(indptr, out=indptr)
            self._csr = (indptr, dst)
        return self._csr

    def by_destination(self):
        """Edge permutation grouping the CSR edges by destination cell.

        Returns (perm, dst_indptr, src_of_edge): applying perm to any
        edge-aligned array groups it by destination, sorted by source within
        each group; src_of_edge is in the native (source-grouped) layout.
        """
        if self._by_dst is None:
            indptr, dst = self.neighbor_structure()
            src = np.repeat(np.arange(self.n_states), np.diff(indptr))
            perm = np.lexsort((src, dst))
            dst_indptr = np.zeros(self.n_states + 1, dtype=np.int64)
            np.add.at(dst_indptr, dst + 1, 1)
            np.cumsum(dst_indptr, out=dst_indptr)
            self._by_dst = (perm, dst_indptr, src)
        return self._by_dst

    def neighborhood(self, c: int) -> np.ndarray:
        """Valid cells within move_radius of c, self included, ascending ids."""
        c = self.check_cell(c)
        indptr, indices = self.neighbor_structure()
        return indices[indptr[c]:indptr[c + 1]]

    def edge_keys(self) -> np.ndarray:
        """Sorted src*|Q|+dst key per CSR edge, for vectorized edge lookup."""
        if self._edge_keys is None:
            indptr, indices = self.neighbor_structure()
            src = np.repeat(np.arange(self.n_states), np.diff(indptr))
            self._edge_keys = src * self.n_states + indices
        return self._edge_keys

    @property
    def n_edges(self) -> int:
        indptr, _ = self.neighbor_structure()
        return int(indptr[-1])

    def to_config(self) -> dict:
        cfg = {
            "origin": list(self.origin),
            "cell_size": self.cell_size,
            "n_rows": self.n_rows,
            "n_cols": self.n_cols,
            "move_radius": self.move_radius,
        }
        return cfg


def load_grid(path) -> GridSpec:
    """Read a grid from a JSON config.

    Schema: {origin: [x, y], cell_size, n_rows, n_cols, move_radius,
    mask: optional path to a 0/1 CSV (n_rows lines of n_cols values,
    row 0 first)}. A relative mask path is resolved against the config
    file's directory; no mask means all cells valid.
    """
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        cfg = json.load(f)
    mask = None
    if cfg.get("mask"):
        mask_path = Path(cfg["mask"])
        if not mask_path.is_absolute():
            mask_path = path.parent / mask_path
        mask = np.loadtxt(mask_path, delimiter=",", dtype=int, ndmin=2) != 0
    return GridSpec(
        origin=cfg["origin"],
        cell_size=cfg["cell_size"],
        n_rows=cfg["n_rows"],
        n_cols=cfg["n_cols"],
        move_radius=cfg["move_radius"],
        valid_mask=mask,
    )


def save_grid(grid: GridSpec, path, mask_name: str = "mask.csv") -> None:
    """Write a grid config JSON; a mask CSV is written only if needed."""
    path = Path(path)
    cfg = grid.to_config()
    if not grid.valid_mask.all():
        np.savetxt(path.parent / mask_name, grid.valid_mask.astype(int),
                   fmt="%d", delimiter=",")
        cfg["mask"] = mask_name
    with open(path, "w", encoding="utf-8") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")


def load_towers(path) -> list[TowerSpec]:
    """Read towers from JSON: [{id, x, y}, ...]."""
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    towers = [TowerSpec(id=int(e["id"]), position=(float(e["x"]), float(e["y"])))
              for e in raw]
    ids = [t.id for t in towers]
    if sorted(ids) != list(range(len(towers))):
        raise ValueError("tower ids must be 0..N-1")
    towers.sort(key=lambda t: t.id)
    return towers


def save_towers(towers: list[TowerSpec], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump([{"id": t.id, "x": t.position[0], "y": t.position[1]}
                   for t in towers], f, indent=2, sort_keys=True)
        f.write("\n")
