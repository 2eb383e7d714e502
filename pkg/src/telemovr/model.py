"""Probability kernels of the state space model.

Start model: uniform over valid cells. Transition model: softmax of a
weighted feature sum over the movement neighborhood (zero probability
outside it). Observation model: independent von Mises noise per tower
around the true bearing, with per-tower bias and concentration. All
arithmetic is carried in log space.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import i0e, i1e

from .features import FeatureSet
from .grid import GridSpec, TowerSpec, bearing_to, wrap_angle

LOG_2PI = math.log(2.0 * math.pi)

# Upper clamp for fitted/updated concentrations; far beyond any bearing
# noise level that telemetry hardware can produce.
KAPPA_CAP = 1.0e4


def log_bessel_i0(kappa):
    """log I0(kappa), overflow-free for arbitrarily large kappa >= 0."""
    k = np.asarray(kappa, dtype=float)
    if np.any(k < 0) or not np.all(np.isfinite(k)):
        raise ValueError("kappa must be finite and non-negative")
    out = np.log(i0e(k)) + k
    return float(out) if out.ndim == 0 else out


def bessel_ratio(kappa):
    """A(kappa) = I1(kappa)/I0(kappa), in [0, 1), monotone increasing."""
    k = np.asarray(kappa, dtype=float)
    if np.any(k < 0) or not np.all(np.isfinite(k)):
        raise ValueError("kappa must be finite and non-negative")
    out = i1e(k) / i0e(k)
    return float(out) if out.ndim == 0 else out


@dataclass
class ModelParams:
    """Model parameters: feature weights per zone, tower biases, tower
    concentrations.

    lam has shape (Z, K); mu and kappa have shape (N,). mu is stored
    wrapped into [-pi, pi); kappa must be non-negative.
    """

    lam: np.ndarray
    mu: np.ndarray
    kappa: np.ndarray

    def __post_init__(self):
        self.lam = np.atleast_2d(np.asarray(self.lam, dtype=float))
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        self.kappa = np.atleast_1d(np.asarray(self.kappa, dtype=float))
        if not np.all(np.isfinite(self.lam)):
            raise ValueError("lambda weights must be finite")
        if not np.all(np.isfinite(self.mu)):
            raise ValueError("mu must be finite")
        if np.any(self.kappa < 0) or not np.all(np.isfinite(self.kappa)):
            raise ValueError("kappa must be finite and non-negative")
        if len(self.mu) != len(self.kappa):
            raise ValueError("mu and kappa must have one entry per tower")
        self.mu = np.asarray(wrap_angle(self.mu)) if len(self.mu) else self.mu

    @property
    def n_zones(self) -> int:
        return self.lam.shape[0]

    @property
    def n_features(self) -> int:
        return self.lam.shape[1]

    @property
    def n_towers(self) -> int:
        return len(self.mu)

    def copy(self) -> "ModelParams":
        return ModelParams(self.lam.copy(), self.mu.copy(), self.kappa.copy())

    @classmethod
    def zeros(cls, n_zones: int, n_features: int, n_towers: int,
              kappa0: float = 0.0) -> "ModelParams":
        return cls(np.zeros((n_zones, n_features)), np.zeros(n_towers),
                   np.full(n_towers, float(kappa0)))

    def to_json(self) -> dict:
        return {"lambda": self.lam.tolist(), "mu": self.mu.tolist(),
                "kappa": self.kappa.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "ModelParams":
        return cls(np.asarray(obj["lambda"]), np.asarray(obj["mu"]),
                   np.asarray(obj["kappa"]))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "ModelParams":
        with open(path, encoding="utf-8") as f:
            return cls.from_json(json.load(f))


class BearingSeries:
    """T x N observed bearings in [-pi, pi), NaN marking missing entries."""

    def __init__(self, bearings):
        arr = np.asarray(bearings, dtype=float)
        if arr.ndim != 2:
            raise ValueError("bearings must be a T x N array")
        present = ~np.isnan(arr)
        vals = arr[present]
        if np.any(vals < -np.pi) or np.any(vals >= np.pi):
            raise ValueError("present bearings must lie in [-pi, pi)")
        self.bearings = arr
        self.present = present

    @property
    def n_steps(self) -> int:
        return self.bearings.shape[0]

    @property
    def n_towers(self) -> int:
        return self.bearings.shape[1]

    def to_csv(self, path) -> None:
        """Write rows ``t,tower,bearing_rad``; missing entries are omitted."""
        with open(path, "w", encoding="utf-8") as f:
            f.write("t,tower,bearing_rad\n")
            for t in range(self.n_steps):
                for n in range(self.n_towers):
                    if self.present[t, n]:
                        f.write(f"{t},{n},{float(self.bearings[t, n])!r}\n")

    @classmethod
    def from_csv(cls, path, n_steps: int | None = None,
                 n_towers: int | None = None) -> "BearingSeries":
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if rows.size == 0:
            if n_steps is None or n_towers is None:
                raise ValueError("empty bearings file needs explicit dimensions")
            return cls(np.full((n_steps, n_towers), np.nan))
        t = rows[:, 0].astype(int)
        n = rows[:, 1].astype(int)
        T = n_steps if n_steps is not None else int(t.max()) + 1
        N = n_towers if n_towers is not None else int(n.max()) + 1
        arr = np.full((T, N), np.nan)
        arr[t, n] = rows[:, 2]
        return cls(arr)


def start_logprob(grid: GridSpec) -> float:
    """Log of the uniform start probability, -log |Q|."""
    return -math.log(grid.n_states)


def bearing_table(grid: GridSpec, towers: list[TowerSpec]) -> np.ndarray:
    """(|Q|, N) true bearings from each tower to each cell center.

    Rejects configurations where a tower sits exactly on a cell center,
    where the bearing is undefined.
    """
    if not towers:
        return np.zeros((grid.n_states, 0))
    pos = np.array([t.position for t in towers])
    dx = grid.centers[:, None, 0] - pos[None, :, 0]
    dy = grid.centers[:, None, 1] - pos[None, :, 1]
    hit = (dx == 0.0) & (dy == 0.0)
    if hit.any():
        c, n = np.argwhere(hit)[0]
        raise ValueError(f"tower {towers[n].id} coincides with the center of cell {c}")
    return np.asarray(wrap_angle(np.arctan2(dy, -dx)))


def transition_row(params: ModelParams, fs: FeatureSet, x: int,
                   zone: int = 0) -> np.ndarray:
    """Log transition probabilities from cell x to its neighborhood.

    Entries align with ``fs.grid.neighborhood(x)`` (ascending cell ids);
    cells outside the neighborhood have probability zero. The row is
    normalized in log space, so it is finite for arbitrary weights.
    """
    if not 0 <= zone < params.n_zones:
        raise ValueError(f"zone {zone} outside [0, {params.n_zones})")
    grid = fs.grid
    x = grid.check_cell(x)
    indptr, _ = grid.neighbor_structure()
    F = fs.values_matrix()
    scores = params.lam[zone] @ F[:, indptr[x]:indptr[x + 1]]
    m = scores.max()
    scores = scores - (m + np.log(np.exp(scores - m).sum()))
    return scores


def transition_table(params: ModelParams, fs: FeatureSet,
                     zone: int = 0) -> np.ndarray:
    """Log transition probabilities for every neighborhood pair at once,
    in CSR edge order (the vectorized form of :func:`transition_row`)."""
    if not 0 <= zone < params.n_zones:
        raise ValueError(f"zone {zone} outside [0, {params.n_zones})")
    grid = fs.grid
    indptr, _ = grid.neighbor_structure()
    scores = params.lam[zone] @ fs.values_matrix()
    starts = indptr[:-1]
    counts = np.diff(indptr)
    m = np.maximum.reduceat(scores, starts)
    m_spread = np.repeat(m, counts)
    sums = np.add.reduceat(np.exp(scores - m_spread), starts)
    logz = np.repeat(m + np.log(sums), counts)
    return scores - logz


class TransitionRowCache:
    """Memoized log transition rows for one parameter snapshot.

    Rows are computed on first use per (source cell, zone) and recalled
    afterwards; sampling and likelihood evaluation over a path touch only
    the visited sources, so only those rows are ever built. Rows live in a
    flat edge-aligned array per zone, so cached values can be gathered by
    edge index without per-row Python work.
    """

    def __init__(self, params: ModelParams, fs: FeatureSet):
        self.params = params
        self.fs = fs
        n_edges = fs.grid.n_edges
        self._flat = {z: np.empty(n_edges) for z in range(params.n_zones)}
        self._have = {z: np.zeros(fs.grid.n_states, dtype=bool)
                      for z in range(params.n_zones)}

    def row(self, x: int, zone: int = 0) -> np.ndarray:
        x = int(x)
        zone = int(zone)
        indptr, _ = self.fs.grid.neighbor_structure()
        flat = self._flat[zone]
        if not self._have[zone][x]:
            flat[indptr[x]:indptr[x + 1]] = transition_row(self.params,
                                                           self.fs, x, zone)
            self._have[zone][x] = True
        return flat[indptr[x]:indptr[x + 1]]

    def ensure(self, cells: np.ndarray, zone: int = 0) -> np.ndarray:
        """Fill rows for the given cells in one batched pass; returns the
        zone's flat edge-aligned array."""
        zone = int(zone)
        have = self._have[zone]
        missing = np.asarray(cells)[~have[cells]]
        if len(missing) > 0:
            indptr, _ = self.fs.grid.neighbor_structure()
            lengths = indptr[missing + 1] - indptr[missing]
            gather = np.concatenate(
                [np.arange(indptr[c], indptr[c + 1]) for c in missing])
            scores = self.params.lam[zone] @ self.fs.values_matrix()[:, gather]
            ptr = np.concatenate([[0], np.cumsum(lengths)])
            m = np.maximum.reduceat(scores, ptr[:-1])
            sums = np.add.reduceat(np.exp(scores - np.repeat(m, lengths)),
                                   ptr[:-1])
            flat = self._flat[zone]
            flat[gather] = scores - np.repeat(m + np.log(sums), lengths)
            have[missing] = True
        return self._flat[zone]

    def logprob(self, x: int, xp: int, zone: int = 0) -> float:
        """log p(xp | x); -inf when xp is outside the neighborhood of x."""
        grid = self.fs.grid
        nbh = grid.neighborhood(x)
        pos = np.searchsorted(nbh, xp)
        if pos >= len(nbh) or nbh[pos] != xp:
            return -np.inf
        return float(self.row(x, zone)[pos])


def obs_logprob(params: ModelParams, towers: list[TowerSpec], y_t: np.ndarray,
                x: int, grid: GridSpec) -> float:
    """Log likelihood of one observation row given the animal in cell x.

    Missing entries (NaN) contribute nothing; with all entries missing the
    result is 0.
    """
    y_t = np.asarray(y_t, dtype=float)
    center = grid.cell_center(x)
    total = 0.0
    for n, tower in enumerate(towers):
        if n < len(y_t) and not np.isnan(y_t[n]):
            h = bearing_to(tower, center)
            total += (params.kappa[n] * math.cos(y_t[n] - h - params.mu[n])
                      - LOG_2PI - log_bessel_i0(params.kappa[n]))
    return total


def obs_matrix(params: ModelParams, towers: list[TowerSpec],
               obs: BearingSeries, grid: GridSpec,
               H: np.ndarray | None = None,
               trig_h: np.ndarray | None = None) -> np.ndarray:
    """(T, |Q|) log observation likelihoods for every step and cell.

    cos(y - h - mu) is expanded so the whole table is one (T, 2N) x
    (2N, |Q|) product; trig_h may carry the precomputed [cos H; sin H]
    stack for repeated calls with changing parameters.
    """
    if obs.n_towers != len(towers):
        raise ValueError(f"series has {obs.n_towers} towers, model has {len(towers)}")
    if len(towers) != params.n_towers:
        raise ValueError("params do not match the tower list")
    if trig_h is None:
        if H is None:
            H = bearing_table(grid, towers)
        trig_h = np.vstack([np.cos(H.T), np.sin(H.T)])  # (2N, Q)
    pres = obs.present
    y = obs.bearings - params.mu[None, :]
    cy = np.where(pres, np.cos(y), 0.0) * params.kappa[None, :]
    sy = np.where(pres, np.sin(y), 0.0) * params.kappa[None, :]
    log_norm = LOG_2PI + log_bessel_i0(params.kappa)  # (N,)
    out = np.hstack([cy, sy]) @ trig_h
    out -= (pres @ log_norm)[:, None]
    return out


def _check_path(path, grid: GridSpec) -> np.ndarray:
    path = np.asarray(path, dtype=np.int64)
    if path.ndim != 1 or len(path) < 1:
        raise ValueError("path must be a non-empty sequence of cell ids")
    if path.min() < 0 or path.max() >= grid.n_states:
        raise ValueError("path contains invalid cell ids")
    return path


def edge_ids(grid: GridSpec, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """CSR edge index of each (src, dst) pair; raises when a pair is not a
    neighborhood pair. CSR order makes src*|Q|+dst globally sorted, so one
    searchsorted resolves all pairs at once."""
    keys = grid.edge_keys()
    want = np.asarray(src, dtype=np.int64) * grid.n_states + np.asarray(dst)
    pos = np.searchsorted(keys, want)
    bad = (pos >= len(keys)) | (keys[np.minimum(pos, len(keys) - 1)] != want)
    if bad.any():
        i = int(np.nonzero(bad)[0][0])
        raise ValueError(
            f"step {i}: cell {dst[i]} is outside the neighborhood of {src[i]}")
    return pos


def _path_edges(path: np.ndarray, grid: GridSpec) -> np.ndarray:
    """CSR edge index of every consecutive path pair; raises on a pair
    outside the movement neighborhood (a probability-zero transition)."""
    return edge_ids(grid, path[:-1], path[1:])


class PathObjective:
    """Complete-data log likelihood of a fixed path, as a fast function of
    the parameters.

    Gathers the feature columns of the path's unique (source, zone) rows
    and the observation trigonometry once at construction, so repeated
    evaluations (a gradient step's line search probes one path at many
    parameter points) cost only a few vector operations.
    """

    def __init__(self, fs: FeatureSet, towers: list[TowerSpec], path,
                 obs: BearingSeries, H: np.ndarray | None = None):
        grid = fs.grid
        path = _check_path(path, grid)
        if len(path) != obs.n_steps:
            raise ValueError("path length does not match the observation series")
        if H is None:
            H = bearing_table(grid, towers)
        self.n_zones = fs.n_zones
        self.n_features = fs.n_features
        self._start = start_logprob(grid)
        T = len(path)

        if T > 1:
            edges = _path_edges(path, grid)
            zones = fs.zone_map.sequence(T)[:-1]
            indptr, _ = grid.neighbor_structure()
            src = path[:-1]
            pair_key = zones * grid.n_states + src
            upairs, self._step_upair = np.unique(pair_key, return_inverse=True)
            usrc = upairs % grid.n_states
            self._uzone = upairs // grid.n_states
            lengths = indptr[usrc + 1] - indptr[usrc]
            self._row_ptr = np.concatenate([[0], np.cumsum(lengths)])
            gather = np.concatenate(
                [np.arange(indptr[c], indptr[c + 1]) for c in usrc])
            F = fs.values_matrix()
            self._rows_f = F[:, gather]                       # (K, L)
            # position of each step's edge inside the gathered layout
            offset = self._row_ptr[self._step_upair] - indptr[src]
            self._sel = edges + offset
            self._step_count = np.bincount(self._step_upair,
                                           minlength=len(upairs)).astype(float)
            self._zone_steps = [np.nonzero(zones == z)[0]
                                for z in range(self.n_zones)]
        else:
            self._sel = None

        delta = obs.bearings - H[path]
        pres = obs.present
        self._csum = np.where(pres, np.cos(delta), 0.0).sum(axis=0)
        self._ssum = np.where(pres, np.sin(delta), 0.0).sum(axis=0)
        self._m = pres.sum(axis=0).astype(float)

    def _trans_parts(self, lam: np.ndarray):
        ptr = self._row_ptr
        counts = np.diff(ptr)
        lam_edges = np.repeat(lam[self._uzone], counts, axis=0)   # (L, K)
        scores = np.einsum("kl,lk->l", self._rows_f, lam_edges)
        m = np.maximum.reduceat(scores, ptr[:-1])
        sums = np.add.reduceat(np.exp(scores - np.repeat(m, counts)), ptr[:-1])
        logz = m + np.log(sums)
        return scores, logz, counts

    def value(self, params: ModelParams) -> float:
        total = self._start
        if self._sel is not None:
            scores, logz, _ = self._trans_parts(params.lam)
            total += float(scores[self._sel].sum()
                           - self._step_count @ logz)
        cm, sm = np.cos(params.mu), np.sin(params.mu)
        cos_r_sum = self._csum * cm + self._ssum * sm
        total += float(params.kappa @ cos_r_sum
                       - self._m @ (LOG_2PI + log_bessel_i0(params.kappa)))
        return total

    def value_and_grad(self, params: ModelParams):
        total = self._start
        d_lam = np.zeros((self.n_zones, self.n_features))
        if self._sel is not None:
            scores, logz, counts = self._trans_parts(params.lam)
            total += float(scores[self._sel].sum() - self._step_count @ logz)
            probs = np.exp(scores - np.repeat(logz, counts))
            exp_f = np.add.reduceat(self._rows_f * probs[None, :],
                                    self._row_ptr[:-1], axis=1)   # (K, U)
            for z in range(self.n_zones):
                steps = self._zone_steps[z]
                if len(steps) == 0:
                    continue
                zmask = self._uzone == z
                d_lam[z] = (self._rows_f[:, self._sel[steps]].sum(axis=1)
                            - exp_f[:, zmask] @ self._step_count[zmask])
        cm, sm = np.cos(params.mu), np.sin(params.mu)
        cos_r_sum = self._csum * cm + self._ssum * sm
        sin_r_sum = self._ssum * cm - self._csum * sm
        total += float(params.kappa @ cos_r_sum
                       - self._m @ (LOG_2PI + log_bessel_i0(params.kappa)))
        d_mu = params.kappa * sin_r_sum
        d_kappa = cos_r_sum - self._m * bessel_ratio(params.kappa)
        return total, (d_lam, d_mu, d_kappa)


def complete_loglik(params: ModelParams, fs: FeatureSet,
                    towers: list[TowerSpec], path, obs: BearingSeries,
                    H: np.ndarray | None = None) -> float:
    """Joint log probability of a latent path and the observed bearings."""
    return PathObjective(fs, towers, path, obs, H=H).value(params)


def grad_complete_loglik(params: ModelParams, fs: FeatureSet,
                         towers: list[TowerSpec], path, obs: BearingSeries,
                         H: np.ndarray | None = None):
    """Gradient of :func:`complete_loglik` in the model parameters.

    Returns (d_lam, d_mu, d_kappa) with the shapes of the corresponding
    parameter blocks. The weight gradient is the realized feature value
    minus its expectation under the current transition row, summed per
    zone; the von Mises gradients are the usual location/concentration
    score sums over present entries.
    """
    _, grads = PathObjective(fs, towers, path, obs, H=H).value_and_grad(params)
    return grads
