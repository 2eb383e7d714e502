"""Synthetic data generation.

Reproduces the virtual-island evaluation protocol at configurable scale:
random tabulated movement models, a constrained random-walk path, and
noisy bearings with per-tower von Mises noise. All draws come from one
seeded generator, so a scenario is a deterministic function of its spec.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import FeatureDef, FeatureSet
from .grid import GridSpec, TowerSpec, wrap_angle
from .model import (BearingSeries, ModelParams, TransitionRowCache,
                    bearing_table)


@dataclass
class SynthSpec:
    """Scenario recipe: geometry plus the generating-model distributions.

    Feature values are drawn uniformly from feature_range per neighborhood
    pair and weights uniformly from weight_range; the tower noise uses the
    given biases and concentrations.
    """

    grid: GridSpec
    towers: list[TowerSpec]
    n_features: int
    n_steps: int
    true_mu: np.ndarray
    true_kappa: np.ndarray
    seed: int
    weight_range: tuple[float, float] = (-10.0, 10.0)
    feature_range: tuple[float, float] = (0.0, 1.0)
    dropout: float = 0.0

    def __post_init__(self):
        self.true_mu = np.atleast_1d(np.asarray(self.true_mu, dtype=float))
        self.true_kappa = np.atleast_1d(np.asarray(self.true_kappa, dtype=float))
        if len(self.true_mu) != len(self.towers) or \
                len(self.true_kappa) != len(self.towers):
            raise ValueError("true_mu/true_kappa must have one entry per tower")
        if self.n_features < 1 or self.n_steps < 1:
            raise ValueError("need at least one feature and one step")
        for lo, hi in (self.weight_range, self.feature_range):
            if not lo <= hi:
                raise ValueError("ranges must be non-empty intervals")


def random_movement_model(spec: SynthSpec,
                          rng: np.random.Generator) -> tuple[FeatureSet, np.ndarray]:
    """Draw a movement model: tabulated features plus their true weights.

    Every neighborhood pair of every feature gets an independent uniform
    value from feature_range (values are used as-is, no normalization);
    weights come from weight_range. Returns (features, (1, K) weights).
    """
    n_edges = spec.grid.n_edges
    lo, hi = spec.feature_range
    defs = [FeatureDef(name=f"feat_{k}", kind="tabulated",
                       payload=rng.uniform(lo, hi, n_edges), normalize=False)
            for k in range(spec.n_features)]
    wlo, whi = spec.weight_range
    lam = rng.uniform(wlo, whi, spec.n_features).reshape(1, -1)
    return FeatureSet(spec.grid, defs), lam


def sample_path(fs: FeatureSet, lam: np.ndarray, n_steps: int,
                rng: np.random.Generator) -> np.ndarray:
    """Sample a latent path: uniform start, then neighborhood-restricted
    transitions drawn by inverse CDF in ascending cell-id order."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    grid = fs.grid
    params = ModelParams(np.atleast_2d(lam), np.zeros(0), np.zeros(0))
    cache = TransitionRowCache(params, fs)
    zone_seq = fs.zone_map.sequence(n_steps)
    path = np.empty(n_steps, dtype=np.int64)
    path[0] = rng.integers(grid.n_states)
    for t in range(n_steps - 1):
        x = int(path[t])
        nbh = grid.neighborhood(x)
        probs = np.exp(cache.row(x, int(zone_seq[t])))
        cum = np.cumsum(probs)
        u = rng.random() * cum[-1]
        idx = min(int(np.searchsorted(cum, u, side="right")), len(nbh) - 1)
        path[t + 1] = nbh[idx]
    return path


def sample_von_mises(mu: float, kappa: float, size: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Draws from a von Mises distribution, wrapped into [-pi, pi).

    Uses the generator's rejection sampler (the Best-Fisher wrapped-Cauchy
    method); kappa = 0 degrades to the uniform circle.
    """
    if kappa < 0:
        raise ValueError("kappa must be non-negative")
    return np.asarray(wrap_angle(rng.vonmises(mu, kappa, size=size)))


def sample_bearings(path, towers: list[TowerSpec], grid: GridSpec,
                    mu: np.ndarray, kappa: np.ndarray,
                    rng: np.random.Generator,
                    dropout: float = 0.0) -> BearingSeries:
    """Noisy bearings for a path: y = wrap(h(x, z) + mu + eps) with eps von
    Mises per tower. With dropout > 0 each entry is independently missing
    with that probability."""
    path = np.asarray(path, dtype=np.int64)
    H = bearing_table(grid, towers)
    T = len(path)
    out = np.empty((T, len(towers)))
    for n in range(len(towers)):
        eps = sample_von_mises(0.0, float(kappa[n]), T, rng)
        out[:, n] = wrap_angle(H[path, n] + mu[n] + eps)
        if dropout > 0.0:
            out[rng.random(T) < dropout, n] = np.nan
    return BearingSeries(out)


@dataclass
class Scenario:
    """A generated dataset together with its ground truth."""

    grid: GridSpec
    towers: list[TowerSpec]
    features: FeatureSet
    true_params: ModelParams
    true_path: np.ndarray
    obs: BearingSeries
    seed: int = 0


def make_scenario(spec: SynthSpec) -> Scenario:
    """Generate a full scenario from a spec: movement model, path, bearings."""
    rng = np.random.default_rng(spec.seed)
    fs, lam = random_movement_model(spec, rng)
    path = sample_path(fs, lam, spec.n_steps, rng)
    obs = sample_bearings(path, spec.towers, spec.grid, spec.true_mu,
                          spec.true_kappa, rng, dropout=spec.dropout)
    true_params = ModelParams(lam, spec.true_mu, spec.true_kappa)
    return Scenario(spec.grid, spec.towers, fs, true_params, path, obs,
                    seed=spec.seed)
