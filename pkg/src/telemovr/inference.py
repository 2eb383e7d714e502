"""Exact and Monte Carlo inference over the latent path.

Forward-backward and Viterbi run in log space over the neighborhood-sparse
transition structure (cost per step proportional to the number of
neighborhood pairs, not |Q|^2). The Gibbs sampler resamples single sites at
uniformly random positions and memoizes transition rows for visited cells.
"""

from __future__ import annotations

import numpy as np

from .features import FeatureSet
from .grid import GridSpec, TowerSpec
from .model import (BearingSeries, ModelParams, TransitionRowCache,
                    bearing_table, edge_ids, obs_matrix, start_logprob,
                    transition_table)


def _segment_lse(vals: np.ndarray, indptr: np.ndarray) -> np.ndarray:
    """Log-sum-exp of vals over consecutive segments given by indptr."""
    starts = indptr[:-1]
    counts = np.diff(indptr)
    m = np.maximum.reduceat(vals, starts)
    sums = np.add.reduceat(np.exp(vals - np.repeat(m, counts)), starts)
    return m + np.log(sums)


class PosteriorTables:
    """Posterior quantities from one forward-backward pass.

    log_gamma holds the (T, |Q|) per-step state log-marginals and loglik
    the observed-data log likelihood. Pairwise step posteriors are exposed
    per step through :meth:`log_xi` (in CSR edge order, zero probability
    off-neighborhood) rather than stored for all steps at once, which keeps
    memory at Theta(TQ + E) instead of Theta(TE).
    """

    def __init__(self, grid: GridSpec, log_alpha, log_beta, log_obs,
                 ltrans_by_zone, zone_seq, loglik):
        self.grid = grid
        self.log_alpha = log_alpha
        self.log_beta = log_beta
        self.log_obs = log_obs
        self._ltrans = ltrans_by_zone
        self._zone_seq = zone_seq
        self.loglik = float(loglik)
        self.log_gamma = log_alpha + log_beta - self.loglik

    @property
    def n_steps(self) -> int:
        return self.log_gamma.shape[0]

    def log_xi(self, t: int) -> np.ndarray:
        """Pairwise posterior log p(x_t, x_{t+1} | y) over neighborhood
        pairs, aligned with the grid's CSR edge layout."""
        if not 0 <= t < self.n_steps - 1:
            raise ValueError(f"no transition at step {t}")
        indptr, indices = self.grid.neighbor_structure()
        src = np.repeat(np.arange(self.grid.n_states), np.diff(indptr))
        ltrans = self._ltrans[self._zone_seq[t]]
        w_next = self.log_obs[t + 1] + self.log_beta[t + 1]
        return self.log_alpha[t][src] + ltrans + w_next[indices] - self.loglik

    def expected_transition_weights(self) -> dict[int, np.ndarray]:
        """Per-zone posterior transition counts: for each zone, the sum of
        exp(log_xi(t)) over the steps assigned to it (CSR edge order)."""
        out = {int(z): np.zeros(self.grid.n_edges)
               for z in np.unique(self._zone_seq)}
        for t in range(self.n_steps - 1):
            out[int(self._zone_seq[t])] += np.exp(self.log_xi(t))
        return out

    def dump_marginals(self, path) -> None:
        """Write per-step log-marginals as CSV rows ``t,cell,log_gamma``."""
        with open(path, "w", encoding="utf-8") as f:
            f.write("t,cell,log_gamma\n")
            for t in range(self.n_steps):
                for c in range(self.grid.n_states):
                    f.write(f"{t},{c},{float(self.log_gamma[t, c])!r}\n")


def _prepare(params: ModelParams, fs: FeatureSet, towers: list[TowerSpec],
             obs: BearingSeries, H=None):
    grid = fs.grid
    log_obs = obs_matrix(params, towers, obs, grid, H=H)
    T = obs.n_steps
    zone_seq = fs.zone_map.sequence(T)[:T - 1] if T > 1 else np.zeros(0, dtype=int)
    ltrans = {int(z): transition_table(params, fs, int(z))
              for z in np.unique(zone_seq)}
    return grid, log_obs, zone_seq, ltrans


def forward_backward(params: ModelParams, fs: FeatureSet,
                     towers: list[TowerSpec], obs: BearingSeries,
                     H=None) -> PosteriorTables:
    """Exact log-space forward-backward pass.

    Returns per-step state log-marginals, access to pairwise step
    posteriors, and the observed-data log likelihood.
    """
    grid, log_obs, zone_seq, ltrans = _prepare(params, fs, towers, obs, H)
    T, Q = log_obs.shape
    indptr, indices = grid.neighbor_structure()
    perm, dst_indptr, src = grid.by_destination()

    log_alpha = np.empty((T, Q))
    log_alpha[0] = start_logprob(grid) + log_obs[0]
    for t in range(T - 1):
        vals = (log_alpha[t][src] + ltrans[zone_seq[t]])[perm]
        log_alpha[t + 1] = log_obs[t + 1] + _segment_lse(vals, dst_indptr)

    log_beta = np.empty((T, Q))
    log_beta[T - 1] = 0.0
    for t in range(T - 2, -1, -1):
        w = log_obs[t + 1] + log_beta[t + 1]
        vals = ltrans[zone_seq[t]] + w[indices]
        log_beta[t] = _segment_lse(vals, indptr)

    m = log_alpha[T - 1].max()
    loglik = m + np.log(np.exp(log_alpha[T - 1] - m).sum())
    return PosteriorTables(grid, log_alpha, log_beta, log_obs, ltrans,
                           zone_seq, loglik)


def viterbi(params: ModelParams, fs: FeatureSet, towers: list[TowerSpec],
            obs: BearingSeries, H=None) -> np.ndarray:
    """Most probable latent path given the observations.

    Ties are broken toward the smallest cell id, both at the final argmax
    and at every backtrack step, so the result is deterministic.
    """
    grid, log_obs, zone_seq, ltrans = _prepare(params, fs, towers, obs, H)
    T, Q = log_obs.shape
    perm, dst_indptr, src = grid.by_destination()
    src_d = src[perm]
    counts = np.diff(dst_indptr)
    starts = dst_indptr[:-1]
    n_edges = grid.n_edges
    edge_pos = np.arange(n_edges)

    delta = start_logprob(grid) + log_obs[0]
    backptr = np.empty((T - 1, Q), dtype=np.int64) if T > 1 else None
    for t in range(T - 1):
        vals = (delta[src] + ltrans[zone_seq[t]])[perm]
        best = np.maximum.reduceat(vals, starts)
        # first edge attaining the max inside each destination segment;
        # sources are ascending within a segment, so this is the smallest
        hit = np.where(vals == np.repeat(best, counts), edge_pos, n_edges)
        first = np.minimum.reduceat(hit, starts)
        backptr[t] = src_d[first]
        delta = log_obs[t + 1] + best

    path = np.empty(T, dtype=np.int64)
    path[T - 1] = int(np.argmax(delta))
    for t in range(T - 2, -1, -1):
        path[t] = backptr[t][path[t + 1]]
    return path


class GibbsChain:
    """Single-site Gibbs sampler over the latent path.

    The chain keeps its path between parameter updates, so a fitter can
    re-burn a persistent chain instead of restarting from scratch every
    iteration. Transition rows are memoized per (source, zone) and the
    memo is dropped whenever the parameters change.
    """

    def __init__(self, params: ModelParams, fs: FeatureSet,
                 towers: list[TowerSpec], obs: BearingSeries,
                 rng: np.random.Generator, path=None, H=None):
        self.fs = fs
        self.grid = fs.grid
        self.towers = towers
        self.obs = obs
        self.rng = rng
        self._H = bearing_table(self.grid, towers) if H is None else H
        self._trig_h = np.vstack([np.cos(self._H.T), np.sin(self._H.T)])
        T = obs.n_steps
        self._zone_seq = (fs.zone_map.sequence(T)[:T - 1] if T > 1
                          else np.zeros(0, dtype=int))
        self.set_params(params)
        self.path = (self._initial_path() if path is None
                     else np.array(path, dtype=np.int64))
        if len(self.path) != T:
            raise ValueError("initial path length does not match the series")

    def set_params(self, params: ModelParams) -> None:
        """Swap in new parameters; clears the memoized transition rows."""
        self.params = params
        self._cache = TransitionRowCache(params, self.fs)
        self._log_obs = obs_matrix(params, self.towers, self.obs, self.grid,
                                   trig_h=self._trig_h)

    def _initial_path(self) -> np.ndarray:
        """Per-step argmax of the observation likelihood, clamped feasible
        by a left-to-right pass (nearest neighborhood cell by center
        distance, smallest id on ties)."""
        free = np.argmax(self._log_obs, axis=1)
        path = np.empty(len(free), dtype=np.int64)
        path[0] = free[0]
        centers = self.grid.centers
        for t in range(1, len(free)):
            nbh = self.grid.neighborhood(int(path[t - 1]))
            pos = np.searchsorted(nbh, free[t])
            if pos < len(nbh) and nbh[pos] == free[t]:
                path[t] = free[t]
            else:
                d2 = ((centers[nbh] - centers[free[t]]) ** 2).sum(axis=1)
                path[t] = nbh[int(np.argmin(d2))]
        return path

    def _site_distribution(self, t: int):
        """Support cells and log-weights for resampling site t given its
        neighbors in the path and the observation at t."""
        T = len(self.path)
        left = int(self.path[t - 1]) if t > 0 else None
        right = int(self.path[t + 1]) if t < T - 1 else None
        if left is None and right is None:
            support = np.arange(self.grid.n_states)
            return support, self._log_obs[t].copy()
        if left is not None:
            support = self.grid.neighborhood(left)
            zone = int(self._zone_seq[t - 1])
            w = self._cache.row(left, zone).copy()
            if right is not None:
                # disc symmetry: c reaches right iff c is in right's disc
                nbh_r = self.grid.neighborhood(right)
                keep = np.searchsorted(nbh_r, support)
                ok = (keep < len(nbh_r)) & (nbh_r[np.minimum(keep, len(nbh_r) - 1)]
                                            == support)
                support = support[ok]
                w = w[ok]
        else:
            support = self.grid.neighborhood(right)
            w = np.zeros(len(support))
        if right is not None:
            zone = int(self._zone_seq[t])
            flat = self._cache.ensure(support, zone)
            w = w + flat[edge_ids(self.grid, support, np.full_like(support, right))]
        w += self._log_obs[t][support]
        return support, w

    def run(self, num_updates: int) -> np.ndarray:
        """Apply single-site updates at uniformly random positions."""
        T = len(self.path)
        for _ in range(int(num_updates)):
            t = int(self.rng.integers(T))
            support, w = self._site_distribution(t)
            w -= w.max()
            probs = np.exp(w)
            cum = np.cumsum(probs)
            u = self.rng.random() * cum[-1]
            idx = min(int(np.searchsorted(cum, u, side="right")), len(support) - 1)
            self.path[t] = support[idx]
        return self.path


def gibbs_sample_path(params: ModelParams, fs: FeatureSet,
                      towers: list[TowerSpec], obs: BearingSeries,
                      num_burn: int, rng: np.random.Generator,
                      H=None) -> np.ndarray:
    """Draw an approximate posterior path sample.

    Initializes from the observation-argmax path (projected to
    feasibility), applies ``num_burn`` single-site updates at uniformly
    random sites, and returns the current path. With ``num_burn=0`` the
    initialization is returned unchanged. Identical seeds give identical
    paths.
    """
    if num_burn < 0:
        raise ValueError("num_burn must be non-negative")
    chain = GibbsChain(params, fs, towers, obs, rng, H=H)
    chain.run(num_burn)
    return chain.path.copy()
