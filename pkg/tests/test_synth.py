import math

import numpy as np
import pytest
from scipy.stats import kstest

from telemovr.features import FeatureDef, FeatureSet
from telemovr.grid import GridSpec, TowerSpec
from telemovr.model import (ModelParams, bearing_table, bessel_ratio,
                            complete_loglik)
from telemovr.synth import (SynthSpec, make_scenario, random_movement_model,
                            sample_bearings, sample_path, sample_von_mises)


def base_spec(seed=0, K=5, T=60, kappa=15.0, side=8):
    grid = GridSpec((0, 0), 100, side, side, 300)
    ext = side * 100.0
    towers = [TowerSpec(0, (-130.0, -80.0)), TowerSpec(1, (ext + 90.0, -110.0)),
              TowerSpec(2, (ext / 2 + 40.0, ext + 70.0))]
    return SynthSpec(grid=grid, towers=towers, n_features=K, n_steps=T,
                     true_mu=np.zeros(3), true_kappa=np.full(3, kappa),
                     seed=seed)


class TestRandomMovementModel:
    def test_values_and_weights_in_ranges(self):
        spec = base_spec()
        fs, lam = random_movement_model(spec, np.random.default_rng(0))
        assert fs.n_features == 5
        vals = fs.values_matrix()
        assert np.all(vals >= 0.0) and np.all(vals < 1.0)
        assert lam.shape == (1, 5)
        assert np.all(lam >= -10.0) and np.all(lam <= 10.0)

    def test_degenerate_range_uniform_model(self):
        spec = base_spec()
        spec.feature_range = (0.0, 0.0)
        fs, lam = random_movement_model(spec, np.random.default_rng(1))
        from telemovr.model import transition_row
        params = ModelParams(lam, np.zeros(0), np.zeros(0))
        row = transition_row(params, fs, 10)
        n = len(spec.grid.neighborhood(10))
        assert np.allclose(row, -math.log(n), atol=1e-12)

    def test_same_seed_identical(self):
        spec = base_spec()
        fs1, lam1 = random_movement_model(spec, np.random.default_rng(7))
        fs2, lam2 = random_movement_model(spec, np.random.default_rng(7))
        assert np.array_equal(lam1, lam2)
        assert np.array_equal(fs1.values_matrix(), fs2.values_matrix())


class TestSamplePath:
    def test_single_step(self):
        spec = base_spec(T=1)
        fs, lam = random_movement_model(spec, np.random.default_rng(2))
        path = sample_path(fs, lam, 1, np.random.default_rng(3))
        assert len(path) == 1
        assert 0 <= path[0] < spec.grid.n_states

    def test_neighborhood_constraint(self):
        spec = base_spec(T=300)
        fs, lam = random_movement_model(spec, np.random.default_rng(4))
        path = sample_path(fs, lam, 300, np.random.default_rng(5))
        for t in range(299):
            assert path[t + 1] in spec.grid.neighborhood(path[t])

    def test_uniform_next_step_distribution(self):
        # with zero weights, many draws from one source must be uniform on
        # its neighborhood within Monte Carlo error
        grid = GridSpec((0, 0), 100, 5, 5, 150)
        fs = FeatureSet(grid, [FeatureDef(
            "t", "tabulated", payload=np.zeros(grid.n_edges))])
        lam = np.zeros((1, 1))
        rng = np.random.default_rng(6)
        src = 12
        nbh = grid.neighborhood(src)
        n = 20000
        counts = np.zeros(len(nbh))
        params = ModelParams(lam, np.zeros(0), np.zeros(0))
        from telemovr.model import TransitionRowCache
        cache = TransitionRowCache(params, fs)
        probs = np.exp(cache.row(src))
        cum = np.cumsum(probs)
        for _ in range(n):
            u = rng.random() * cum[-1]
            counts[min(int(np.searchsorted(cum, u, side="right")),
                       len(nbh) - 1)] += 1
        p = 1.0 / len(nbh)
        se = math.sqrt(p * (1 - p) / n)
        assert np.all(np.abs(counts / n - p) <= 3 * se)

    def test_strong_self_preference_freezes_path(self):
        grid = GridSpec((0, 0), 100, 5, 5, 150)
        indptr, indices = grid.neighbor_structure()
        src = np.repeat(np.arange(grid.n_states), np.diff(indptr))
        fs = FeatureSet(grid, [FeatureDef(
            "self", "tabulated", payload=(src == indices).astype(float))])
        lam = np.array([[30.0]])
        path = sample_path(fs, lam, 200, np.random.default_rng(8))
        assert np.all(path == path[0])


class TestSampleVonMises:
    def test_zero_kappa_uniform_ks(self):
        rng = np.random.default_rng(9)
        draws = sample_von_mises(0.0, 0.0, 100_000, rng)
        stat = kstest(draws, "uniform", args=(-math.pi, 2 * math.pi))
        assert stat.pvalue > 0.01

    def test_kappa15_moments(self):
        rng = np.random.default_rng(10)
        draws = sample_von_mises(0.0, 15.0, 100_000, rng)
        c, s = np.cos(draws).mean(), np.sin(draws).mean()
        mean = math.atan2(s, c)
        rbar = math.hypot(c, s)
        assert abs(mean) < 0.01
        assert abs(rbar - bessel_ratio(15.0)) < 0.01

    def test_range(self):
        rng = np.random.default_rng(11)
        draws = sample_von_mises(3.0, 2.0, 5000, rng)
        assert np.all(draws >= -math.pi) and np.all(draws < math.pi)

    def test_negative_kappa_rejected(self):
        with pytest.raises(ValueError):
            sample_von_mises(0.0, -1.0, 10, np.random.default_rng(0))


class TestSampleBearings:
    def test_huge_kappa_concentrates(self):
        # at kappa = 1e4 the circular sd is 1e-2, so nearly every bearing
        # lands within 3.5 sd of the true one
        spec = base_spec(T=400)
        grid, towers = spec.grid, spec.towers
        rng = np.random.default_rng(12)
        path = sample_path(
            FeatureSet(grid, [FeatureDef("z", "tabulated",
                                         payload=np.zeros(grid.n_edges))]),
            np.zeros((1, 1)), 400, rng)
        obs = sample_bearings(path, towers, grid, np.zeros(3),
                              np.full(3, 1e4), rng)
        H = bearing_table(grid, towers)
        err = np.angle(np.exp(1j * (obs.bearings - H[path])))
        assert err.std() == pytest.approx(1e-2, rel=0.1)
        assert (np.abs(err) < 3.5e-2).mean() > 0.999

    def test_bias_shifts_bearings(self):
        spec = base_spec(T=2000)
        grid, towers = spec.grid, spec.towers
        rng = np.random.default_rng(13)
        path = np.full(2000, 20)
        mu = np.array([0.5, -0.3, 0.0])
        obs = sample_bearings(path, towers, grid, mu, np.full(3, 50.0), rng)
        H = bearing_table(grid, towers)
        for n in range(3):
            resid = obs.bearings[:, n] - H[path, n]
            mean = math.atan2(np.sin(resid).mean(), np.cos(resid).mean())
            assert abs(mean - mu[n]) < 0.02

    def test_dropout(self):
        spec = base_spec(T=3000)
        rng = np.random.default_rng(14)
        path = np.full(3000, 10)
        obs = sample_bearings(path, spec.towers, spec.grid, np.zeros(3),
                              np.full(3, 15.0), rng, dropout=0.25)
        frac = 1 - obs.present.mean()
        assert abs(frac - 0.25) < 0.03

    def test_all_bearings_in_range(self):
        spec = base_spec(T=500)
        rng = np.random.default_rng(15)
        path = sample_path(
            FeatureSet(spec.grid, [FeatureDef(
                "z", "tabulated", payload=np.zeros(spec.grid.n_edges))]),
            np.zeros((1, 1)), 500, rng)
        obs = sample_bearings(path, spec.towers, spec.grid,
                              np.array([2.9, -2.9, 0.0]), np.full(3, 0.5), rng)
        b = obs.bearings[obs.present]
        assert np.all(b >= -math.pi) and np.all(b < math.pi)


class TestMakeScenario:
    def test_deterministic(self):
        spec = base_spec(seed=42)
        a = make_scenario(spec)
        b = make_scenario(spec)
        assert np.array_equal(a.true_path, b.true_path)
        assert np.array_equal(a.obs.bearings, b.obs.bearings,
                              equal_nan=True)
        assert np.array_equal(a.true_params.lam, b.true_params.lam)

    def test_zero_towers(self):
        grid = GridSpec((0, 0), 100, 4, 4, 200)
        spec = SynthSpec(grid=grid, towers=[], n_features=2, n_steps=10,
                         true_mu=np.zeros(0), true_kappa=np.zeros(0), seed=0)
        sc = make_scenario(spec)
        assert sc.obs.n_towers == 0
        assert sc.obs.n_steps == 10

    def test_path_respects_constraint(self):
        sc = make_scenario(base_spec(seed=3, T=150))
        for t in range(149):
            assert sc.true_path[t + 1] in sc.grid.neighborhood(sc.true_path[t])

    def test_true_path_beats_random_path_on_average(self):
        # the bearings carry information about the path
        wins = 0
        trials = 8
        for seed in range(trials):
            sc = make_scenario(base_spec(seed=seed, T=40))
            rng = np.random.default_rng(1000 + seed)
            rand = [int(rng.integers(sc.grid.n_states))]
            for _ in range(39):
                nbh = sc.grid.neighborhood(rand[-1])
                rand.append(int(nbh[rng.integers(len(nbh))]))
            ll_true = complete_loglik(sc.true_params, sc.features, sc.towers,
                                      sc.true_path, sc.obs)
            ll_rand = complete_loglik(sc.true_params, sc.features, sc.towers,
                                      np.array(rand), sc.obs)
            wins += ll_true > ll_rand
        assert wins == trials
