import math

import numpy as np
import pytest

from telemovr.estimation import (EMMonotonicityError, FitConfig, FitTrace,
                                 TraceRow, em_fit, invert_bessel_ratio,
                                 lambda_mstep, sg_fit, vonmises_mle,
                                 vonmises_mstep, weak_wolfe)
from telemovr.features import FeatureDef, FeatureSet
from telemovr.grid import GridSpec, TowerSpec
from telemovr.inference import forward_backward
from telemovr.model import (KAPPA_CAP, BearingSeries, ModelParams,
                            bearing_table, bessel_ratio, transition_table)
from telemovr.synth import SynthSpec, make_scenario, sample_von_mises


def tiny_scenario(seed=0, side=8, T=50, kappa=15.0):
    grid = GridSpec((0, 0), 100, side, side, 300)
    ext = side * 100.0
    towers = [TowerSpec(0, (-120.0, -90.0)), TowerSpec(1, (ext + 110.0, -60.0)),
              TowerSpec(2, (ext / 2 + 30.0, ext + 130.0))]
    spec = SynthSpec(grid=grid, towers=towers, n_features=3, n_steps=T,
                     true_mu=np.zeros(3), true_kappa=np.full(3, kappa),
                     seed=seed)
    return make_scenario(spec)


def desk_scenario(seed):
    grid = GridSpec((0, 0), 100, 20, 20, 500)
    towers = [TowerSpec(0, (510.0, 490.0)), TowerSpec(1, (1490.0, 510.0)),
              TowerSpec(2, (1010.0, 1490.0))]
    spec = SynthSpec(grid=grid, towers=towers, n_features=5, n_steps=200,
                     true_mu=np.zeros(3), true_kappa=np.full(3, 15.0),
                     seed=seed)
    return make_scenario(spec)


class TestKappaInversion:
    def test_zero(self):
        assert invert_bessel_ratio(0.0) == 0.0

    def test_clamp_near_one(self):
        assert invert_bessel_ratio(1.0 - 1e-14) == KAPPA_CAP

    def test_inverse_of_ratio(self):
        for r in (0.05, 0.2, 0.5, 0.8, 0.95, 0.999):
            k = invert_bessel_ratio(r)
            assert bessel_ratio(k) == pytest.approx(r, abs=1e-10)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            invert_bessel_ratio(1.5)


class TestVonMisesMLE:
    def test_identical_residuals_hit_cap(self):
        mu, kappa = vonmises_mle(np.full(40, 0.83), np.linspace(1, 2, 40))
        assert mu == pytest.approx(0.83)
        assert kappa == KAPPA_CAP

    def test_uniform_circle_cancels(self):
        angles = np.linspace(-math.pi, math.pi, 8, endpoint=False)
        mu, kappa = vonmises_mle(angles)
        assert kappa == pytest.approx(0.0, abs=1e-8)

    def test_monte_carlo_roundtrip(self):
        rng = np.random.default_rng(123)
        draws = sample_von_mises(0.7, 15.0, 100_000, rng)
        mu, kappa = vonmises_mle(draws)
        assert abs(mu - 0.7) < 0.02
        assert abs(kappa - 15.0) / 15.0 < 0.05

    def test_stationarity_of_estimate(self):
        # the weighted score equations vanish at the returned parameters
        rng = np.random.default_rng(3)
        r = rng.uniform(-math.pi, math.pi, 500)
        w = rng.uniform(0.1, 2.0, 500)
        mu, kappa = vonmises_mle(r, w)
        d_mu = kappa * np.sum(w * np.sin(r - mu))
        d_kappa = np.sum(w * np.cos(r - mu)) - w.sum() * bessel_ratio(kappa)
        assert abs(d_mu) < 1e-6
        assert abs(d_kappa) < 1e-6

    def test_zero_weight_rejected(self):
        with pytest.raises(ValueError):
            vonmises_mle(np.array([0.1]), np.array([0.0]))


class TestVonMisesMStep:
    def test_matches_weighted_mle(self):
        sc = tiny_scenario(seed=1, T=30)
        params = ModelParams(np.zeros((1, 3)), np.zeros(3), np.full(3, 20.0))
        H = bearing_table(sc.grid, sc.towers)
        tables = forward_backward(params, sc.features, sc.towers, sc.obs, H=H)
        mu, kappa = vonmises_mstep(params, sc.towers, sc.obs, H,
                                   tables.log_gamma)
        gamma = np.exp(tables.log_gamma)
        for n in range(3):
            resid = (sc.obs.bearings[:, n][:, None] - H[None, :, n]).ravel()
            w = gamma.ravel()
            mu_o, kappa_o = vonmises_mle(resid, w)
            assert mu[n] == pytest.approx(mu_o, abs=1e-9)
            assert kappa[n] == pytest.approx(kappa_o, rel=1e-9)

    def test_tower_without_data_unchanged(self):
        sc = tiny_scenario(seed=2, T=20)
        y = sc.obs.bearings.copy()
        y[:, 1] = np.nan
        obs = BearingSeries(y)
        params = ModelParams(np.zeros((1, 3)), np.array([0.0, 0.77, 0.0]),
                             np.array([5.0, 3.3, 5.0]))
        H = bearing_table(sc.grid, sc.towers)
        tables = forward_backward(params, sc.features, sc.towers, obs, H=H)
        mu, kappa = vonmises_mstep(params, sc.towers, obs, H, tables.log_gamma)
        assert mu[1] == 0.77
        assert kappa[1] == 3.3


class TestLambdaMStep:
    def grid_fs(self, seed=4, K=3):
        rng = np.random.default_rng(seed)
        grid = GridSpec((0, 0), 100, 6, 6, 200)
        defs = [FeatureDef(f"t{k}", "tabulated",
                           payload=rng.uniform(0, 1, grid.n_edges))
                for k in range(K - 1)]
        defs.append(FeatureDef("d", "distance_gaussian", normalize=True))
        return grid, FeatureSet(grid, defs), rng

    def test_recovers_generating_weights(self):
        grid, fs, rng = self.grid_fs()
        lam_star = np.array([[2.0, -3.0, 1.5]])
        p_star = ModelParams(lam_star, np.zeros(0), np.zeros(0))
        lt = transition_table(p_star, fs, 0)
        indptr, _ = grid.neighbor_structure()
        mass = rng.uniform(0.5, 1.5, grid.n_states)
        W = np.repeat(mass, np.diff(indptr)) * np.exp(lt)
        lam, ok = lambda_mstep({0: W}, fs, np.zeros((1, 3)))
        assert ok
        assert np.abs(lam - lam_star).max() < 1e-4

    def test_constant_feature_returns_init(self):
        grid = GridSpec((0, 0), 100, 5, 5, 200)
        fs = FeatureSet(grid, [FeatureDef(
            "c", "tabulated", payload=np.full(grid.n_edges, 0.6))])
        indptr, _ = grid.neighbor_structure()
        W = np.repeat(np.ones(grid.n_states), np.diff(indptr))
        W /= W.sum()
        init = np.array([[1.23]])
        lam, ok = lambda_mstep({0: W}, fs, init)
        assert lam == pytest.approx(init)

    def test_self_heavy_posterior_gives_positive_distance_weight(self):
        # a self-transition-heavy posterior must push the distance weight up
        grid, fs_full, rng = self.grid_fs(seed=5, K=2)
        fs = FeatureSet(grid, [FeatureDef("d", "distance_gaussian",
                                          normalize=True)])
        indptr, indices = grid.neighbor_structure()
        src = np.repeat(np.arange(grid.n_states), np.diff(indptr))
        W = np.where(src == indices, 5.0, 0.05)
        lam, ok = lambda_mstep({0: W}, fs, np.zeros((1, 1)))
        assert lam[0, 0] > 0
        # cross-check the sign against a coarse 1-d grid search
        def objective(l1):
            p = ModelParams(np.array([[l1]]), np.zeros(0), np.zeros(0))
            return float(W @ transition_table(p, fs, 0))
        grid_vals = [objective(v) for v in np.linspace(-5, 25, 41)]
        assert objective(float(lam[0, 0])) >= max(grid_vals) - 1e-6

    def test_objective_concave_along_segments(self):
        grid, fs, rng = self.grid_fs(seed=6)
        indptr, _ = grid.neighbor_structure()
        W = np.repeat(rng.uniform(0, 1, grid.n_states), np.diff(indptr))

        def objective(lam):
            p = ModelParams(lam.reshape(1, 3), np.zeros(0), np.zeros(0))
            return float(W @ transition_table(p, fs, 0))

        for _ in range(20):
            a = rng.uniform(-4, 4, 3)
            b = rng.uniform(-4, 4, 3)
            mid = 0.5 * (a + b)
            assert objective(mid) >= 0.5 * (objective(a) + objective(b)) - 1e-9

    def test_zoned_blocks_fit_jointly(self):
        grid, fs, rng = self.grid_fs(seed=7)
        lam_star = np.array([[1.0, -2.0, 0.5], [-1.5, 0.7, 2.0]])
        indptr, _ = grid.neighbor_structure()
        weights = {}
        for z in range(2):
            p = ModelParams(lam_star, np.zeros(0), np.zeros(0))
            lt = transition_table(p, fs, 0) if z == 0 else None
            scores = lam_star[z] @ fs.values_matrix()
            starts = indptr[:-1]
            counts = np.diff(indptr)
            m = np.maximum.reduceat(scores, starts)
            sums = np.add.reduceat(np.exp(scores - np.repeat(m, counts)), starts)
            lt = scores - np.repeat(m + np.log(sums), counts)
            weights[z] = np.repeat(rng.uniform(0.5, 1.5, grid.n_states),
                                   counts) * np.exp(lt)
        lam, ok = lambda_mstep(weights, fs, np.zeros((2, 3)))
        assert np.abs(lam - lam_star).max() < 1e-4


class TestWeakWolfe:
    def test_quadratic_accepts_valid_step(self):
        # maximize -0.5 a g^2 + s g: slope at 0 is s
        a, s = 4.0, 2.0
        phi = lambda g: s * g - 0.5 * a * g * g
        dphi = lambda g: s - a * g
        gamma, ok = weak_wolfe(phi, dphi, 0.0, s, 1e-4, 0.9)
        assert ok
        assert phi(gamma) >= 1e-4 * gamma * s
        assert dphi(gamma) <= 0.9 * s

    def test_non_finite_shrinks(self):
        calls = []
        def phi(g):
            calls.append(g)
            return -math.inf if g > 0.1 else g * 0.5
        dphi = lambda g: 0.5
        gamma, ok = weak_wolfe(phi, dphi, 0.0, 1.0, 1e-4, 0.9, gamma0=8.0)
        assert ok
        assert gamma <= 0.1

    def test_gives_up_after_bracket_budget(self):
        phi = lambda g: -abs(g)  # no sufficient increase anywhere
        dphi = lambda g: -1.0
        gamma, ok = weak_wolfe(phi, dphi, 0.0, 1.0, 1e-4, 0.9, max_bracket=10)
        assert not ok and gamma is None


class TestEMFit:
    def test_zero_iterations_returns_init(self):
        sc = tiny_scenario(seed=8, T=20)
        init = ModelParams(np.zeros((1, 3)), np.zeros(3), np.full(3, 10.0))
        cfg = FitConfig(algo="em", init_params=init, max_iters=0)
        params, trace = em_fit(cfg, sc.features, sc.towers, sc.obs)
        assert np.array_equal(params.lam, init.lam)
        assert np.array_equal(params.kappa, init.kappa)
        assert trace.iterations == 0

    def test_single_iteration_trace_rows(self):
        sc = tiny_scenario(seed=9, T=20)
        init = ModelParams(np.zeros((1, 3)), np.zeros(3), np.full(3, 10.0))
        cfg = FitConfig(algo="em", init_params=init, max_iters=1)
        _, trace = em_fit(cfg, sc.features, sc.towers, sc.obs)
        assert [r.iteration for r in trace.rows] == [0, 1]

    def test_loglik_non_decreasing(self):
        sc = tiny_scenario(seed=10, T=40)
        init = ModelParams(np.zeros((1, 3)), np.zeros(3), np.full(3, 30.0))
        cfg = FitConfig(algo="em", init_params=init, max_iters=8)
        _, trace = em_fit(cfg, sc.features, sc.towers, sc.obs)
        objs = trace.objectives()
        assert np.all(np.diff(objs) >= -1e-6)

    def test_recovers_weight_direction(self):
        sc = desk_scenario(seed=2)
        truth = sc.true_params.lam.ravel()
        init = ModelParams(np.zeros((1, 5)), np.zeros(3), np.full(3, 50.0))
        cfg = FitConfig(algo="em", init_params=init, max_iters=40)
        params, _ = em_fit(cfg, sc.features, sc.towers, sc.obs)
        got = params.lam.ravel()
        cos = got @ truth / (np.linalg.norm(got) * np.linalg.norm(truth))
        assert cos > 0.9

    def test_deterministic(self):
        sc = tiny_scenario(seed=12, T=25)
        init = ModelParams(np.zeros((1, 3)), np.zeros(3), np.full(3, 10.0))
        cfg = FitConfig(algo="em", init_params=init, max_iters=3)
        p1, t1 = em_fit(cfg, sc.features, sc.towers, sc.obs)
        p2, t2 = em_fit(cfg, sc.features, sc.towers, sc.obs)
        assert np.array_equal(p1.lam, p2.lam)
        assert [r.objective for r in t1.rows] == [r.objective for r in t2.rows]
        assert [r.elapsed_s for r in t1.rows] == [r.elapsed_s for r in t2.rows]


class TestSGFit:
    def test_zero_gradient_keeps_params(self):
        # constant features and kappa = 0 on fully missing data: the
        # gradient vanishes identically
        grid = GridSpec((0, 0), 100, 4, 4, 200)
        towers = [TowerSpec(0, (-60.0, -60.0))]
        fs = FeatureSet(grid, [FeatureDef(
            "c", "tabulated", payload=np.full(grid.n_edges, 0.5))])
        obs = BearingSeries(np.full((10, 1), np.nan))
        init = ModelParams(np.array([[2.2]]), np.zeros(1), np.zeros(1))
        cfg = FitConfig(algo="sg", init_params=init, max_iters=5, num_burn=20)
        params, trace = sg_fit(cfg, fs, towers, obs)
        assert np.array_equal(params.lam, init.lam)
        assert np.array_equal(params.kappa, init.kappa)

    def test_deterministic_trace(self):
        sc = tiny_scenario(seed=13, T=30)
        init = ModelParams(np.zeros((1, 3)), np.zeros(3), np.full(3, 10.0))
        cfg = FitConfig(algo="sg", init_params=init, max_iters=40,
                        num_burn=30, seed=5)
        p1, t1 = sg_fit(cfg, sc.features, sc.towers, sc.obs)
        p2, t2 = sg_fit(cfg, sc.features, sc.towers, sc.obs)
        assert np.array_equal(p1.lam, p2.lam)
        assert np.array_equal(p1.kappa, p2.kappa)
        for a, b in zip(t1.rows, t2.rows):
            assert a.objective == b.objective
            assert a.step_len == b.step_len
            assert a.grad_norm == b.grad_norm

    def test_domain_invariants_preserved(self):
        sc = tiny_scenario(seed=14, T=40)
        init = ModelParams(np.zeros((1, 3)), np.zeros(3), np.full(3, 1.0))
        cfg = FitConfig(algo="sg", init_params=init, max_iters=150,
                        num_burn=20, seed=2)
        _, trace = sg_fit(cfg, sc.features, sc.towers, sc.obs)
        for row in trace.rows:
            assert np.all(row.params.kappa >= 0)
            assert np.all(row.params.kappa <= KAPPA_CAP)
            assert np.all(row.params.mu >= -math.pi)
            assert np.all(row.params.mu < math.pi)

    def test_improves_weights(self):
        sc = desk_scenario(seed=11)
        truth = sc.true_params.lam
        init = ModelParams(np.zeros((1, 5)), np.zeros(3), np.full(3, 10.0))
        cfg = FitConfig(algo="sg", init_params=init, max_iters=2500,
                        num_burn=20, seed=0)
        params, _ = sg_fit(cfg, sc.features, sc.towers, sc.obs)
        assert np.linalg.norm(params.lam - truth) < 0.95 * np.linalg.norm(truth)


class TestFitConfig:
    def test_requires_some_budget(self):
        init = ModelParams(np.zeros((1, 1)), np.zeros(0), np.zeros(0))
        with pytest.raises(ValueError):
            FitConfig(algo="em", init_params=init)

    def test_sg_requires_burn(self):
        init = ModelParams(np.zeros((1, 1)), np.zeros(0), np.zeros(0))
        with pytest.raises(ValueError):
            FitConfig(algo="sg", init_params=init, max_iters=1)

    def test_unknown_algo(self):
        init = ModelParams(np.zeros((1, 1)), np.zeros(0), np.zeros(0))
        with pytest.raises(ValueError):
            FitConfig(algo="newton", init_params=init, max_iters=1)


class TestFitTrace:
    def test_rows_must_advance(self):
        p = ModelParams(np.zeros((1, 1)), np.zeros(0), np.zeros(0))
        tr = FitTrace()
        tr.append(TraceRow(0, 0.0, p, -1.0))
        with pytest.raises(ValueError):
            tr.append(TraceRow(0, 1.0, p, -1.0))

    def test_csv_format(self, tmp_path):
        p = ModelParams(np.zeros((1, 1)), np.zeros(0), np.zeros(0))
        tr = FitTrace()
        tr.append(TraceRow(0, 0.0, p, -10.5))
        tr.append(TraceRow(1, 0.0, p, -9.25, step_len=0.5, grad_norm=2.0))
        tr.to_csv(tmp_path / "t.csv")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "iter,elapsed_s,objective,step_len,grad_norm"
        assert lines[1] == "0,0.0,-10.5,,"
        assert lines[2] == "1,0.0,-9.25,0.5,2.0"
