import numpy as np
import pytest
from scipy.integrate import quad, solve_ivp

import dynemu as de
from dynemu.exceptions import ConfigError
from dynemu.gp import MACHINE_EPS
from dynemu.lti import SdeKernel, scalar_covariance_grid
from dynemu.mem import ParameterMap, build_proxy, fit_proxy


def step_signal(edges, values):
    return de.PiecewiseConstantSignal(times=np.asarray(edges, float),
                                      values=np.asarray(values, float))


class TestMeanFunction:
    def test_homogeneous_solution(self):
        proxy = de.LtiProxy(system=-2.0, initial_state=1.5)
        t = np.linspace(0, 2, 9)
        np.testing.assert_allclose(de.mean_function(proxy, t), 1.5 * np.exp(-2 * t),
                                   atol=1e-14)

    def test_first_order_step_response(self):
        proxy = de.LtiProxy(system=-1.0,
                            actuation=de.PiecewiseConstantSignal.constant(1.0),
                            initial_state=0.0)
        t = np.linspace(0, 4, 13)
        np.testing.assert_allclose(de.mean_function(proxy, t), 1 - np.exp(-t), atol=1e-13)

    def test_zero_rate_integrator_limit(self):
        proxy = de.LtiProxy(system=0.0,
                            actuation=de.PiecewiseConstantSignal.constant(0.7),
                            initial_state=2.0)
        t = np.linspace(0, 3, 7)
        np.testing.assert_allclose(de.mean_function(proxy, t), 2.0 + 0.7 * t, atol=1e-14)

    @pytest.mark.parametrize("dim", [1, 3])
    def test_matches_adaptive_integration_with_block_actuation(self, dim):
        rng = np.random.default_rng(dim)
        for _ in range(4):
            if dim == 1:
                A = -np.exp(rng.uniform(-1, 1.5))
                s0 = rng.normal()
            else:
                M = rng.normal(size=(dim, dim))
                A = -(M @ M.T + 0.3 * np.eye(dim))
                s0 = rng.normal(size=dim)
            edges = np.array([0.0, 0.6, 1.4])
            values = rng.normal(size=(3, dim)) if dim > 1 else rng.normal(size=3)
            proxy = de.LtiProxy(system=A, actuation=step_signal(edges, values),
                                initial_state=s0)
            t_query = np.linspace(0.0, 2.2, 8)

            def u_of(t):
                k = min(np.searchsorted(edges, t, side="right") - 1, 2)
                return np.atleast_1d(values[k])

            state = np.atleast_1d(np.asarray(s0, dtype=float))
            knots = np.unique(np.concatenate([edges, t_query]))
            reference = {0.0: state.copy()}
            for lo, hi in zip(knots[:-1], knots[1:]):
                sol = solve_ivp(
                    lambda t, x: np.atleast_2d(A) @ x + u_of(t),
                    (lo, hi), state, rtol=1e-12, atol=1e-14,
                )
                state = sol.y[:, -1]
                reference[hi] = state.copy()
            expected = np.array([reference[t][0] for t in t_query])
            got = de.mean_function(proxy, t_query)
            scale = max(np.max(np.abs(expected)), 1e-30)
            assert np.max(np.abs(got - expected)) / scale < 1e-8

    def test_negative_times_rejected(self):
        proxy = de.LtiProxy(system=-1.0)
        with pytest.raises(ConfigError):
            de.mean_function(proxy, [-0.5, 1.0])


class TestSdeCovariance:
    def test_zero_time_gives_zero(self):
        proxy = de.LtiProxy(system=-1.2)
        assert de.sde_covariance(proxy, proxy, 0.0, 1.7) == 0.0
        assert de.sde_covariance(proxy, proxy, 0.8, 0.0) == 0.0

    def test_equal_rate_closed_form(self):
        # symbolic integral of the noise response for a = const, t = r
        for a, sigma in [(-1.0, 1.0), (-0.5, 2.0)]:
            proxy = de.LtiProxy(system=a, noise_scale=sigma)
            for t in [0.3, 1.0, 2.5]:
                expected = sigma**2 * (np.exp(2 * a * t) - 1) / (2 * a)
                assert de.sde_covariance(proxy, proxy, t, t) == pytest.approx(expected, rel=1e-12)

    def test_stationary_limit_solves_lyapunov_equation(self):
        # 2 a P + sigma^2 = 0  =>  P = sigma^2 / (-2 a)
        a, sigma = -0.8, 1.3
        proxy = de.LtiProxy(system=a, noise_scale=sigma)
        stationary = de.sde_covariance(proxy, proxy, 60.0, 60.0)
        assert stationary == pytest.approx(sigma**2 / (-2 * a), rel=1e-10)

    def test_cross_rate_matches_quadrature_oracle(self):
        pa = de.LtiProxy(system=-0.8)
        pb = de.LtiProxy(system=-1.7)
        for t, r in [(1.2, 0.9), (0.3, 2.0), (2.0, 2.0)]:
            expected, _ = quad(
                lambda mu: np.exp(-0.8 * (t - mu)) * np.exp(-1.7 * (r - mu)),
                0.0, min(t, r), epsabs=1e-14, epsrel=1e-13,
            )
            got = de.sde_covariance(pa, pb, t, r, coupling_value=0.6)
            assert got == pytest.approx(0.6 * expected, rel=1e-10)

    def test_near_cancelling_rates_use_series_branch(self):
        pa = de.LtiProxy(system=-1e-9)
        pb = de.LtiProxy(system=-2e-9)
        t = r = 2.0
        got = de.sde_covariance(pa, pb, t, r)
        # integral tends to min(t, r) as both rates vanish
        assert got == pytest.approx(2.0, rel=1e-6)

    def test_matrix_path_agrees_with_scalar_embedding(self):
        A1 = np.diag([-0.8, -2.0])
        A2 = np.diag([-1.7, -3.0])
        m1 = de.LtiProxy(system=A1, observation=np.array([1.0, 0.0]))
        m2 = de.LtiProxy(system=A2, observation=np.array([1.0, 0.0]))
        s1 = de.LtiProxy(system=-0.8)
        s2 = de.LtiProxy(system=-1.7)
        for t, r in [(1.2, 0.9), (0.5, 1.5)]:
            dense = de.sde_covariance(m1, m2, t, r, coupling_value=0.7)
            scalar = de.sde_covariance(s1, s2, t, r, coupling_value=0.7)
            assert dense == pytest.approx(scalar, rel=1e-9)

    def test_initial_condition_spread_propagates(self):
        proxy = de.LtiProxy(system=-1.0, initial_cov=0.25, noise_scale=0.0)
        t, r = 0.7, 1.1
        expected = 0.25 * np.exp(-1.0 * t) * np.exp(-1.0 * r)
        assert de.sde_covariance(proxy, proxy, t, r) == pytest.approx(expected, rel=1e-12)

    def test_single_proxy_gram_symmetric_psd(self):
        rng = np.random.default_rng(3)
        for trial in range(5):
            proxy = de.LtiProxy(system=-np.exp(rng.uniform(-1, 1)),
                                noise_scale=np.exp(rng.uniform(-0.5, 0.5)))
            times = np.sort(rng.uniform(0.01, 3.0, 40))
            gram = scalar_covariance_grid(proxy, proxy, times, times)
            assert np.max(np.abs(gram - gram.T)) == 0.0
            eig = np.min(np.linalg.eigvalsh(gram + MACHINE_EPS * np.eye(40)))
            assert eig >= -1e-10 * np.linalg.norm(gram)

    def test_sde_kernel_interface_matches_pairwise_values(self):
        rng = np.random.default_rng(4)
        proxies = [de.LtiProxy(system=-np.exp(rng.uniform(-0.5, 0.5))) for _ in range(3)]
        coupling = np.array([[1.0, 0.4, 0.2], [0.4, 1.0, 0.5], [0.2, 0.5, 1.0]])
        kernel = SdeKernel(proxies, coupling)
        X = np.array([[0, 0.5], [1, 0.8], [2, 1.7], [0, 2.0]])
        gram = kernel(X)
        assert np.max(np.abs(gram - gram.T)) < 1e-14
        eig = np.min(np.linalg.eigvalsh(gram + MACHINE_EPS * np.eye(4)))
        assert eig >= -1e-12

    def test_monte_carlo_agreement_reduced(self):
        # Euler–Maruyama ensemble as an independent oracle (reduced size;
        # the acceptance suite runs the full 1e5-path version)
        a, sigma, dt, n_paths = -1.0, 1.0, 1e-3, 20000
        rng = np.random.Generator(np.random.Philox(key=123))
        grid = np.array([0.5, 1.0, 1.5, 2.0, 2.5])
        steps = int(round(grid[-1] / dt))
        x = np.zeros(n_paths)
        snapshots = {}
        snap_steps = {int(round(t / dt)): t for t in grid}
        for step in range(1, steps + 1):
            x = x + a * x * dt + sigma * np.sqrt(dt) * rng.standard_normal(n_paths)
            if step in snap_steps:
                snapshots[snap_steps[step]] = x.copy()
        paths = np.column_stack([snapshots[t] for t in grid])
        empirical = np.cov(paths.T)
        proxy = de.LtiProxy(system=a, noise_scale=sigma)
        analytic = scalar_covariance_grid(proxy, proxy, grid, grid)
        stderr = np.sqrt(
            (np.outer(np.diag(analytic), np.diag(analytic)) + analytic**2) / (n_paths - 1)
        )
        assert np.all(np.abs(empirical - analytic) <= 3.0 * stderr)


class TestFitProxy:
    def test_generate_and_recover_constant_input(self):
        t = np.linspace(0, 3, 25)
        truth = build_proxy([-2.0, 3.0], "constant", initial_state=0.5)
        y = de.mean_function(truth, t)
        psi, info = fit_proxy(t, y, input_kind="constant", initial_state=0.5)
        np.testing.assert_allclose(psi, [-2.0, 3.0], rtol=1e-4)
        assert info["residual"] < 1e-8

    def test_generate_and_recover_forced(self):
        t = np.linspace(0, 10, 40)
        sig = step_signal([0.0, 2.0, 5.0], [0.0, 4.0, 0.0])
        truth = build_proxy([-0.7, 1.8], "series", series=sig)
        y = de.mean_function(truth, t)
        psi, info = fit_proxy(t, y, input_kind="series", series=sig)
        np.testing.assert_allclose(psi, [-0.7, 1.8], rtol=1e-4)

    def test_zero_data_returns_default_with_flag(self):
        t = np.linspace(0, 1, 10)
        psi, info = fit_proxy(t, np.zeros(10), input_kind="constant")
        assert info["zero_data"]
        assert info["residual"] == 0.0
        assert psi[0] < 0

    def test_didactic_column_recovers_generating_coefficients(self):
        cfg = de.NonlinearDsConfig()
        ds = de.generate_nonlinear_ds(cfg)
        for j in [10, 60, 150]:
            x0 = ds.params[j, 0]
            psi, _ = fit_proxy(ds.times, ds.outputs[:, j], input_kind="constant",
                               initial_state=x0)
            expected = [de.trajectory_decay_rate(x0), de.trajectory_offset(x0)]
            np.testing.assert_allclose(psi, expected, rtol=1e-3)


class TestParameterMap:
    def test_exact_didactic_map_at_one(self):
        mapping = de.nonlinear_ds_exact_map()
        psi = mapping(np.array([1.0]))
        np.testing.assert_allclose(psi, [-12.616, 2 * np.tanh(1.0)], atol=1e-12)

    def test_learned_map_interpolates_training_pairs(self):
        rng = np.random.default_rng(5)
        thetas = np.linspace(0, 1, 8).reshape(-1, 1)
        psis = np.column_stack([-np.exp(thetas[:, 0]), 2.0 * thetas[:, 0] + 0.3])
        pm = ParameterMap.from_pairs(thetas, psis, seed=0,
                                     column_transforms=["log_negative", None])
        got = pm(thetas)
        scale = np.max(np.abs(psis), axis=0)
        assert np.max(np.abs(got - psis) / scale) < 1e-6

    def test_learned_map_tracks_linear_relation_between_points(self):
        thetas = np.linspace(0, 1, 9).reshape(-1, 1)
        psis = np.column_stack([-1.0 - 0.8 * thetas[:, 0], 0.5 + 2.0 * thetas[:, 0]])
        pm = ParameterMap.from_pairs(thetas, psis, seed=1,
                                     column_transforms=["log_negative", None])
        mid = np.array([[0.5 * (thetas[3, 0] + thetas[4, 0])]])
        expected = np.array([-1.0 - 0.8 * mid[0, 0], 0.5 + 2.0 * mid[0, 0]])
        got = pm(mid)[0]
        assert np.all(np.abs(got - expected) / np.abs(expected) < 0.05)

    def test_duplicate_theta_with_conflicting_psi_rejected(self):
        thetas = np.array([[0.0], [0.0], [1.0]])
        psis = np.array([[-1.0, 0.1], [-2.0, 0.1], [-1.5, 0.2]])
        with pytest.raises(ConfigError):
            ParameterMap.from_pairs(thetas, psis)


class TestMechanisticEmulator:
    def _didactic_setup(self, sigma=0.0, n_train=10, seed=42):
        cfg = de.NonlinearDsConfig(smoothing_sigma=sigma)
        ds = de.generate_nonlinear_ds(cfg)
        keep = de.even_subsample_indices(40, 6)
        sub = de.split_dataset(de.subsample_times(ds, keep), n_train, seed=seed)
        return ds, sub

    def test_uncoupled_exact_mapping_reproduces_unseen_runs(self):
        ds, sub = self._didactic_setup()
        th_tr, Y_tr, t_tr = sub.train_arrays()
        mem = de.MechanisticEmulator(
            proxy_input="constant", initial_state="first_param",
            mapping="exact", exact_map={"name": "nonlinear_ds", "config": {}},
        ).fit(th_tr, Y_tr, times=t_tr)
        th_ts = ds.params[sub.test_idx][:40]
        truth = ds.outputs[:, sub.test_idx][:, :40].T
        pred = mem.predict(th_ts, times=ds.times)
        assert np.max(np.abs(pred - truth)) < 1e-6

    def test_query_at_training_point_returns_training_column(self):
        ds, sub = self._didactic_setup(sigma=0.5)
        th_tr, Y_tr, t_tr = sub.train_arrays()
        mem = de.MechanisticEmulator(
            proxy_input="constant", initial_state="first_param", mapping="fit",
            coupling=de.Matern(1.5, 1.0, 1.0), seed=0,
        ).fit(th_tr, Y_tr, times=t_tr)
        pred = mem.predict(th_tr, times=t_tr)
        assert np.max(np.abs(pred - Y_tr)) < 1e-6

    def test_zero_training_runs_predicts_prior_mean(self):
        t = np.linspace(0, 1, 6)
        mem = de.MechanisticEmulator(
            proxy_input="constant", initial_state="first_param",
            mapping="exact", exact_map={"name": "nonlinear_ds", "config": {}},
        ).fit(np.empty((0, 1)), np.empty((0, 6)), times=t)
        query = np.array([[0.4]])
        pred = mem.predict(query, times=t)
        expected = de.closed_form_trajectories([0.4], t)[:, 0]
        np.testing.assert_allclose(pred[0], expected, atol=1e-12)

    def test_coupled_beats_exact_prior_on_smoothed_data(self):
        ds, sub = self._didactic_setup(sigma=0.5)
        th_tr, Y_tr, t_tr = sub.train_arrays()
        common = dict(proxy_input="constant", initial_state="first_param", seed=0)
        exact = de.MechanisticEmulator(
            mapping="exact", exact_map={"name": "nonlinear_ds", "config": {}},
            coupling=de.Matern(1.5, 1.0, 1.0), optimize_coupling=True, **common,
        ).fit(th_tr, Y_tr, times=t_tr)
        fitted = de.MechanisticEmulator(
            mapping="fit", coupling=de.Matern(1.5, 1.0, 1.0), optimize_coupling=True,
            **common,
        ).fit(th_tr, Y_tr, times=t_tr)
        th_ts = ds.params[sub.test_idx]
        truth = ds.outputs[:, sub.test_idx].T
        rmse_exact = np.sqrt(np.mean((exact.predict(th_ts, times=ds.times) - truth) ** 2))
        rmse_fit = np.sqrt(np.mean((fitted.predict(th_ts, times=ds.times) - truth) ** 2))
        assert rmse_fit <= rmse_exact + 1e-12

    def test_variance_collapses_at_training_and_grows_away(self):
        ds, sub = self._didactic_setup(sigma=0.5)
        th_tr, Y_tr, t_tr = sub.train_arrays()
        mem = de.MechanisticEmulator(
            proxy_input="constant", initial_state="first_param", mapping="fit",
            coupling=de.Matern(1.5, 1.0, 1.0), seed=0,
        ).fit(th_tr, Y_tr, times=t_tr)
        _, var_train = mem.predict(th_tr[:3], times=t_tr, return_var=True)
        scale = de.sde_covariance(mem.proxies_[0], mem.proxies_[0], t_tr[-1], t_tr[-1])
        assert np.max(var_train[:, 1:]) < 1e-6 * scale
        _, var_new = mem.predict(np.array([[0.012345]]), times=t_tr, return_var=True)
        assert np.max(var_new) > np.max(var_train)

    def test_time_extrapolation_is_allowed(self):
        ds, sub = self._didactic_setup()
        th_tr, Y_tr, t_tr = sub.train_arrays()
        mem = de.MechanisticEmulator(
            proxy_input="constant", initial_state="first_param",
            mapping="exact", exact_map={"name": "nonlinear_ds", "config": {}},
        ).fit(th_tr, Y_tr, times=t_tr)
        pred = mem.predict(np.array([[0.3]]), times=np.array([0.5, 2.0, 5.0]))
        expected = de.closed_form_trajectories([0.3], [0.5, 2.0, 5.0])[:, 0]
        np.testing.assert_allclose(pred[0], expected, atol=1e-6)

    def test_persistence_round_trip(self, tmp_path):
        ds, sub = self._didactic_setup(sigma=0.5)
        th_tr, Y_tr, t_tr = sub.train_arrays()
        mem = de.MechanisticEmulator(
            proxy_input="constant", initial_state="first_param", mapping="fit",
            coupling=de.Matern(1.5, 1.0, 1.0), seed=0,
        ).fit(th_tr, Y_tr, times=t_tr)
        de.save_mem(mem, tmp_path)
        back = de.load_mem(tmp_path)
        query = ds.params[sub.test_idx][:5]
        np.testing.assert_allclose(
            back.predict(query, times=t_tr), mem.predict(query, times=t_tr), atol=1e-10
        )

    def test_callable_exact_map_not_serializable(self, tmp_path):
        ds, sub = self._didactic_setup()
        th_tr, Y_tr, t_tr = sub.train_arrays()
        mem = de.MechanisticEmulator(
            proxy_input="constant", initial_state="first_param",
            mapping="exact", exact_map=de.nonlinear_ds_exact_map(),
        ).fit(th_tr, Y_tr, times=t_tr)
        with pytest.raises(ConfigError):
            de.save_mem(mem, tmp_path)
