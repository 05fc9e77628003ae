import numpy as np
import pytest

import dynemu as de
from dynemu.exceptions import ConfigError
from dynemu.mem import build_proxy, fit_proxy
from dynemu.warp import fit_warped_proxy, warp_apply, warp_invert


class TestWarpRoundTrip:
    def test_invert_after_apply_is_identity(self):
        params = (1.0, 1.0, 0.0)
        latent = np.linspace(-2, 2, 41)
        back = warp_invert(params, warp_apply(params, latent))
        np.testing.assert_allclose(back, latent, atol=1e-10)

    def test_general_parameters_round_trip(self):
        params = (3.2, 0.7, -0.4)
        latent = np.linspace(-1.5, 2.5, 31)
        back = warp_invert(params, warp_apply(params, latent))
        np.testing.assert_allclose(back, latent, atol=1e-10)

    def test_out_of_range_observation_rejected(self):
        with pytest.raises(ConfigError):
            warp_invert((1.0, 1.0, 0.0), np.array([0.5, 1.5]))

    def test_tiny_gain_rejected(self):
        with pytest.raises(ConfigError):
            warp_invert((1.0, 1e-12, 0.0), np.array([0.2]))


class TestJointFit:
    def _latent_fitter(self, times):
        def fitter(latent):
            psi, _ = fit_proxy(times, latent, input_kind="constant", initial_state=0.0)
            proxy = build_proxy(psi, "constant", initial_state=0.0)
            return psi, de.mean_function(proxy, times)

        return fitter

    def test_recovers_tanh_of_linear_trajectory(self):
        times = np.linspace(0, 4, 45)
        proxy = build_proxy([-1.2, 2.0], "constant", initial_state=0.0)
        latent = de.mean_function(proxy, times)
        true_params = (1.4, 0.9, 0.1)
        observed = warp_apply(true_params, latent)
        params, psi, info = fit_warped_proxy(times, observed, self._latent_fitter(times))
        assert not info["identity"]
        reproduced = warp_apply(params, de.mean_function(
            build_proxy(psi, "constant", initial_state=0.0), times))
        rmse = np.sqrt(np.mean((reproduced - observed) ** 2))
        assert rmse < 0.01 * np.ptp(observed)

    def test_constant_column_falls_back_to_identity(self):
        times = np.linspace(0, 1, 12)
        params, psi, info = fit_warped_proxy(
            times, np.zeros(12), self._latent_fitter(times)
        )
        assert params is None
        assert info["identity"]

    def test_matrix_fit_collects_per_run_specs(self):
        times = np.linspace(0, 3, 30)
        rows = []
        for gain in [0.8, 1.1]:
            proxy = build_proxy([-0.9, 1.5], "constant", initial_state=0.0)
            rows.append(warp_apply((1.3, gain, 0.0), de.mean_function(proxy, times)))
        rows.append(np.zeros(30))
        spec, psis, infos = de.warp_fit(
            np.array(rows), times, lambda run: self._latent_fitter(times)
        )
        assert spec.n_runs == 3
        assert not spec.identity_mask[0] and not spec.identity_mask[1]
        assert spec.identity_mask[2]
        assert psis.shape == (3, 2)


class TestWarpedEmulator:
    def test_warped_mem_reproduces_saturating_family(self):
        # latent linear family warped through tanh, mild parameter sweep
        times = np.linspace(0, 4, 25)
        thetas = np.linspace(0.8, 2.2, 12).reshape(-1, 1)
        rows = []
        for theta in thetas[:, 0]:
            proxy = build_proxy([-theta, 2.0 * theta], "constant", initial_state=0.0)
            rows.append(warp_apply((1.5, 1.0, 0.0), de.mean_function(proxy, times)))
        Y = np.array(rows)
        mem = de.MechanisticEmulator(
            proxy_input="constant", initial_state="zero", mapping="fit",
            warp="tanh", coupling=None, seed=0,
        ).fit(thetas, Y, times=times)
        assert mem.warp_spec_ is not None
        assert not np.any(mem.warp_spec_.identity_mask)
        query = np.array([[1.37]])
        proxy = build_proxy([-1.37, 2.0 * 1.37], "constant", initial_state=0.0)
        expected = warp_apply((1.5, 1.0, 0.0), de.mean_function(proxy, times))
        pred = mem.predict(query, times=times)[0]
        assert np.sqrt(np.mean((pred - expected) ** 2)) < 0.02 * np.ptp(expected)

    def test_latent_flag_returns_unwarped_mean(self):
        times = np.linspace(0, 3, 20)
        thetas = np.linspace(0.9, 1.8, 8).reshape(-1, 1)
        rows = []
        for theta in thetas[:, 0]:
            proxy = build_proxy([-theta, theta], "constant", initial_state=0.0)
            rows.append(warp_apply((1.2, 1.0, 0.0), de.mean_function(proxy, times)))
        mem = de.MechanisticEmulator(
            proxy_input="constant", initial_state="zero", mapping="fit",
            warp="tanh", coupling=None, seed=0,
        ).fit(thetas, np.array(rows), times=times)
        query = thetas[3:4]
        latent = mem.predict(query, times=times, latent=True)[0]
        observed = mem.predict(query, times=times)[0]
        assert np.max(np.abs(observed)) < np.max(np.abs(latent)) * 1.2 + 1e-9
        assert not np.allclose(latent, observed)

    def test_warped_emulator_persistence_round_trip(self, tmp_path):
        times = np.linspace(0, 3, 20)
        thetas = np.linspace(0.9, 1.8, 8).reshape(-1, 1)
        rows = []
        for theta in thetas[:, 0]:
            proxy = build_proxy([-theta, theta], "constant", initial_state=0.0)
            rows.append(warp_apply((1.2, 1.0, 0.0), de.mean_function(proxy, times)))
        mem = de.MechanisticEmulator(
            proxy_input="constant", initial_state="zero", mapping="fit",
            warp="tanh", coupling=None, seed=0,
        ).fit(thetas, np.array(rows), times=times)
        de.save_mem(mem, tmp_path)
        back = de.load_mem(tmp_path)
        query = np.array([[1.17], [1.62]])
        np.testing.assert_allclose(
            back.predict(query, times=times), mem.predict(query, times=times), atol=1e-9
        )

    def test_warp_requires_fit_mapping(self):
        with pytest.raises(ConfigError):
            de.MechanisticEmulator(
                proxy_input="constant", mapping="exact",
                exact_map={"name": "nonlinear_ds", "config": {}}, warp="tanh",
            ).fit(np.array([[0.1]]), np.array([[0.0, 0.1]]), times=np.array([0.0, 1.0]))
