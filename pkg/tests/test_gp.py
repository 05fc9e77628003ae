import numpy as np
import pytest

import dynemu as de
from dynemu.exceptions import ConfigError
from dynemu.gp import MACHINE_EPS, log_marginal_likelihood, optimize_hyperparams
from dynemu.kernels import Matern, SquaredExponential


def well_separated_inputs(rng, n, dim):
    # jittered grid: guaranteed pairwise separation, no rejection loop
    per_axis = int(np.ceil(n ** (1.0 / dim)))
    axes = [np.linspace(0.0, 1.0, per_axis)] * dim
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)
    spacing = 1.0 / max(per_axis - 1, 1)
    points = grid[rng.permutation(grid.shape[0])[:n]]
    return points + rng.uniform(-0.3 * spacing, 0.3 * spacing, points.shape)


class TestKernels:
    def test_gram_symmetric_and_psd(self):
        rng = np.random.default_rng(0)
        kernels = [
            SquaredExponential(1.3, [0.4, 0.7]),
            Matern(0.5, 0.8, 0.3),
            Matern(1.5, 1.1, [0.5, 0.2]),
            Matern(2.5, 0.6, 0.9),
            SquaredExponential(1.0, 0.5) + Matern(1.5, 0.5, 0.5),
            SquaredExponential(1.0, 0.5) * Matern(1.5, 1.0, 0.8),
        ]
        for kernel in kernels:
            X = rng.uniform(-2, 2, (50, 2))
            K = kernel(X)
            assert np.max(np.abs(K - K.T)) < 1e-12
            min_eig = np.min(np.linalg.eigvalsh(K))
            assert min_eig >= -1e-8 * np.linalg.norm(K)

    def test_matern_half_equals_exponential(self):
        rng = np.random.default_rng(1)
        X = rng.uniform(-1, 1, (20, 1))
        kernel = Matern(0.5, variance=1.7, lengthscales=0.35)
        K = kernel(X)
        r = np.abs(X - X.T) / 0.35
        np.testing.assert_allclose(K, 1.7 * np.exp(-r), atol=1e-12)

    def test_diag_matches_gram_diagonal(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(9, 3))
        for kernel in [SquaredExponential(2.0, [1, 2, 3]), Matern(2.5, 0.7, 1.1)]:
            np.testing.assert_allclose(kernel.diag(X), np.diag(kernel(X)), atol=1e-12)

    def test_serialization_round_trip(self):
        from dynemu.kernels import kernel_from_dict, kernel_to_dict

        kernel = SquaredExponential(1.5, [0.3, 0.6]) + Matern(1.5, 0.9, 0.4) * de.Scaled(
            SquaredExponential(1.0, 2.0), 0.5
        )
        back = kernel_from_dict(kernel_to_dict(kernel))
        rng = np.random.default_rng(3)
        X = rng.normal(size=(6, 2))
        np.testing.assert_array_equal(kernel(X), back(X))


class TestConditioning:
    def test_single_point_interpolates(self):
        gp = de.GaussianProcess(kernel=SquaredExponential(1.0, 1.0), mean="zero",
                                standardize=False)
        gp.fit([[0.3]], [2.5])
        assert abs(gp.predict([[0.3]])[0] - 2.5) < 1e-10

    def test_zero_targets_give_zero_weights(self):
        rng = np.random.default_rng(4)
        X = rng.uniform(0, 1, (6, 2))
        gp = de.GaussianProcess(kernel=SquaredExponential(1.0, 0.5), mean="zero").fit(
            X, np.zeros(6)
        )
        np.testing.assert_array_equal(gp.alpha_, 0.0)
        np.testing.assert_array_equal(gp.predict(rng.uniform(0, 1, (4, 2))), 0.0)

    def test_weights_match_dense_solve_oracle(self):
        rng = np.random.default_rng(5)
        X = well_separated_inputs(rng, 5, 1)
        y = np.sin(4 * X[:, 0])
        kernel = SquaredExponential(1.0, 0.4)
        gp = de.GaussianProcess(kernel=kernel, mean="zero", standardize=False).fit(X, y)
        K = kernel(X)
        oracle = np.linalg.solve(K + gp.nugget_ * np.eye(5), y)
        np.testing.assert_allclose(gp.alpha_, oracle, atol=1e-8)
        np.testing.assert_allclose(gp.predict(X), y, atol=1e-8)

    def test_midpoint_prediction_matches_dense_oracle(self):
        rng = np.random.default_rng(6)
        X = well_separated_inputs(rng, 6, 1)
        y = np.cos(3 * X[:, 0])
        kernel = Matern(2.5, 1.0, 0.5)
        gp = de.GaussianProcess(kernel=kernel, mean="zero", standardize=False).fit(X, y)
        query = np.array([[0.5 * (X[0, 0] + X[1, 0])]])
        K = kernel(X)
        alpha = np.linalg.solve(K + gp.nugget_ * np.eye(6), y)
        expected = kernel(query, X) @ alpha
        assert abs(gp.predict(query)[0] - expected[0]) < 1e-10

    def test_residual_contract(self):
        rng = np.random.default_rng(7)
        X = well_separated_inputs(rng, 12, 2)
        y = np.sin(3 * X[:, 0]) * np.cos(2 * X[:, 1])
        kernel = SquaredExponential(1.0, [0.5, 0.5])
        gp = de.GaussianProcess(kernel=kernel, mean="zero", standardize=False).fit(X, y)
        K = kernel(X) + gp.nugget_ * np.eye(12)
        residual = y - K @ gp.alpha_
        assert np.linalg.norm(residual) < 1e-8 * np.linalg.norm(y)

    def test_interpolation_across_random_problems(self):
        rng = np.random.default_rng(8)
        for trial in range(10):
            dim = int(rng.integers(1, 3))
            n = int(rng.integers(5, 12))
            X = well_separated_inputs(rng, n, dim)
            y = np.sum(np.sin(2.0 + 3.0 * X), axis=1) + 0.3 * rng.normal(size=n)
            gp = de.GaussianProcess(
                kernel=SquaredExponential(1.0, np.full(dim, 0.4)), mean="constant"
            ).fit(X, y)
            err = np.max(np.abs(gp.predict(X) - y))
            assert err < 1e-6 * max(np.ptp(y), 1e-12)

    def test_near_duplicate_inputs_warn(self):
        X = np.array([[0.0], [1e-12]])
        with pytest.warns(UserWarning, match="closer than"):
            de.GaussianProcess(kernel=SquaredExponential(1.0, 1.0)).fit(X, [0.0, 1.0])


class TestVariance:
    def test_far_query_reverts_to_prior(self):
        rng = np.random.default_rng(9)
        X = rng.uniform(0, 1, (8, 1))
        y = np.sin(X[:, 0])
        kernel = SquaredExponential(2.0, 0.2)
        gp = de.GaussianProcess(kernel=kernel, mean="zero", standardize=False).fit(X, y)
        _, var = gp.predict([[50.0]], return_var=True)
        assert var[0] == pytest.approx(2.0, rel=0.01)

    def test_variance_vanishes_at_training_points(self):
        rng = np.random.default_rng(10)
        X = well_separated_inputs(rng, 7, 1)
        y = np.sin(2 * X[:, 0])
        gp = de.GaussianProcess(
            kernel=SquaredExponential(1.0, 0.3), mean="zero", standardize=False
        ).fit(X, y)
        _, var = gp.predict(X, return_var=True)
        assert np.all(var <= 1e-8 * 1.0)

    def test_three_point_variance_matches_direct_formula(self):
        X = np.array([[0.0], [0.4], [1.0]])
        y = np.array([0.0, 0.5, -0.2])
        kernel = Matern(1.5, 1.2, 0.6)
        gp = de.GaussianProcess(kernel=kernel, mean="zero", standardize=False).fit(X, y)
        query = np.array([[0.7]])
        K = kernel(X) + gp.nugget_ * np.eye(3)
        k_star = kernel(query, X)[0]
        expected = kernel.diag(query)[0] - k_star @ np.linalg.solve(K, k_star)
        _, var = gp.predict(query, return_var=True)
        assert var[0] == pytest.approx(expected, abs=1e-10)


class TestLogMarginalLikelihood:
    def test_single_point_analytic(self):
        value = log_marginal_likelihood(
            SquaredExponential(1.0, 1.0), [[0.0]], [0.0], mean="zero", nugget=0.0
        )
        assert value == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-12)

    def test_scaling_identity(self):
        rng = np.random.default_rng(11)
        X = well_separated_inputs(rng, 5, 1)
        y = rng.normal(size=5)
        kernel = SquaredExponential(1.0, 0.5)
        K = kernel(X) + MACHINE_EPS * np.eye(5)
        quad = y @ np.linalg.solve(K, y)
        base = log_marginal_likelihood(kernel, X, y, mean="zero")
        for c in [2.0, -3.0]:
            scaled = log_marginal_likelihood(kernel, X, c * y, mean="zero")
            assert scaled - base == pytest.approx(-0.5 * (c**2 - 1) * quad, rel=1e-9)

    def test_matches_dense_determinant_oracle(self):
        rng = np.random.default_rng(12)
        X = well_separated_inputs(rng, 4, 2)
        y = rng.normal(size=4)
        kernel = Matern(2.5, 1.4, [0.8, 0.5])
        nugget = 1e-6
        got = log_marginal_likelihood(kernel, X, y, mean="zero", nugget=nugget)
        K = kernel(X) + nugget * np.eye(4)
        sign, logdet = np.linalg.slogdet(K)
        expected = -0.5 * y @ np.linalg.solve(K, y) - 0.5 * logdet - 2 * np.log(2 * np.pi)
        assert sign > 0
        assert got == pytest.approx(expected, abs=1e-8)


class TestHyperparameterSearch:
    def test_recovers_generating_lengthscale_within_factor_two(self):
        rng = np.random.default_rng(13)
        X = np.linspace(0, 4, 35).reshape(-1, 1)
        true = SquaredExponential(1.0, 0.5)
        K = true(X) + 1e-10 * np.eye(35)
        y = np.linalg.cholesky(K) @ rng.normal(size=35)
        kernel, lml = optimize_hyperparams(
            SquaredExponential(1.0, 1.0), X, y, n_restarts=4, seed=0
        )
        assert 0.25 < kernel.lengthscales[0] < 1.0

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(14)
        X = well_separated_inputs(rng, 10, 1)
        y = np.sin(5 * X[:, 0])
        a, lml_a = optimize_hyperparams(SquaredExponential(1.0, 0.3), X, y, n_restarts=1, seed=3)
        b, lml_b = optimize_hyperparams(SquaredExponential(1.0, 0.3), X, y, n_restarts=1, seed=3)
        np.testing.assert_array_equal(a.theta, b.theta)
        assert lml_a == lml_b

    def test_returned_lml_at_least_every_start(self):
        rng = np.random.default_rng(15)
        X = well_separated_inputs(rng, 8, 1)
        y = np.cos(4 * X[:, 0])
        kernel = SquaredExponential(1.0, 0.3)
        best, best_lml = optimize_hyperparams(kernel, X, y, n_restarts=5, seed=2)
        bounds = kernel.theta_bounds()
        lows = np.array([b[0] for b in bounds])
        highs = np.array([b[1] for b in bounds])
        starts = [np.clip(kernel.theta, lows, highs)]
        gen = np.random.default_rng(2)
        for _ in range(4):
            starts.append(gen.uniform(lows, highs))
        for start in starts:
            try:
                start_lml = log_marginal_likelihood(kernel.clone_with_theta(start), X, y)
            except de.FactorizationFailure:
                continue
            assert best_lml >= start_lml - 1e-12

    def test_all_starts_failing_raises(self):
        from dynemu.exceptions import NumericalError
        from dynemu.kernels import Kernel

        class Indefinite(Kernel):
            # not a valid covariance: eigenvalues 3 and -1 at any theta
            def __call__(self, X, X2=None):
                return np.array([[1.0, 2.0], [2.0, 1.0]])

            @property
            def theta(self):
                return np.array([0.0])

            @theta.setter
            def theta(self, value):
                pass

            def theta_bounds(self):
                return [(-1.0, 1.0)]

        with pytest.raises(NumericalError):
            optimize_hyperparams(Indefinite(), [[0.0], [1.0]], [0.0, 1.0],
                                 n_restarts=2, seed=0)

    def test_single_point_degenerate_completes_within_bounds(self):
        kernel, lml = optimize_hyperparams(
            SquaredExponential(1.0, 1.0), [[0.0]], [0.7], n_restarts=2, seed=0
        )
        assert np.isfinite(lml)
        for value, (lo, hi) in zip(kernel.theta, kernel.theta_bounds()):
            assert np.isfinite(value)

    def test_invalid_bounds_rejected(self):
        with pytest.raises(ConfigError):
            optimize_hyperparams(
                SquaredExponential(1.0, 1.0), [[0.0], [1.0]], [0.0, 1.0],
                bounds=[(0.0, np.inf), (0.0, 1.0)],
            )


class TestPersistence:
    def test_round_trip_preserves_predictions(self, tmp_path):
        rng = np.random.default_rng(16)
        X = rng.uniform(0, 1, (9, 2))
        y = np.sin(3 * X[:, 0]) + X[:, 1]
        gp = de.GaussianProcess(kernel=SquaredExponential(1.0, [0.5, 0.5]),
                                mean="constant", optimize=True, seed=0).fit(X, y)
        from dynemu.gp import load_gp, save_gp

        save_gp(gp, tmp_path)
        back = load_gp(tmp_path)
        query = rng.uniform(0, 1, (5, 2))
        np.testing.assert_allclose(back.predict(query), gp.predict(query), atol=1e-12)
