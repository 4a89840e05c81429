"""Tests for the residual costs and their analytic derivatives."""

import numpy as np
import pytest

from mlplrt import cost, linalg, mlp
from mlplrt.cost import Dataset, SingularCovariance
from mlplrt.mlp import MLPArchitecture, ParameterMask, WeightVector

from test_mlp import group_image, random_weights


def make_dataset(arch, seed, n=200, noise=0.5):
    """Targets from a random network of the same shape plus Gaussian noise."""
    rng = np.random.default_rng(seed)
    truth = WeightVector(arch, rng.uniform(-1.0, 1.0, arch.n_params))
    z = rng.standard_normal((n, arch.input_dim))
    y = mlp.forward(truth, z) + noise * rng.standard_normal((n, arch.output_dim))
    return Dataset(z, y)


def zero_net(arch):
    return WeightVector(arch, np.zeros(arch.n_params))


def fd_gradient(w, data, step=1e-6):
    out = np.zeros(w.arch.n_params)
    for k in range(out.size):
        up, down = w.values.copy(), w.values.copy()
        up[k] += step
        down[k] -= step
        out[k] = (
            cost.u_n(WeightVector(w.arch, up), data)
            - cost.u_n(WeightVector(w.arch, down), data)
        ) / (2 * step)
    return out


class TestDataset:
    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 1)), np.zeros((2, 2)))

    def test_csv_roundtrip(self):
        arch = MLPArchitecture(2, 1, 2)
        data = make_dataset(arch, 1, n=20)
        restored = Dataset.from_csv(data.to_csv())
        assert np.array_equal(restored.inputs, data.inputs)
        assert np.array_equal(restored.targets, data.targets)

    def test_bad_header_rejected(self):
        with pytest.raises(ValueError):
            Dataset.from_csv("a,b\n1,2\n")


class TestResiduals:
    def test_zero_net_zero_targets(self):
        arch = MLPArchitecture(1, 1, 1)
        data = Dataset(np.ones((5, 1)), np.zeros((5, 1)))
        assert np.array_equal(cost.residuals(zero_net(arch), data), np.zeros((5, 1)))

    def test_self_consistency(self):
        arch = MLPArchitecture(2, 2, 2)
        w = random_weights(arch, 2)
        z = np.random.default_rng(0).standard_normal((10, 2))
        data = Dataset(z, mlp.forward(w, z))
        assert np.max(np.abs(cost.residuals(w, data))) == 0.0

    def test_per_sample_loop(self):
        arch = MLPArchitecture(2, 2, 2)
        w = random_weights(arch, 3)
        data = make_dataset(arch, 3, n=25)
        res = cost.residuals(w, data)
        for t in range(data.n):
            expected = data.targets[t] - mlp.forward(w, data.inputs[t])
            np.testing.assert_allclose(res[t], expected, atol=1e-14)

    def test_dimension_mismatch(self):
        arch = MLPArchitecture(3, 1, 1)
        data = make_dataset(MLPArchitecture(2, 1, 1), 0, n=10)
        with pytest.raises(linalg.DimensionMismatch):
            cost.residuals(random_weights(arch, 0), data)


class TestGammaN:
    def test_scalar_case(self):
        arch = MLPArchitecture(1, 1, 1)
        data = Dataset(np.zeros((3, 1)), np.array([[1.0], [-1.0], [2.0]]))
        cov = cost.gamma_n(zero_net(arch), data)
        np.testing.assert_allclose(cov.gamma, [[2.0]])

    def test_zero_residuals_singular(self):
        arch = MLPArchitecture(1, 1, 1)
        data = Dataset(np.ones((4, 1)), np.zeros((4, 1)))
        with pytest.raises(SingularCovariance):
            cost.gamma_n(zero_net(arch), data)

    def test_naive_accumulation(self):
        arch = MLPArchitecture(2, 2, 2)
        w = random_weights(arch, 4)
        data = make_dataset(arch, 4, n=60)
        res = cost.residuals(w, data)
        expected = sum(np.outer(r, r) for r in res) / data.n
        cov = cost.gamma_n(w, data)
        np.testing.assert_allclose(cov.gamma, expected, atol=1e-12)
        np.testing.assert_allclose(cov.gamma @ cov.inverse, np.eye(2), atol=1e-8)


class TestUN:
    def test_scalar_value(self):
        arch = MLPArchitecture(1, 1, 1)
        data = Dataset(np.zeros((3, 1)), np.array([[1.0], [-1.0], [2.0]]))
        assert cost.u_n(zero_net(arch), data) == pytest.approx(np.log(2.0), abs=1e-12)

    def test_two_basis_rows(self):
        arch = MLPArchitecture(1, 1, 2)
        targets = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
        data = Dataset(np.zeros((4, 1)), targets)
        # gamma = diag(1/2, 1/2)
        assert cost.u_n(zero_net(arch), data) == pytest.approx(-2 * np.log(2.0), abs=1e-12)

    def test_identity_covariance_gives_zero(self):
        arch = MLPArchitecture(1, 1, 2)
        r = np.sqrt(2.0)
        targets = np.array([[r, 0.0], [0.0, r], [r, 0.0], [0.0, r]])
        data = Dataset(np.zeros((4, 1)), targets)
        assert cost.u_n(zero_net(arch), data) == pytest.approx(0.0, abs=1e-12)


class TestVN:
    def test_zero(self):
        arch = MLPArchitecture(2, 1, 2)
        w = random_weights(arch, 5)
        z = np.random.default_rng(1).standard_normal((8, 2))
        data = Dataset(z, mlp.forward(w, z))
        assert cost.v_n(w, data) == 0.0

    def test_basis_rows(self):
        arch = MLPArchitecture(1, 1, 2)
        data = Dataset(np.zeros((3, 1)), np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]))
        assert cost.v_n(zero_net(arch), data) == pytest.approx(2.0)

    def test_loop_oracle(self):
        arch = MLPArchitecture(2, 2, 2)
        w = random_weights(arch, 6)
        data = make_dataset(arch, 6, n=40)
        res = cost.residuals(w, data)
        expected = sum(float(r @ r) for r in res)
        assert cost.v_n(w, data) == pytest.approx(expected, rel=1e-12)


class TestGLS:
    def test_identity_reduces_to_mean_square(self):
        arch = MLPArchitecture(2, 2, 2)
        w = random_weights(arch, 7)
        data = make_dataset(arch, 7, n=30)
        lhs = cost.gls_cost(w, data, np.eye(2))
        assert lhs == pytest.approx(cost.v_n(w, data) / data.n, rel=1e-12)

    def test_scalar_value(self):
        arch = MLPArchitecture(1, 1, 1)
        data = Dataset(np.zeros((3, 1)), np.array([[2.0], [2.0], [2.0]]))
        assert cost.gls_cost(zero_net(arch), data, np.array([[4.0]])) == pytest.approx(1.0)

    def test_loop_oracle_with_explicit_inverse(self):
        arch = MLPArchitecture(2, 2, 2)
        w = random_weights(arch, 8)
        data = make_dataset(arch, 8, n=30)
        gamma = np.array([[2.0, 0.3], [0.3, 1.0]])
        inv = np.linalg.inv(gamma)
        res = cost.residuals(w, data)
        expected = sum(float(r @ inv @ r) for r in res) / data.n
        assert cost.gls_cost(w, data, gamma) == pytest.approx(expected, rel=1e-10)

    def test_singular_gamma(self):
        arch = MLPArchitecture(1, 1, 2)
        data = make_dataset(arch, 9, n=20)
        with pytest.raises(SingularCovariance):
            cost.gls_cost(random_weights(arch, 9), data, np.ones((2, 2)))

    def test_gradient_matches_logdet_gradient_at_own_covariance(self):
        # freezing gamma at the residual covariance of w makes the two
        # gradients coincide, which is why refitting gamma from the data
        # collapses the weighted least squares cost into the log-det cost
        arch = MLPArchitecture(2, 2, 2)
        w = random_weights(arch, 10)
        data = make_dataset(arch, 10, n=50)
        gamma = cost.gamma_n(w, data).gamma
        step = 1e-6
        g_gls = np.zeros(arch.n_params)
        for k in range(arch.n_params):
            up, down = w.values.copy(), w.values.copy()
            up[k] += step
            down[k] -= step
            g_gls[k] = (
                cost.gls_cost(WeightVector(arch, up), data, gamma)
                - cost.gls_cost(WeightVector(arch, down), data, gamma)
            ) / (2 * step)
        g_logdet = cost.grad_u_n(w, data)
        cosine = g_gls @ g_logdet / (np.linalg.norm(g_gls) * np.linalg.norm(g_logdet))
        assert np.arccos(np.clip(cosine, -1.0, 1.0)) < 1e-3


class TestBuildingBlocks:
    def setup_method(self):
        self.arch = MLPArchitecture(2, 2, 2)
        self.w = random_weights(self.arch, 11)
        self.data = make_dataset(self.arch, 11, n=30)

    def test_a_n_zero_residuals(self):
        z = np.random.default_rng(4).standard_normal((10, 2))
        exact = Dataset(z, mlp.forward(self.w, z))
        for k in range(self.arch.n_params):
            assert np.array_equal(cost.a_n(self.w, exact, k), np.zeros((2, 2)))

    def test_a_n_scalar(self):
        arch = MLPArchitecture(1, 1, 1)
        w = WeightVector(arch, np.array([0.5, 0.1, 0.7, 0.2]))
        data = Dataset(np.array([[0.3]] * 3), np.array([[1.0]] * 3))
        k = arch.output_bias_slice.start
        g = 1.0  # output-bias partial
        r = float(cost.residuals(w, data)[0, 0])
        np.testing.assert_allclose(cost.a_n(w, data, k), [[-g * r]], rtol=1e-12)

    def test_a_n_loop_oracle(self):
        res = cost.residuals(self.w, self.data)
        jac = mlp.weight_jacobian(self.w, self.data.inputs)
        for k in (0, 3, 7, self.arch.n_params - 1):
            expected = sum(
                -np.outer(jac[t, :, k], res[t]) for t in range(self.data.n)
            ) / self.data.n
            np.testing.assert_allclose(cost.a_n(self.w, self.data, k), expected, atol=1e-12)

    def test_b_n_diagonal_is_psd(self):
        for k in (0, 5, 9):
            b = cost.b_n(self.w, self.data, k, k)
            assert np.min(np.linalg.eigvalsh(linalg.symmetrize(b))) >= -1e-12

    def test_b_n_output_bias_pair(self):
        start = self.arch.output_bias_slice.start
        for i in range(2):
            for j in range(2):
                expected = np.zeros((2, 2))
                expected[i, j] = 1.0
                np.testing.assert_allclose(
                    cost.b_n(self.w, self.data, start + i, start + j), expected, atol=1e-14
                )

    def test_b_n_transpose_symmetry(self):
        b_kl = cost.b_n(self.w, self.data, 1, 6)
        b_lk = cost.b_n(self.w, self.data, 6, 1)
        np.testing.assert_allclose(b_kl, b_lk.T, atol=1e-14)

    def test_b_n_loop_oracle(self):
        jac = mlp.weight_jacobian(self.w, self.data.inputs)
        expected = sum(
            np.outer(jac[t, :, 2], jac[t, :, 8]) for t in range(self.data.n)
        ) / self.data.n
        np.testing.assert_allclose(cost.b_n(self.w, self.data, 2, 8), expected, atol=1e-12)

    def test_c_n_zero_residuals(self):
        z = np.random.default_rng(5).standard_normal((10, 2))
        exact = Dataset(z, mlp.forward(self.w, z))
        assert np.array_equal(cost.c_n(self.w, exact, 0, 1), np.zeros((2, 2)))

    def test_c_n_output_bias_pair_vanishes(self):
        start = self.arch.output_bias_slice.start
        assert np.array_equal(
            cost.c_n(self.w, self.data, start, start + 1), np.zeros((2, 2))
        )

    def test_c_n_loop_oracle(self):
        res = cost.residuals(self.w, self.data)
        expected = np.zeros((2, 2))
        for t in range(self.data.n):
            d2 = mlp.weight_second_derivative(self.w, self.data.inputs[t], 1, 4)
            expected -= np.outer(res[t], d2)
        expected /= self.data.n
        np.testing.assert_allclose(cost.c_n(self.w, self.data, 1, 4), expected, atol=1e-12)


class TestGradient:
    def test_scalar_closed_form(self):
        # d = 1: gradient reduces to the mean-square gradient divided by gamma
        arch = MLPArchitecture(1, 1, 1)
        w = random_weights(arch, 12)
        data = make_dataset(arch, 12, n=50)
        res = cost.residuals(w, data)
        jac = mlp.weight_jacobian(w, data.inputs)
        gamma = float(np.mean(res ** 2))
        expected = np.array([
            float(np.mean(-2.0 * jac[:, 0, k] * res[:, 0])) / gamma
            for k in range(arch.n_params)
        ])
        np.testing.assert_allclose(cost.grad_u_n(w, data), expected, rtol=1e-10)

    def test_matches_trace_identity(self):
        arch = MLPArchitecture(2, 2, 2)
        w = random_weights(arch, 13)
        data = make_dataset(arch, 13, n=40)
        inv = cost.gamma_n(w, data).inverse
        grad = cost.grad_u_n(w, data)
        for k in (0, 4, 9, arch.n_params - 1):
            expected = 2.0 * linalg.trace_product(inv, cost.a_n(w, data, k))
            assert grad[k] == pytest.approx(expected, rel=1e-10, abs=1e-12)

    def test_against_finite_differences(self):
        arch = MLPArchitecture(3, 2, 2)
        for seed in (0, 1, 2):
            w = random_weights(arch, 200 + seed)
            data = make_dataset(arch, 300 + seed, n=200)
            grad = cost.grad_u_n(w, data)
            fd = fd_gradient(w, data)
            rel = np.abs(grad - fd) / np.maximum.reduce(
                [np.abs(grad), np.abs(fd), np.full(grad.shape, 1e-6)]
            )
            assert np.max(rel) < 1e-5

    def test_interpolating_fit_is_undefined(self):
        arch = MLPArchitecture(1, 1, 1)
        w = random_weights(arch, 14)
        z = np.random.default_rng(6).standard_normal((10, 1))
        data = Dataset(z, mlp.forward(w, z))
        with pytest.raises(SingularCovariance):
            cost.grad_u_n(w, data)


class TestHessian:
    def test_exact_symmetry(self):
        arch = MLPArchitecture(2, 2, 2)
        w = random_weights(arch, 15)
        data = make_dataset(arch, 15, n=40)
        hess = cost.hessian_u_n(w, data)
        assert np.array_equal(hess, hess.T)

    def test_against_gradient_differences(self):
        arch = MLPArchitecture(3, 2, 2)
        step = 1e-6
        for seed in (0, 1):
            w = random_weights(arch, 400 + seed)
            data = make_dataset(arch, 500 + seed, n=200)
            hess = cost.hessian_u_n(w, data)
            s = arch.n_params
            fd = np.zeros((s, s))
            for k in range(s):
                up, down = w.values.copy(), w.values.copy()
                up[k] += step
                down[k] -= step
                fd[k] = (
                    cost.grad_u_n(WeightVector(arch, up), data)
                    - cost.grad_u_n(WeightVector(arch, down), data)
                ) / (2 * step)
            fd = (fd + fd.T) / 2
            rel = np.abs(hess - fd) / np.maximum.reduce(
                [np.abs(hess), np.abs(fd), np.full(fd.shape, 1e-4)]
            )
            assert np.max(rel) < 1e-4

    def test_output_bias_diagonal_at_small_residuals(self):
        # tiny residual noise: the Jacobian block dominates and the
        # output-bias diagonal approaches 2 * (inverse covariance) diagonal
        arch = MLPArchitecture(1, 1, 2)
        rng = np.random.default_rng(16)
        truth = WeightVector(arch, np.array([0.9, 0.2, 1.2, -0.7, 0.3, 0.1]))
        z = rng.standard_normal((4000, 1))
        y = mlp.forward(truth, z) + 1e-3 * rng.standard_normal((4000, 2))
        data = Dataset(z, y)
        hess = cost.hessian_u_n(truth, data)
        inv = cost.gamma_n(truth, data).inverse
        start = arch.output_bias_slice.start
        for i in range(2):
            assert hess[start + i, start + i] == pytest.approx(
                2.0 * inv[i, i], rel=0.05
            )


class TestLemmaOrdering:
    def test_covariance_dominates_truth(self):
        # the population residual covariance at any W exceeds the one at the
        # generator by a PSD term; sampled version holds up to noise slack
        arch = MLPArchitecture(1, 1, 2)
        rng = np.random.default_rng(17)
        truth = WeightVector(arch, np.array([1.0, 0.2, 1.3, -0.6, 0.2, -0.1]))
        n = 500_000
        z = rng.standard_normal((n, 1))
        y = mlp.forward(truth, z) + 0.1 * rng.standard_normal((n, 2))
        data = Dataset(z, y)
        base = cost.gamma_n(truth, data).gamma
        for seed in range(5):
            w = random_weights(arch, 600 + seed)
            diff = cost.gamma_n(w, data).gamma - base
            assert np.min(np.linalg.eigvalsh(diff)) >= -1e-3


class TestCostSymmetryInvariance:
    def test_u_and_v_invariant_under_group(self):
        arch = MLPArchitecture(2, 2, 2)
        w = random_weights(arch, 18)
        data = make_dataset(arch, 18, n=50)
        u0 = cost.u_n(w, data)
        v0 = cost.v_n(w, data)
        image = group_image(w, (1, 0), (True, False))
        assert cost.u_n(image, data) == pytest.approx(u0, abs=1e-12)
        assert cost.v_n(image, data) == pytest.approx(v0, abs=1e-12)
