import numpy as np
import pytest
from scipy.optimize import minimize

from rirflow.core import InvalidInputError
from rirflow.forward_ops import ClipSpec, ConvOperator, IdentityOperator, MaskOperator, ess_sweep, soft_clip, \
    soft_clip_deriv
from rirflow.refine import (
    SolverError,
    SolverTolerances,
    conjugate_gradient,
    declip_objective,
    huber_objective,
    huber_rho,
    huber_weights,
    refine_declip_gn,
    refine_denoise,
    refine_huber_irls,
    refine_inpaint,
    refine_linear_cg,
)

EXACT = SolverTolerances(cg_rel_tol=1e-12, cg_max_iter=5000, inner_rel_tol=1e-12, inner_max_iter=5000)


def dense(op):
    return np.column_stack([op.apply(e) for e in np.eye(op.input_len)])


@pytest.fixture
def conv_problem(rng):
    h = rng.standard_normal(9)
    op = ConvOperator(h, 64)
    x_true = rng.standard_normal(64)
    y = op.apply(x_true) + 0.1 * rng.standard_normal(72)
    return op, y, rng.standard_normal(64)


class TestDenoise:
    def test_equal_precisions(self, rng):
        y, xh = rng.standard_normal((2, 10))
        np.testing.assert_allclose(refine_denoise(y, xh, 0.3, 0.3, sample_kappa=False).mu, (y + xh) / 2, rtol=1e-14)

    def test_limits(self, rng):
        y, xh = rng.standard_normal((2, 10))
        r = refine_denoise(y, xh, 1e-12, 1.0, sample_kappa=False)
        assert np.linalg.norm(r.mu - y) / np.linalg.norm(y) <= 1e-6
        r = refine_denoise(y, xh, 1.0, 1e-12, sample_kappa=False)
        assert np.linalg.norm(r.mu - xh) / np.linalg.norm(xh) <= 1e-6

    def test_errors(self):
        with pytest.raises(InvalidInputError):
            refine_denoise(np.ones(3), np.ones(3), 0.0, 0.0)
        with pytest.raises(InvalidInputError):
            refine_denoise(np.ones(3), np.ones(4), 1.0, 1.0)

    def test_kappa_statistics(self):
        sigma, nu = 0.5, 0.8
        draws = np.stack([refine_denoise(np.zeros(6), np.zeros(6), sigma, nu, rng=s).kappa for s in range(10000)])
        var = 1 / (sigma ** -2 + nu ** -2)
        np.testing.assert_allclose(draws.var(axis=0), var, rtol=0.10)
        assert np.all(np.abs(draws.mean(axis=0)) < 4 * np.sqrt(var / 10000))

    def test_deterministic(self, rng):
        y, xh = rng.standard_normal((2, 10))
        a = refine_denoise(y, xh, 0.1, 0.2, rng=7).kappa
        b = refine_denoise(y, xh, 0.1, 0.2, rng=7).kappa
        assert np.array_equal(a, b)


class TestLinearCG:
    def test_identity_matches_closed_form(self, rng):
        y, xh = rng.standard_normal((2, 50))
        cg = refine_linear_cg(IdentityOperator(50), y, xh, 0.2, 0.7, rng=3)
        cf = refine_denoise(y, xh, 0.2, 0.7, rng=3)
        np.testing.assert_allclose(cg.mu, cf.mu, rtol=1e-8)
        np.testing.assert_allclose(cg.kappa, cf.kappa, rtol=1e-8)

    @pytest.mark.parametrize("precond", ["none", "circulant"])
    def test_dense_oracle(self, conv_problem, precond):
        op, y, xh = conv_problem
        sigma, nu = 0.1, 0.5
        H = dense(op)
        A = nu ** -2 * np.eye(64) + sigma ** -2 * H.T @ H
        want = np.linalg.solve(A, nu ** -2 * xh + sigma ** -2 * H.T @ y)
        got = refine_linear_cg(op, y, xh, sigma, nu, SolverTolerances(preconditioner=precond), sample_kappa=False).mu
        assert np.linalg.norm(got - want) / np.linalg.norm(want) <= 1e-6

    def test_noiseless_sweep_inversion(self, rng):
        h = ess_sweep(0.1, 50.0, sample_rate=8000).samples
        op = ConvOperator(h, 400)
        x_true = rng.standard_normal(400) * np.exp(-0.01 * np.arange(400))
        y = op.apply(x_true)
        mu = refine_linear_cg(op, y, rng.standard_normal(400), 1e-6, 1.0, EXACT, sample_kappa=False).mu
        assert np.linalg.norm(mu - x_true) / np.linalg.norm(x_true) <= 1e-3

    def test_scale_invariance(self, conv_problem):
        op, y, xh = conv_problem
        a = refine_linear_cg(op, y, xh, 0.1, 0.5, EXACT, sample_kappa=False).mu
        s = 7.0
        b = refine_linear_cg(op, y, xh, 0.1 / np.sqrt(s), 0.5 / np.sqrt(s), EXACT, sample_kappa=False).mu
        np.testing.assert_allclose(a, b, rtol=1e-8, atol=1e-10)

    def test_first_order_optimality(self, conv_problem):
        op, y, xh = conv_problem
        sigma, nu = 0.1, 0.5
        mu = refine_linear_cg(op, y, xh, sigma, nu, sample_kappa=False).mu
        grad = sigma ** -2 * op.adjoint(op.apply(mu) - y) + nu ** -2 * (mu - xh)
        assert np.linalg.norm(grad) <= 1e-5 * (1 + np.linalg.norm(mu)) * sigma ** -2

    def test_kappa_covariance(self, rng):
        op = ConvOperator(rng.standard_normal(3), 4)
        sigma, nu = 0.5, 1.0
        H = dense(op)
        cov = np.linalg.inv(nu ** -2 * np.eye(4) + sigma ** -2 * H.T @ H)
        draws = np.stack([refine_linear_cg(op, np.zeros(6), np.zeros(4), sigma, nu, rng=s).kappa
                          for s in range(4000)])
        np.testing.assert_allclose(np.cov(draws.T), cov, atol=0.08 * np.abs(cov).max())

    def test_non_convergence_raises(self, conv_problem):
        op, y, xh = conv_problem
        tol = SolverTolerances(cg_max_iter=1, cg_rel_tol=1e-14, preconditioner="none")
        with pytest.raises(SolverError) as err:
            refine_linear_cg(op, y, xh, 1e-3, 1.0, tol, sample_kappa=False)
        assert err.value.residual_norm > 0

    def test_length_check(self, conv_problem):
        op, y, xh = conv_problem
        with pytest.raises(InvalidInputError):
            refine_linear_cg(op, y[:-1], xh, 0.1, 0.5)


class TestCG:
    def test_truncation(self, rng):
        M = rng.standard_normal((30, 30))
        A = M @ M.T + 0.01 * np.eye(30)
        b = rng.standard_normal(30)
        x, it, res = conjugate_gradient(lambda v: A @ v, b, rel_tol=1e-14, max_iter=3, truncate=True)
        assert it == 3 and res > 1e-14
        with pytest.raises(SolverError):
            conjugate_gradient(lambda v: A @ v, b, rel_tol=1e-14, max_iter=3)
        x, it, res = conjugate_gradient(lambda v: A @ v, b, rel_tol=1e-10, max_iter=1000)
        np.testing.assert_allclose(A @ x, b, atol=1e-8)

    def test_zero_rhs_and_indefinite(self):
        x, it, _ = conjugate_gradient(lambda v: v, np.zeros(4))
        assert it == 0 and not x.any()
        with pytest.raises(SolverError):
            conjugate_gradient(lambda v: -v, np.ones(4))

    def test_tolerance_validation(self):
        with pytest.raises(InvalidInputError):
            SolverTolerances(cg_rel_tol=0.0)
        with pytest.raises(InvalidInputError):
            SolverTolerances(inner_max_iter=0)
        with pytest.raises(InvalidInputError):
            SolverTolerances(preconditioner="jacobi")


class TestHuber:
    def test_rho_spot_values(self):
        d = 0.3
        assert huber_rho(d, d) == pytest.approx(d * d / 2)
        assert huber_rho(-2 * d, d) == pytest.approx(1.5 * d * d)
        assert huber_rho(0.0, d) == 0.0

    def test_weights(self):
        w = huber_weights(np.array([0.0, 0.01, 1.0]), 0.1, 0.1)  # delta = 0.1
        np.testing.assert_allclose(w, [100.0, 100.0, 10.0])

    def test_quadratic_regime(self, conv_problem):
        op, _, xh = conv_problem
        sigma, b = 0.1, 1e-6  # delta = 1e4: every residual is inside
        y = op.apply(xh) + 0.01
        hub = refine_huber_irls(op, y, xh, sigma, b, 0.5, EXACT, rng=1)
        lin = refine_linear_cg(op, y, xh, sigma, 0.5, EXACT, rng=1)
        np.testing.assert_allclose(hub.mu, lin.mu, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(hub.kappa, lin.kappa, rtol=1e-9, atol=1e-12)

    def test_matches_generic_minimiser(self, rng):
        op = ConvOperator(rng.standard_normal(5), 48)
        x_true = rng.standard_normal(48)
        sigma, b, nu = 0.1, 0.05, 0.7
        y = op.apply(x_true) + sigma * rng.standard_normal(52) + rng.laplace(0, b, 52)
        xh = rng.standard_normal(48)
        tol = SolverTolerances(cg_rel_tol=1e-12, cg_max_iter=5000, inner_rel_tol=1e-13, inner_max_iter=5000,
                               irls_iters=500, irls_rel_tol=1e-13)
        mu = refine_huber_irls(op, y, xh, sigma, b, nu, tol, sample_kappa=False).mu
        H = dense(op)
        delta = sigma ** 2 / b

        def fun(x):
            r = H @ x - y
            g_r = np.clip(r, -delta, delta) / sigma ** 2
            return huber_objective(op, y, x, xh, sigma, b, nu ** -2), H.T @ g_r + (x - xh) / nu ** 2

        ref = minimize(fun, xh, jac=True, method="L-BFGS-B", options={"ftol": 1e-15, "gtol": 1e-12,
                                                                         "maxiter": 20000}).x
        assert np.linalg.norm(mu - ref) / np.linalg.norm(ref) <= 1e-4
        assert huber_objective(op, y, mu, xh, sigma, b, nu ** -2) <= huber_objective(op, y, ref, xh, sigma, b,
                                                                                     nu ** -2) + 1e-9

    def test_irls_objective_decreases(self, rng):
        op = ConvOperator(rng.standard_normal(9), 200)
        y = op.apply(rng.standard_normal(200)) + rng.laplace(0, 0.5, 208)
        xh = np.zeros(200)
        objs = []
        for iters in (1, 2, 4, 8):
            mu = refine_huber_irls(op, y, xh, 0.1, 0.5, 0.3, SolverTolerances(irls_iters=iters),
                                   sample_kappa=False).mu
            objs.append(huber_objective(op, y, mu, xh, 0.1, 0.5, 0.3 ** -2))
        assert all(b <= a * (1 + 1e-12) for a, b in zip(objs, objs[1:]))


class TestInpaint:
    def test_all_observed_is_denoise(self, rng):
        y, xh = rng.standard_normal((2, 30))
        a = refine_inpaint(MaskOperator(np.ones(30, bool)), y, xh, 0.2, 0.4, rng=5)
        b = refine_denoise(y, xh, 0.2, 0.4, rng=5)
        np.testing.assert_allclose(a.mu, b.mu, rtol=1e-14)
        np.testing.assert_allclose(a.kappa, b.kappa, rtol=1e-14)

    def test_all_missing(self, rng):
        y, xh = rng.standard_normal((2, 30))
        r = refine_inpaint(MaskOperator(np.zeros(30, bool)), y, xh, 0.2, 0.4)
        np.testing.assert_array_equal(r.mu, xh)

    def test_mixed_scalar_oracle(self, rng):
        keep = rng.random(40) > 0.5
        y, xh = rng.standard_normal((2, 40))
        sigma, nu = 0.3, 0.6
        r = refine_inpaint(MaskOperator(keep), y, xh, sigma, nu, sample_kappa=False)
        for i in range(40):
            want = (y[i] / sigma ** 2 + xh[i] / nu ** 2) / (1 / sigma ** 2 + 1 / nu ** 2) if keep[i] else xh[i]
            assert r.mu[i] == pytest.approx(want, rel=1e-14)

    def test_kappa_variance(self):
        keep = np.array([True, False, True, False])
        sigma, nu = 0.4, 0.9
        draws = np.stack([refine_inpaint(MaskOperator(keep), np.zeros(4), np.zeros(4), sigma, nu, rng=s).kappa
                          for s in range(10000)])
        want = np.where(keep, 1 / (sigma ** -2 + nu ** -2), nu ** 2)
        np.testing.assert_allclose(draws.var(axis=0), want, rtol=0.10)

    def test_length_check(self):
        with pytest.raises(InvalidInputError):
            refine_inpaint(MaskOperator(np.ones(3, bool)), np.ones(3), np.ones(4), 1.0, 1.0)


class TestDeclip:
    def test_linear_regime(self, conv_problem):
        op, y, xh = conv_problem
        clip = ClipSpec(tau=1e3 * np.abs(y).max())
        gn = refine_declip_gn(op, clip, y, xh, 0.1, 0.5, replace_tol(gn_iters=20), sample_kappa=False).mu
        lin = refine_linear_cg(op, y, xh, 0.1, 0.5, EXACT, sample_kappa=False).mu
        assert np.linalg.norm(gn - lin) / np.linalg.norm(lin) <= 1e-4

    def test_jacobian_finite_difference(self, rng):
        op = ConvOperator(rng.standard_normal(4), 32)
        clip = ClipSpec(tau=0.5, zeta=20.0)
        x, v = rng.standard_normal((2, 32))
        h = 1e-6
        jv = (soft_clip(op.apply(x + h * v), clip) - soft_clip(op.apply(x - h * v), clip)) / (2 * h)
        slope = soft_clip_deriv(op.apply(x), clip)
        jtjv_fd = op.adjoint(slope * jv)
        np.testing.assert_allclose(op.normal(v, slope * slope), jtjv_fd, atol=1e-4)

    def test_objective_monotone(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            op = ConvOperator(rng.standard_normal(6), 40)
            x_true = rng.standard_normal(40)
            clip = ClipSpec.from_level(op.apply(x_true), 0.3, zeta=50.0)
            y = soft_clip(op.apply(x_true), clip) + 0.01 * rng.standard_normal(45)
            r = refine_declip_gn(op, clip, y, rng.standard_normal(40), 0.01, 0.5, sample_kappa=False)
            hist = r.diagnostics["objective"]
            assert len(hist) >= 2
            assert all(b <= a for a, b in zip(hist, hist[1:]))

    def test_first_order_optimality(self, rng):
        op = ConvOperator(rng.standard_normal(6), 40)
        x_true = rng.standard_normal(40)
        clip = ClipSpec.from_level(op.apply(x_true), 0.5, zeta=20.0)
        sigma, nu = 0.1, 0.5
        y = soft_clip(op.apply(x_true), clip) + sigma * rng.standard_normal(45)
        xh = rng.standard_normal(40)
        tol = replace_tol(gn_iters=100)
        mu = refine_declip_gn(op, clip, y, xh, sigma, nu, tol, sample_kappa=False).mu
        z = op.apply(mu)
        grad = op.adjoint(soft_clip_deriv(z, clip) * (soft_clip(z, clip) - y)) / sigma ** 2 + (mu - xh) / nu ** 2
        assert np.linalg.norm(grad) <= 1e-5 * (1 + np.linalg.norm(mu)) * sigma ** -2
        obj = declip_objective(op, clip, y, mu, xh, sigma, nu ** -2)
        assert obj <= declip_objective(op, clip, y, xh, xh, sigma, nu ** -2)

    def test_kappa_finite_and_deterministic(self, conv_problem):
        op, y, xh = conv_problem
        clip = ClipSpec.from_level(y, 0.5)
        a = refine_declip_gn(op, clip, y, xh, 0.1, 0.5, rng=2)
        b = refine_declip_gn(op, clip, y, xh, 0.1, 0.5, rng=2)
        assert np.all(np.isfinite(a.kappa)) and np.array_equal(a.kappa, b.kappa)
        assert np.array_equal(a.mu, b.mu)


def replace_tol(**kw):
    from dataclasses import replace

    return replace(EXACT, **kw)
