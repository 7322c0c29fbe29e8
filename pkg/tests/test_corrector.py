import math
from dataclasses import replace

import numpy as np
import pytest

from fastslow import (CorrectorQuery, CoupledSystem, NotCentered, GridTooCoarse,
                      average, centering_residual, gradients,
                      outer_product_HPhi, sample_invariant_measure,
                      solve_poisson_fk)
from fastslow.corrector import CorrectorField, _field_at, grad_x_at

RT2 = math.sqrt(2.0)


def standard_ou(H=None):
    """Fast equation with stationary law N(0, 1)."""
    return CoupledSystem(
        d1=1, d2=1,
        b=lambda x, y: -x,
        sigma=lambda x, y: np.array([[RT2]]),
        c=lambda x, y: np.zeros_like(x),
        F=lambda t, x, y: np.zeros_like(x),
        H=H or (lambda t, x, y: x),
        G=lambda t, x, y: np.array([[1.0]]),
        autonomous=True,
    )


F_LIN = lambda t, x, y: x[..., 0]
F_QUAD = lambda t, x, y: x[..., 0] ** 2 - 1.0


def grid_query(lo=-3.0, hi=3.0, n=25, **kw):
    kw.setdefault("t", 0.0)
    kw.setdefault("y", [0.0])
    kw.setdefault("T_max", 8.0)
    kw.setdefault("n_paths", 30000)
    kw.setdefault("dt", 0.01)
    kw.setdefault("seed", 17)
    return CorrectorQuery.from_grid((np.linspace(lo, hi, n),), **kw)


@pytest.fixture(scope="module")
def mu():
    return sample_invariant_measure(standard_ou(), [0.0], n_samples=50000,
                                    thinning=10, seed=55)


@pytest.fixture(scope="module")
def mu_long():
    # heavy-tailed integrands (fourth moments) need a long stationary stretch
    return sample_invariant_measure(standard_ou(), [0.0], n_samples=40000,
                                    thinning=50, dt=2e-3, seed=56)


@pytest.fixture(scope="module")
def field_lin(mu):
    z = centering_residual(F_LIN, mu)
    return solve_poisson_fk(standard_ou(), F_LIN, grid_query(),
                            mode="corrector", centering_z=z)


@pytest.fixture(scope="module")
def field_quad(mu):
    z = centering_residual(F_QUAD, mu)
    return solve_poisson_fk(standard_ou(), F_QUAD, grid_query(),
                            mode="poisson", centering_z=z)


class TestSolve:
    def test_linear_oracle(self, field_lin):
        # corrector-mode solution of the linear integrand is the identity
        pts = field_lin.query.points[:, 0]
        for target in (-1.0, 0.0, 1.0):
            q = int(np.argmin(np.abs(pts - target)))
            assert abs(field_lin.values[q, 0] - pts[q]) <= 0.05

    def test_poisson_mode_flips_sign(self, mu):
        z = centering_residual(F_LIN, mu)
        query = grid_query(n=5, n_paths=2000, T_max=2.0)
        cor = solve_poisson_fk(standard_ou(), F_LIN, query, "corrector",
                               centering_z=z)
        poi = solve_poisson_fk(standard_ou(), F_LIN, query, "poisson",
                               centering_z=z)
        assert np.array_equal(cor.values, -poi.values)

    def test_quadratic_oracle(self, field_quad):
        # poisson mode: u = -(x^2 - 1)/2 is the zero-mean representative
        pts = field_quad.query.points[:, 0]
        for target, expect in ((0.0, 0.5), (1.0, 0.0)):
            q = int(np.argmin(np.abs(pts - target)))
            assert abs(field_quad.values[q, 0] - expect) <= 0.05

    def test_zero_integrand_exact(self):
        f0 = lambda t, x, y: np.zeros(x.shape[:-1])
        field = solve_poisson_fk(standard_ou(), f0,
                                 grid_query(n=3, n_paths=1000, T_max=1.0),
                                 centering_z=0.0)
        assert np.all(field.values == 0.0)
        assert np.all(field.tail_bound == 0.0)

    def test_refuses_without_evidence(self):
        with pytest.raises(NotCentered):
            solve_poisson_fk(standard_ou(), F_LIN,
                             grid_query(n=3, n_paths=1000, T_max=1.0))

    def test_refuses_large_z(self):
        with pytest.raises(NotCentered):
            solve_poisson_fk(standard_ou(), F_LIN,
                             grid_query(n=3, n_paths=1000, T_max=1.0),
                             centering_z=5.0)

    def test_auto_center(self, mu):
        # the estimated-mean error is amplified by the horizon, so the
        # tolerance carries a 3 * T_max * se(mean) term
        f_shift = lambda t, x, y: x[..., 0] + 5.0
        _, se_mean = average(f_shift, mu)
        field = solve_poisson_fk(standard_ou(), f_shift,
                                 grid_query(n=9, n_paths=20000),
                                 auto_center=True, mu=mu)
        pts = field.query.points[:, 0]
        q = int(np.argmin(np.abs(pts - 1.0)))
        tol = 0.05 + 3.0 * field.query.T_max * float(se_mean[0])
        assert abs(field.values[q, 0] - pts[q]) <= tol

    def test_scaling_by_power_of_two_bit_exact(self, mu):
        query = grid_query(n=5, n_paths=2000, T_max=2.0)
        z = centering_residual(F_LIN, mu)
        f2 = lambda t, x, y: 2.0 * F_LIN(t, x, y)
        a = solve_poisson_fk(standard_ou(), F_LIN, query, centering_z=z)
        b = solve_poisson_fk(standard_ou(), f2, query, centering_z=z)
        assert np.array_equal(b.values, 2.0 * a.values)

    def test_general_linearity_near_exact(self, mu):
        query = grid_query(n=5, n_paths=2000, T_max=2.0)
        comb = lambda t, x, y: 0.3 * F_LIN(t, x, y) + 1.7 * F_QUAD(t, x, y)
        za = centering_residual(F_LIN, mu)
        zb = centering_residual(F_QUAD, mu)
        zc = centering_residual(comb, mu)
        a = solve_poisson_fk(standard_ou(), F_LIN, query, centering_z=za)
        b = solve_poisson_fk(standard_ou(), F_QUAD, query, centering_z=zb)
        c = solve_poisson_fk(standard_ou(), comb, query, centering_z=zc)
        np.testing.assert_allclose(c.values, 0.3 * a.values + 1.7 * b.values,
                                   rtol=1e-12, atol=1e-12)

    def test_centered_representative(self, field_lin, mu):
        # the truncated-integral solution carries no additive constant
        vals = _field_at(field_lin, mu.samples)
        m = vals.mean()
        se_mu = vals.std(ddof=1) / math.sqrt(vals.shape[0])
        se_f = float(field_lin.se.mean())
        assert abs(m) <= 3 * math.hypot(se_mu, se_f)

    def test_discrete_generator_residual(self, field_lin):
        # a * second difference + b * first difference reproduces -f inside
        pts = field_lin.query.points[:, 0]
        h = pts[1] - pts[0]
        v = field_lin.values[:, 0]
        lap = (v[2:] - 2 * v[1:-1] + v[:-2]) / h ** 2
        grd = (v[2:] - v[:-2]) / (2 * h)
        resid = 1.0 * lap + (-pts[1:-1]) * grd - (-pts[1:-1])
        inner = slice(4, -4)  # skip near-edge nodes where samples are scarce
        tol = max(0.1, 5 * float(field_lin.se.max()))
        assert np.max(np.abs(resid[inner])) <= tol

    def test_truncation_tail_bound(self, mu):
        z = centering_residual(F_LIN, mu)
        q5 = grid_query(lo=0.5, hi=1.5, n=3, T_max=5.0, n_paths=40000)
        q10 = replace(q5, T_max=10.0)
        f5 = solve_poisson_fk(standard_ou(), F_LIN, q5, centering_z=z)
        f10 = solve_poisson_fk(standard_ou(), F_LIN, q10, centering_z=z)
        diff = f10.batch_means - f5.batch_means
        se_diff = diff.std(axis=0, ddof=1) / math.sqrt(diff.shape[0])
        delta = np.abs(f10.values - f5.values)
        assert np.all(delta <= f5.tail_bound + 3 * se_diff + 1e-12)


class TestGradients:
    def test_linear_gradient(self, field_lin):
        fld = gradients(field_lin, want_grad_y=False)
        gx = grad_x_at(fld, np.array([[-1.0], [0.0], [1.0]]))
        assert np.all(np.abs(gx[:, 0, 0] - 1.0) <= 0.05)

    def test_quadratic_gradient(self, field_quad):
        fld = gradients(field_quad, want_grad_y=False)
        gx = grad_x_at(fld, np.array([[1.0]]))
        assert abs(gx[0, 0, 0] - (-1.0)) <= 0.05

    def test_y_gradient_vanishes_without_dependence(self, field_lin):
        # dynamics and integrand ignore y, and the re-solves share noise
        fld = gradients(field_lin, want_grad_y=True)
        assert np.all(fld.grad_y == 0.0)

    def test_grid_spacing_validation(self, field_lin):
        with pytest.raises(ValueError):
            gradients(field_lin, grid_spacing=123.0, want_grad_y=False)

    def test_grid_too_coarse(self, field_lin):
        x = np.linspace(-3, 3, 7)
        bumpy = np.exp(-x ** 2 / 0.08)[:, None]
        query = CorrectorQuery.from_grid((x,), t=0.0, y=[0.0], T_max=1.0,
                                         n_paths=100, seed=0)
        fake = CorrectorField(
            query=query, mode="corrector", values=bumpy,
            se=np.full_like(bumpy, 1e-6),
            batch_means=np.repeat(bumpy[None], 20, axis=0),
            tail_bound=np.zeros_like(bumpy), k=1,
            _system=standard_ou(), _f=F_LIN, _centering_z=0.0)
        with pytest.raises(GridTooCoarse):
            gradients(fake, want_grad_y=False)


class TestOuterProduct:
    def test_zero_H(self, mu):
        sys0 = standard_ou(H=lambda t, x, y: np.zeros(x.shape[:-1] + (1,)))
        z = 0.0
        field = solve_poisson_fk(sys0, sys0.H, grid_query(n=5, n_paths=2000,
                                                          T_max=2.0),
                                 centering_z=z)
        res = outer_product_HPhi(sys0, field, mu, 0.0)
        assert np.all(res.matrix == 0.0)
        assert res.antisym_norm == 0.0

    def test_linear_H_second_moment(self, mu):
        sys1 = standard_ou(H=lambda t, x, y: x)
        z = centering_residual(sys1.H, mu)
        field = solve_poisson_fk(sys1, sys1.H, grid_query(n_paths=40000),
                                 centering_z=z)
        res = outer_product_HPhi(sys1, field, mu, 0.0)
        assert abs(res.matrix[0, 0] - 1.0) <= 0.05

    def test_quadratic_H_fourth_moment(self, mu_long):
        sys1 = standard_ou(H=lambda t, x, y: x ** 2 - 1.0)
        z = centering_residual(sys1.H, mu_long)
        field = solve_poisson_fk(sys1, sys1.H, grid_query(n_paths=40000),
                                 centering_z=z)
        res = outer_product_HPhi(sys1, field, mu_long, 0.0)
        assert abs(res.matrix[0, 0] - 1.0) <= 0.1
