import numpy as np
import pytest

from hydrokin import maxwellian as mx
from hydrokin.vgrid import VelocityGrid, halfspace_gauss


class ShearField:
    """U = (u(x3), 0, 0) with u(x3) = tanh(x3); closed-form gradient."""

    def velocity(self, t, x):
        return np.array([np.tanh(x[2]), 0.0, 0.0])

    def velocity_gradient(self, t, x):
        G = np.zeros((3, 3))
        G[2, 0] = 1.0 / np.cosh(x[2]) ** 2
        return G


class BrokenField:
    def velocity(self, t, x):
        return None


def test_mu0_value_at_origin():
    assert abs(mx.mu0(np.zeros(3)) - 0.0634936359) < 1e-9


def test_mu0_grid_normalization():
    g = VelocityGrid(n_v=32, L_v=8.0, kind="gauss")
    assert abs(g.integrate(mx.mu0(g.xi)) - 1.0) < 1e-8


def test_sqrt_mu0_consistent():
    rng = np.random.default_rng(0)
    xi = rng.normal(size=(20, 3))
    assert np.max(np.abs(mx.sqrt_mu0(xi) ** 2 - mx.mu0(xi))) < 1e-15


def test_c_mu_value_and_flux_normalization():
    assert abs(mx.c_mu() - 2.5066282746) < 1e-9
    xi, w = halfspace_gauss(32, 8.0, sign=+1)
    flux = np.sum(w * mx.mu0(xi) * np.abs(xi[:, 2]))
    assert abs(mx.c_mu() * flux - 1.0) < 1e-8


def test_local_maxwellian_shift():
    field = mx.ConstantField([1.0, -2.0, 0.5])
    loc = mx.LocalMaxwellian(field, epsilon=0.1)
    xi = np.array([0.3, 0.0, -1.0])
    ph = loc.phi(0.0, np.zeros(3), xi)
    assert np.allclose(ph, xi - 0.1 * np.array([1.0, -2.0, 0.5]))
    assert abs(loc(0.0, np.zeros(3), xi) - mx.mu0(ph)) < 1e-16


def test_local_maxwellian_shifted_moments():
    # int phi mu dxi = 0 and int phi_i phi_j mu dxi = delta_ij after the shift
    field = mx.ConstantField([0.8, 0.0, -0.3])
    loc = mx.LocalMaxwellian(field, epsilon=0.25)
    g = VelocityGrid(n_v=32, L_v=8.0, kind="gauss")
    x = np.zeros(3)
    ph = np.stack([loc.phi(0.0, x, xi) for xi in g.xi])
    m = mx.mu0(ph)
    for i in range(3):
        assert abs(g.integrate(ph[:, i] * m)) < 1e-8
        for j in range(3):
            want = 1.0 if i == j else 0.0
            assert abs(g.integrate(ph[:, i] * ph[:, j] * m) - want) < 1e-7


def test_gradient_matches_finite_difference():
    field = ShearField()
    loc = mx.LocalMaxwellian(field, epsilon=0.2)
    xi = np.array([1.3, -0.4, 0.7])
    x = np.array([0.1, 0.2, 0.35])
    ana = loc.dx3(0.0, x, xi)
    h = 1e-5
    xp = x.copy()
    xm = x.copy()
    xp[2] += h
    xm[2] -= h
    fd = (loc(0.0, xp, xi) - loc(0.0, xm, xi)) / (2.0 * h)
    assert abs(ana - fd) < 1e-6 * max(abs(fd), 1e-30)


def test_field_unavailable():
    loc = mx.LocalMaxwellian(BrokenField(), epsilon=0.1)
    with pytest.raises(mx.FieldUnavailable):
        loc(0.0, np.zeros(3), np.zeros(3))
    with pytest.raises(mx.FieldUnavailable):
        loc.gradient_x(0.0, np.zeros(3), np.zeros(3))


def test_wall_weights_examples():
    TM = 0.9
    w1, w2, w3 = mx.wall_weights(np.zeros(3), TM)
    assert w1 == 1.0
    assert w2 == 0.0
    assert abs(w3 - TM**1.5) < 1e-15
    w1, w2, w3 = mx.wall_weights(np.array([0.0, 0.0, -2.0]), 0.75)
    assert abs(w2 - 2.0 * np.exp(-4.0 / 3.0)) < 1e-15
    # outgoing velocities carry no incoming-flux weight
    _, w2p, _ = mx.wall_weights(np.array([0.0, 0.0, 2.0]), 0.75)
    assert w2p == 0.0


def test_wall_weights_identity():
    rng = np.random.default_rng(1)
    xi = rng.normal(size=(50, 3)) * 2.0
    for TM in (0.6, 0.75, 0.9):
        w1, _, w3 = mx.wall_weights(xi, TM)
        lhs = w1 * w3 / TM**1.5
        rhs = np.exp(-np.sum(xi * xi, axis=1) / 4.0)
        assert np.max(np.abs(lhs - rhs)) < 1e-14


def test_bad_temperature():
    for TM in (0.5, 1.0, 0.3, 1.2, -1.0):
        with pytest.raises(mx.BadTemperature):
            mx.wall_weights(np.zeros(3), TM)
        with pytest.raises(mx.BadTemperature):
            mx.mu_wall(np.zeros(3), TM)


def test_ratio_quotient_oracle():
    # the closed-form ratios must match the literal quotients to 1e-12
    rng = np.random.default_rng(2)
    xi = rng.normal(size=(40, 3)) * 2.5
    U = np.array([0.7, -0.2, 0.4])
    eps, TM = 0.05, 0.9
    ph = xi - eps * U
    lit = mx.sqrt_mu_wall(xi, TM) / mx.sqrt_mu0(ph)
    got = mx.ratio_sqrt_muM_over_sqrt_mu(xi, U, eps, TM)
    assert np.max(np.abs(got / lit - 1.0)) < 1e-12
    lit = mx.mu0(ph) / mx.sqrt_mu_wall(xi, TM)
    got = mx.ratio_mu_over_sqrt_muM(xi, U, eps, TM)
    assert np.max(np.abs(got / lit - 1.0)) < 1e-12
    lit = mx.sqrt_mu0(ph) / mx.sqrt_mu_wall(xi, TM)
    got = mx.ratio_sqrt_mu_over_sqrt_muM(xi, U, eps, TM)
    assert np.max(np.abs(got / lit - 1.0)) < 1e-12


def test_ratio_cross_identity():
    # (mu / sqrt(mu_M)) * (sqrt(mu_M) / sqrt(mu)) = sqrt(mu)
    rng = np.random.default_rng(3)
    xi = rng.normal(size=(30, 3)) * 2.0
    U = np.array([-0.3, 0.9, 0.1])
    eps, TM = 0.02, 0.8
    prod = mx.ratio_mu_over_sqrt_muM(xi, U, eps, TM) * mx.ratio_sqrt_muM_over_sqrt_mu(
        xi, U, eps, TM
    )
    want = mx.sqrt_mu0(xi - eps * U)
    assert np.max(np.abs(prod / want - 1.0)) < 1e-12


def test_ratio_epsilon_zero_reduction():
    # at eps = 0 the U-dependence must drop out entirely
    xi = np.array([[1.0, 2.0, -0.5]])
    a = mx.ratio_sqrt_muM_over_sqrt_mu(xi, [5.0, 5.0, 5.0], 0.0, 0.9)
    b = mx.ratio_sqrt_muM_over_sqrt_mu(xi, [0.0, 0.0, 0.0], 0.0, 0.9)
    assert abs(a[0] - b[0]) < 1e-15
    q = float(np.sum(xi**2))
    want = 0.9 ** (-0.75) * np.exp(-(q / 4.0) * (1.0 / 0.9 - 1.0))
    assert abs(a[0] - want) < 1e-15


def test_gaussian_derivative_polys_low_orders():
    # p1 = -2As, p2 = 4A^2 s^2 - 2A, p3 = -8A^3 s^3 + 12 A^2 s
    polys = mx.gaussian_derivative_polys("1/2", 3)
    assert [float(c) for c in polys[1]] == [0.0, -1.0]
    assert [float(c) for c in polys[2]] == [-1.0, 0.0, 1.0]
    assert [float(c) for c in polys[3]] == [0.0, 3.0, 0.0, -1.0]


def test_gaussian_derivative_envelope():
    for A in ("1/4", "1/2"):
        for R0 in (0.3, 0.6, 0.9, 0.99):
            margin = mx.gaussian_derivative_envelope_margin(A, R0, order=10)
            assert margin >= 0.0, (A, R0, margin)


def test_moment_weight_positive_and_symmetric():
    xi = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
    w = mx.moment_weight(xi, [0.0, 0.0, 0.0], 0.1)
    assert w[0] == w[1]
    assert np.all(w >= 1.0)
