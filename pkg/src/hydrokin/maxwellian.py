"""Reference Maxwellians, the local Maxwellian built on a fluid velocity
field, wall-Maxwellian weights for the diffuse boundary condition, and the
exact ratio factors used to move between the mu and mu_M weightings.

Conventions
-----------
* global Maxwellian     mu0(xi) = (2 pi)^{-3/2} exp(-|xi|^2 / 2)
* local Maxwellian      mu(t, x, xi) = mu0(xi - eps U(t, x)),  phi = xi - eps U
* wall Maxwellian       mu_M(xi) = (2 pi T_M)^{-3/2} exp(-|xi|^2 / (2 T_M)),
                        T_M in (1/2, 1)
* accommodation const   c_mu = sqrt(2 pi), so that
                        c_mu * int_{xi_3 < 0} mu0 |xi_3| dxi = 1.

All ratio factors below are exact closed forms; the 1e-12 quotient tests in
the suite depend on that exactness.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np

TWO_PI = 2.0 * np.pi

# weight exponent for pointwise diagnostics of the local Maxwellian layer
P0 = 1.0 / 16.0


class BadTemperature(ValueError):
    """Wall temperature outside the admissible window (1/2, 1)."""


class FieldUnavailable(RuntimeError):
    """The fluid-velocity provider could not evaluate at the requested point."""


def mu0(xi):
    """Global Maxwellian (2 pi)^{-3/2} exp(-|xi|^2/2); xi has shape (..., 3)."""
    xi = np.asarray(xi, dtype=float)
    q = np.sum(xi * xi, axis=-1)
    return TWO_PI ** (-1.5) * np.exp(-0.5 * q)


def sqrt_mu0(xi):
    xi = np.asarray(xi, dtype=float)
    q = np.sum(xi * xi, axis=-1)
    return TWO_PI ** (-0.75) * np.exp(-0.25 * q)


def mu_wall(xi, TM):
    """Wall Maxwellian (2 pi T_M)^{-3/2} exp(-|xi|^2/(2 T_M))."""
    check_temperature(TM)
    xi = np.asarray(xi, dtype=float)
    q = np.sum(xi * xi, axis=-1)
    return (TWO_PI * TM) ** (-1.5) * np.exp(-q / (2.0 * TM))


def sqrt_mu_wall(xi, TM):
    check_temperature(TM)
    xi = np.asarray(xi, dtype=float)
    q = np.sum(xi * xi, axis=-1)
    return (TWO_PI * TM) ** (-0.75) * np.exp(-q / (4.0 * TM))


def c_mu():
    """Normalization of the diffuse-reflection wall flux, sqrt(2 pi)."""
    return float(np.sqrt(TWO_PI))


def check_temperature(TM):
    if not (0.5 < TM < 1.0):
        raise BadTemperature(f"wall temperature {TM} outside (1/2, 1)")


class ConstantField:
    """Trivial velocity provider: U(t, x) uniform, all derivatives zero."""

    def __init__(self, U):
        self.U = np.asarray(U, dtype=float).reshape(3)

    def velocity(self, t, x):
        return self.U

    def velocity_gradient(self, t, x):
        return np.zeros((3, 3))


class LocalMaxwellian:
    """mu(t, x, xi) = mu0(xi - eps U(t, x)) over a velocity provider.

    The provider must expose ``velocity(t, x) -> (3,)``; spatial derivatives
    additionally need ``velocity_gradient(t, x) -> (3, 3)`` with entry
    [i, j] = d U_j / d x_i.  Missing data raises FieldUnavailable.
    """

    def __init__(self, provider, epsilon):
        self.provider = provider
        self.epsilon = float(epsilon)

    def _velocity(self, t, x):
        try:
            U = self.provider.velocity(t, x)
        except FieldUnavailable:
            raise
        except Exception as exc:
            raise FieldUnavailable(f"velocity evaluation failed at t={t}, x={x}") from exc
        if U is None:
            raise FieldUnavailable(f"velocity undefined at t={t}, x={x}")
        return np.asarray(U, dtype=float).reshape(3)

    def phi(self, t, x, xi):
        """Shifted velocity phi = xi - eps U(t, x)."""
        U = self._velocity(t, x)
        return np.asarray(xi, dtype=float) - self.epsilon * U

    def __call__(self, t, x, xi):
        return mu0(self.phi(t, x, xi))

    def sqrt(self, t, x, xi):
        return sqrt_mu0(self.phi(t, x, xi))

    def gradient_x(self, t, x, xi):
        """Spatial gradient (3,) or (..., 3): d_{x_i} mu = eps (dU/dx_i . phi) mu.

        Chain rule through phi = xi - eps U; no finite differencing.
        """
        try:
            G = self.provider.velocity_gradient(t, x)
        except FieldUnavailable:
            raise
        except AttributeError as exc:
            raise FieldUnavailable("provider has no velocity_gradient") from exc
        G = np.asarray(G, dtype=float).reshape(3, 3)
        ph = self.phi(t, x, xi)
        val = mu0(ph)
        # d/dx_i mu0(phi) = -phi . (d phi/dx_i) mu0 = eps (G[i] . phi) mu0
        proj = ph @ G.T  # (..., 3) with last axis = spatial direction i
        return self.epsilon * proj * val[..., None]

    def dx3(self, t, x, xi):
        """Wall-normal derivative d_{x_3} mu = eps (d_{x_3} U . phi) mu."""
        return self.gradient_x(t, x, xi)[..., 2]


def wall_weights(xi, TM):
    """Weights (w1, w2, w3) used by the diffuse-reflection transport step.

    w1 = exp(-(|xi|^2/4) (2 - 1/T_M))          damping toward mu_M
    w2 = 1_{xi_3 < 0} exp(-|xi|^2/(4 T_M)) |xi_3|   incoming-flux factor
    w3 = T_M^{3/2}  exp(-(|xi|^2/4) (1/T_M - 1))    mu_M-to-mu conversion

    Identity: w1 * w3 / T_M^{3/2} = exp(-|xi|^2/4).
    """
    check_temperature(TM)
    xi = np.asarray(xi, dtype=float)
    q = np.sum(xi * xi, axis=-1)
    w1 = np.exp(-(q / 4.0) * (2.0 - 1.0 / TM))
    w2 = np.where(xi[..., 2] < 0.0, np.exp(-q / (4.0 * TM)) * np.abs(xi[..., 2]), 0.0)
    w3 = TM**1.5 * np.exp(-(q / 4.0) * (1.0 / TM - 1.0))
    return w1, w2, w3


# -- exact ratio factors ----------------------------------------------------
#
# With phi = xi - eps U and T_M in (1/2, 1):
#
#   sqrt(mu_M)/sqrt(mu) = T_M^{-3/4} exp(-(|xi|^2/4)(1/T_M - 1))
#                          * exp(-(eps/2) U . xi) exp((eps^2/4) |U|^2)
#
#   mu / sqrt(mu_M)     = (2 pi)^{-3/4} T_M^{3/4}
#                          * exp(-(1/4)(2 - 1/T_M) |xi|^2)
#                          * exp(eps U . xi) exp(-(eps^2/2) |U|^2)
#
# Both follow by completing the square in the exponents; they are inverses /
# cross-quotients of each other, which the tests check to 1e-12.


def ratio_sqrt_muM_over_sqrt_mu(xi, U, epsilon, TM):
    check_temperature(TM)
    xi = np.asarray(xi, dtype=float)
    U = np.asarray(U, dtype=float).reshape(3)
    q = np.sum(xi * xi, axis=-1)
    udotxi = np.sum(xi * U, axis=-1)
    uu = float(U @ U)
    return (
        TM ** (-0.75)
        * np.exp(-(q / 4.0) * (1.0 / TM - 1.0))
        * np.exp(-0.5 * epsilon * udotxi)
        * np.exp(0.25 * epsilon**2 * uu)
    )


def ratio_sqrt_mu_over_sqrt_muM(xi, U, epsilon, TM):
    return 1.0 / ratio_sqrt_muM_over_sqrt_mu(xi, U, epsilon, TM)


def ratio_mu_over_sqrt_muM(xi, U, epsilon, TM):
    check_temperature(TM)
    xi = np.asarray(xi, dtype=float)
    U = np.asarray(U, dtype=float).reshape(3)
    q = np.sum(xi * xi, axis=-1)
    udotxi = np.sum(xi * U, axis=-1)
    uu = float(U @ U)
    return (
        TWO_PI ** (-0.75)
        * TM**0.75
        * np.exp(-0.25 * (2.0 - 1.0 / TM) * q)
        * np.exp(epsilon * udotxi)
        * np.exp(-0.5 * epsilon**2 * uu)
    )


# -- derivative envelope for Gaussian profiles -------------------------------
#
# d_s^n exp(-A s^2) = p_n(s) exp(-A s^2) with p_{n+1} = p_n' - 2 A s p_n.
# The envelope check asserts sup_n R0^n/n! |p_n(s)| e^{-A s^2}
# <= e^{-A s^2 / 2} for R0 in (0, 1); coefficients are kept rational so the
# recurrence itself is exact.


def gaussian_derivative_polys(A, order):
    """Coefficient lists (ascending powers, Fractions) of p_0 .. p_order."""
    A = Fraction(A)
    polys = [[Fraction(1)]]
    for _ in range(order):
        p = polys[-1]
        # derivative
        dp = [k * p[k] for k in range(1, len(p))]
        # minus 2 A s p
        shifted = [Fraction(0)] + [-2 * A * c for c in p]
        m = max(len(dp), len(shifted))
        nxt = [Fraction(0)] * m
        for k, c in enumerate(dp):
            nxt[k] += c
        for k, c in enumerate(shifted):
            nxt[k] += c
        polys.append(nxt)
    return polys


def gaussian_derivative_envelope_margin(A, R0, order=10, s_max=12.0, n_s=481):
    """min over sampled s of  e^{-A s^2/2} - sup_n R0^n/n! |p_n(s)| e^{-A s^2}.

    Nonnegative return value means the analytic envelope holds on the sample.
    """
    polys = gaussian_derivative_polys(A, order)
    Af = float(Fraction(A))
    s = np.linspace(-s_max, s_max, n_s)
    gauss = np.exp(-Af * s**2)
    target = np.exp(-Af * s**2 / 2.0)
    worst = np.zeros_like(s)
    fact = 1.0
    for n, p in enumerate(polys):
        if n > 0:
            fact *= n
        coeffs = np.array([float(c) for c in p])
        vals = np.polynomial.polynomial.polyval(s, coeffs)
        cand = (R0**n / fact) * np.abs(vals) * gauss
        worst = np.maximum(worst, cand)
    return float(np.min(target - worst))


def moment_weight(xi, U, epsilon, p0=P0):
    """Pointwise diagnostic weight exp(p0 (|xi|^2 + |phi|^2)), phi = xi - eps U."""
    xi = np.asarray(xi, dtype=float)
    U = np.asarray(U, dtype=float).reshape(3)
    ph = xi - epsilon * U
    return np.exp(p0 * (np.sum(xi * xi, axis=-1) + np.sum(ph * ph, axis=-1)))
