"""Velocity grids and quadratures shared by the kinetic modules.

Two tensor-product grid kinds over the box |xi_i| <= L_v:

* ``gauss``   Gauss-Legendre nodes per axis.  Best for plain moments of
              smooth Gaussian-decaying integrands.
* ``uniform`` midpoint-offset uniform nodes (no node sits on any
              coordinate plane, so half-space splits along xi_3 are exact).
              Midpoint weights are spectrally accurate for Gaussian-decaying
              integrands by Poisson summation, and the even spacing is what
              the tricubic interpolation stencils want.

Both kinds avoid xi_3 = 0, which keeps backward-exit times finite.

The sphere rule is a product Gauss rule (Gauss-Legendre in cos(theta) times
uniform azimuth); the shell rule pairs a radial Gauss segment with it for
per-point collision integrals in spherical coordinates.
"""

from __future__ import annotations

import numpy as np


class InterpolationOutOfRange(Exception):
    """Raised when out-of-box interpolation queries exceed the caller's allowance."""


def gauss_axis(n, L):
    """Gauss-Legendre nodes/weights on [-L, L]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return x * L, w * L


def uniform_axis(n, L):
    """Midpoint-offset uniform nodes on (-L, L): -L + (i + 1/2) h, h = 2L/n."""
    h = 2.0 * L / n
    x = -L + (np.arange(n) + 0.5) * h
    w = np.full(n, h)
    return x, w


class VelocityGrid:
    """Tensor-product velocity grid with quadrature weights.

    Attributes
    ----------
    xi : (N, 3) node coordinates, N = n_v**3
    w : (N,) quadrature weights
    x1d, w1d : per-axis nodes and weights (shared by all three axes)
    """

    def __init__(self, n_v=32, L_v=8.0, kind="gauss"):
        if kind == "gauss":
            x, w = gauss_axis(n_v, L_v)
        elif kind == "uniform":
            x, w = uniform_axis(n_v, L_v)
        else:
            raise ValueError(f"unknown grid kind {kind!r}")
        self.n_v = int(n_v)
        self.L_v = float(L_v)
        self.kind = kind
        self.x1d = x
        self.w1d = w
        X1, X2, X3 = np.meshgrid(x, x, x, indexing="ij")
        self.xi = np.stack([X1.ravel(), X2.ravel(), X3.ravel()], axis=1)
        W1, W2, W3 = np.meshgrid(w, w, w, indexing="ij")
        self.w = (W1 * W2 * W3).ravel()
        self.shape = (n_v, n_v, n_v)
        if np.any(np.abs(self.x1d) < 1e-13):
            raise ValueError("grid must not place nodes on coordinate planes")
        self.sphere_nodes, self.sphere_weights = sphere_quadrature()

    @property
    def n_nodes(self):
        return self.xi.shape[0]

    def integrate(self, values):
        """Quadrature of a node-sampled integrand (last axis = node index)."""
        return np.asarray(values) @ self.w

    def inner(self, f, g):
        return np.sum(self.w * np.asarray(f) * np.asarray(g))

    def norm(self, f):
        return float(np.sqrt(np.maximum(self.inner(f, f), 0.0)))

    def outgoing_mask(self):
        """xi_3 > 0 (into the domain at the wall x_3 = 0)."""
        return self.xi[:, 2] > 0

    def incoming_mask(self):
        return self.xi[:, 2] < 0

    def as_field(self, values):
        return np.asarray(values).reshape(self.shape)

    # -- tensor Lagrange interpolation -----------------------------------

    def _axis_stencil(self, q, p):
        """Base index of the p-point stencil per query along one axis."""
        x = self.x1d
        n = x.size
        idx = np.searchsorted(x, q)
        return np.clip(idx - p // 2, 0, n - p)

    @staticmethod
    def _lagrange_weights(t, s, deriv=False):
        """Lagrange weights (M, p) for stencil nodes t (M, p) at points s (M,)."""
        M, p = t.shape
        w = np.empty((M, p))
        for j in range(p):
            if not deriv:
                num = np.ones(M)
                for k in range(p):
                    if k != j:
                        num *= s - t[:, k]
            else:
                num = np.zeros(M)
                for m in range(p):
                    if m == j:
                        continue
                    term = np.ones(M)
                    for k in range(p):
                        if k != j and k != m:
                            term *= s - t[:, k]
                    num += term
            den = np.ones(M)
            for k in range(p):
                if k != j:
                    den *= t[:, j] - t[:, k]
            w[:, j] = num / den
        return w

    def interpolate(self, values, points, tally=None, deriv_axis=None, stencil=4):
        """Tensor Lagrange interpolation of a grid function at arbitrary points.

        ``stencil`` is the per-axis width (4 = tricubic, 6 = triquintic).
        ``values`` may also be stacked as (K, N) to interpolate several grid
        functions at the same points while building the weights once.
        Out-of-box points contribute 0 and are counted in ``tally`` (a dict
        with key 'dropped') following the drop-and-tally policy.
        ``deriv_axis`` in {0,1,2} returns the partial derivative instead.
        """
        p = int(stencil)
        if p < 2 or p > self.n_v:
            raise ValueError(f"stencil width {p} not supported on n_v={self.n_v}")
        V = np.asarray(values, dtype=float)
        stacked = V.ndim > 1 and V.shape != self.shape
        flat = V.reshape(-1, self.n_nodes) if stacked else V.reshape(1, -1)
        P = np.atleast_2d(np.asarray(points, dtype=float))
        M = P.shape[0]
        L = self.L_v
        inside = np.all((P >= -L) & (P <= L), axis=1)
        # clamp queries to the node hull; points between the box edge and the
        # outermost node are extrapolated by the edge stencil
        lo, hi = self.x1d[0], self.x1d[-1]
        Q = np.clip(P, lo, hi)
        if tally is not None:
            tally["dropped"] = tally.get("dropped", 0) + int(np.sum(~inside))
        if not np.any(inside):
            out = np.zeros((flat.shape[0], M))
            return out if stacked else out[0]
        wts = []
        bases = []
        for ax in range(3):
            q = Q[:, ax]
            base = self._axis_stencil(q, p)
            t = self.x1d[base[:, None] + np.arange(p)[None, :]]
            w = self._lagrange_weights(t, q, deriv=(deriv_axis == ax))
            wts.append(w)
            bases.append(base)
        n = self.n_v
        acc = np.zeros((flat.shape[0], M))
        for i in range(p):
            wi = wts[0][:, i]
            ii = (bases[0] + i) * n * n
            for j in range(p):
                wij = wi * wts[1][:, j]
                jj = ii + (bases[1] + j) * n
                for k in range(p):
                    acc += (wij * wts[2][:, k]) * flat[:, jj + (bases[2] + k)]
        out = np.where(inside, acc, 0.0)
        return out if stacked else out[0]


def halfspace_gauss(n=32, L=8.0, sign=-1):
    """Gauss-Legendre rule on the half-box {sign * xi_3 > 0}, |xi| <= L.

    Wall-flux integrands carry a |xi_3| factor whose kink sits exactly at
    xi_3 = 0; full-box rules stall near 1e-3 on it, while on the half-box the
    integrand is smooth and this rule reaches quadrature-exact accuracy.
    Returns (xi (N, 3), w (N,)).
    """
    x, w = np.polynomial.legendre.leggauss(n)
    xf, wf = x * L, w * L
    if sign < 0:
        x3, w3 = (x - 1.0) * (L / 2.0), w * (L / 2.0)
    else:
        x3, w3 = (x + 1.0) * (L / 2.0), w * (L / 2.0)
    X1, X2, X3 = np.meshgrid(xf, xf, x3, indexing="ij")
    W1, W2, W3 = np.meshgrid(wf, wf, w3, indexing="ij")
    xi = np.stack([X1.ravel(), X2.ravel(), X3.ravel()], axis=1)
    return xi, (W1 * W2 * W3).ravel()


def sphere_quadrature(n_theta=16, n_phi=32):
    """Product Gauss sphere rule: nodes (S, 3) and weights summing to 4 pi."""
    c, wc = np.polynomial.legendre.leggauss(n_theta)
    phi = 2.0 * np.pi * np.arange(n_phi) / n_phi
    wphi = 2.0 * np.pi / n_phi
    s = np.sqrt(1.0 - c**2)
    dirs = np.empty((n_theta * n_phi, 3))
    wts = np.empty(n_theta * n_phi)
    k = 0
    for i in range(n_theta):
        dirs[k : k + n_phi, 0] = s[i] * np.cos(phi)
        dirs[k : k + n_phi, 1] = s[i] * np.sin(phi)
        dirs[k : k + n_phi, 2] = c[i]
        wts[k : k + n_phi] = wc[i] * wphi
        k += n_phi
    return dirs, wts


def half_sphere_split_quadrature(n_half=10, n_phi=16):
    """Sphere rule split at the equator: Gauss-Legendre in |cos| on (0, 1].

    Returns (dirs, w) covering both hemispheres; dirs[:, 2] holds the
    cosines. Integrands with a kink in cos(theta) at 0 (|u . omega| factors)
    are smooth on each half, so the rule converges spectrally where a global
    rule would crawl.
    """
    c, wc = np.polynomial.legendre.leggauss(n_half)
    c = 0.5 * (c + 1.0)  # map to (0,1)
    wc = 0.5 * wc
    cos_all = np.concatenate([c, -c])
    w_all = np.concatenate([wc, wc])
    phi = 2.0 * np.pi * np.arange(n_phi) / n_phi
    wphi = 2.0 * np.pi / n_phi
    s = np.sqrt(1.0 - cos_all**2)
    n_c = cos_all.size
    dirs = np.empty((n_c * n_phi, 3))
    wts = np.empty(n_c * n_phi)
    k = 0
    for i in range(n_c):
        dirs[k : k + n_phi, 0] = s[i] * np.cos(phi)
        dirs[k : k + n_phi, 1] = s[i] * np.sin(phi)
        dirs[k : k + n_phi, 2] = cos_all[i]
        wts[k : k + n_phi] = w_all[i] * wphi
        k += n_phi
    return dirs, wts


def radial_segment(n_r=32, R=14.0):
    """Gauss-Legendre radial nodes/weights on [0, R]."""
    x, w = np.polynomial.legendre.leggauss(n_r)
    return 0.5 * R * (x + 1.0), 0.5 * R * w


def rotate_frame(axis):
    """Orthonormal frame (e1, e2, axis_hat) for each axis vector (M, 3)."""
    a = np.atleast_2d(axis)
    n = a / np.linalg.norm(a, axis=1, keepdims=True)
    # pick the least-aligned coordinate axis as helper
    helper = np.zeros_like(n)
    helper[np.arange(len(n)), np.argmin(np.abs(n), axis=1)] = 1.0
    e1 = np.cross(n, helper)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(n, e1)
    return e1, e2, n
