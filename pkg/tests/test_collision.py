import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.sparse.linalg import eigsh

from hydrokin import collision as co
from hydrokin.maxwellian import sqrt_mu0, BadTemperature
from hydrokin.vgrid import VelocityGrid

vec3 = st.lists(st.floats(-5.0, 5.0), min_size=3, max_size=3).map(np.array)


def smooth_field(grid, sm, coeffs):
    phi = grid.xi
    c = coeffs
    return (c[0] + c[1] * phi[:, 0] + c[2] * phi[:, 1] + c[3] * phi[:, 2]
            + c[4] * phi[:, 0] * phi[:, 1] + c[5] * np.sum(phi**2, 1)
            + c[6] * np.exp(-0.2 * np.sum((phi - [0.5, 0.0, 0.3]) ** 2, 1))) * sm


# -- collision frequency ----------------------------------------------------

def test_nu_at_zero():
    assert abs(co.nu_of_speed(0.0)[0] - 4.0 * np.sqrt(2.0 * np.pi)) < 1e-12


def test_nu_linear_asymptote():
    # nu ~ 2 pi |phi| for large speeds
    assert abs(co.nu_of_speed(8.0)[0] / (2.0 * np.pi * 8.0) - 1.0) < 0.02


def test_nu_radial_symmetry(tables12):
    a = co.nu_eval(tables12, np.array([2.0, 0.0, 0.0]))
    b = co.nu_eval(tables12, np.array([0.0, 0.0, 2.0]))
    assert abs(a[0] - b[0]) < 1e-10


def test_nu_positive_and_bracketed(tables16):
    # nu(phi) comparable to <phi> = sqrt(1 + |phi|^2) on the grid
    br = np.sqrt(1.0 + tables16.speed**2)
    assert np.all(tables16.nu > 0)
    assert np.all(tables16.nu / br > 2.0)
    assert np.all(tables16.nu / br < 4.0 * np.sqrt(2.0 * np.pi))


def test_nu_eval_stale_drift(tables12):
    with pytest.raises(co.TablesStale):
        co.nu_eval(tables12, np.zeros(3), eps_U=(0.01, 0.0, 0.0))


@given(r=st.floats(0.0, 12.0))
def test_nu_matches_series_limit(r):
    # closed form stays between its r=0 value and the linear growth bound
    v = co.nu_of_speed(r)[0]
    assert v >= 4.0 * np.sqrt(2.0 * np.pi) - 1e-12
    assert v <= 4.0 * np.sqrt(2.0 * np.pi) + 2.0 * np.pi * (r + 1.0)


# -- kernels (closed forms) -------------------------------------------------

@settings(max_examples=60)
@given(xi=vec3, xs=vec3)
def test_k2_kernel_symmetric(xi, xs):
    if np.linalg.norm(xi - xs) < 1e-3:
        return
    a = co.k2_kernel(xi[None, :], xs[None, :])[0]
    b = co.k2_kernel(xs[None, :], xi[None, :])[0]
    assert abs(a - b) <= 1e-12 * max(abs(a), 1e-30)


@settings(max_examples=60)
@given(xi=vec3, xs=vec3)
def test_k2_kernel_exponent_forms_agree(xi, xs):
    # -|V|^2/8 - zeta_par^2/2 == -(phi.Vhat)^2/2 - (phi.V)/2 - |V|^2/4
    V = xs - xi
    vn = np.linalg.norm(V)
    if vn < 1e-3:
        return
    a = co.k2_kernel(xi[None, :], xs[None, :])[0]
    pr = np.dot(xi, V) / vn
    b = co.C0 / vn * np.exp(-0.5 * pr**2 - 0.5 * np.dot(xi, V) - vn**2 / 4.0)
    assert abs(a - b) <= 1e-10 * max(abs(a), 1e-30)


@settings(max_examples=60)
@given(xi=vec3, xs=vec3)
def test_k1_kernel_symmetric(xi, xs):
    a = co.k1_kernel(xi[None, :], xs[None, :])[0]
    b = co.k1_kernel(xs[None, :], xi[None, :])[0]
    assert abs(a - b) <= 1e-12 * max(abs(a), 1e-30)


def test_zeta_split_reassembles_speed():
    rng = np.random.default_rng(7)
    phi = rng.standard_normal((40, 3))
    V = rng.standard_normal((40, 3))
    zpar = co.zeta_par(phi, V) - 0.5 * np.linalg.norm(V, axis=1)
    zperp = co.zeta_perp(phi, V)
    q = zpar**2 + np.sum(zperp**2, axis=1)
    assert np.max(np.abs(q - np.sum(phi**2, axis=1))) < 1e-10


# -- kernel matrices and L --------------------------------------------------

def test_k1_matrix_eigenfunction(tables16):
    # K1 sqrt(mu) = nu sqrt(mu)
    sm = tables16.sqrt_mu
    r = tables16.k1_apply(sm) - tables16.nu * sm
    assert tables16.grid.norm(r) < 3e-3 * tables16.grid.norm(tables16.nu * sm)


def test_k2_matrix_eigenfunction(tables16):
    # K2 sqrt(mu) = 2 nu sqrt(mu)
    sm = tables16.sqrt_mu
    r = tables16.k2_apply(sm) - 2.0 * tables16.nu * sm
    assert tables16.grid.norm(r) < 1e-3 * tables16.grid.norm(2.0 * tables16.nu * sm)


def test_L_annihilates_invariants(tables16):
    sm = tables16.sqrt_mu
    phi = tables16.phi
    for f in (sm, phi[:, 0] * sm, phi[:, 1] * sm, phi[:, 2] * sm,
              np.sum(phi**2, 1) * sm):
        total, _, _, _ = co.L_apply(tables16, f)
        assert np.max(np.abs(total)) < 1e-5


def test_L_matrix_symmetric(tables16):
    L = tables16.L_matrix
    assert np.max(np.abs(L - L.T)) < 1e-10


def test_L_self_adjoint(tables16, rng):
    g = tables16.grid
    sm = tables16.sqrt_mu
    f = smooth_field(g, sm, rng.standard_normal(7))
    h = smooth_field(g, sm, rng.standard_normal(7))
    lhs = g.inner(co.L_apply(tables16, f)[0], h)
    rhs = g.inner(f, co.L_apply(tables16, h)[0])
    assert abs(lhs - rhs) < 1e-8 * max(1.0, abs(lhs))


def test_L_positive_semidefinite(tables16):
    vals = eigsh(tables16.L_matrix, k=6, which="SA",
                 return_eigenvectors=False, tol=1e-7)
    assert np.min(vals) > -1e-8


def test_L_coercive_on_complement(tables16):
    # observed grid constant ~0.87; positivity is the structural claim
    assert co.spectral_gap_probe(tables16, n_draws=100, seed=0) > 0.3


def test_L_apply_stale_drift(tables16):
    with pytest.raises(co.TablesStale):
        co.L_apply(tables16, tables16.sqrt_mu, eps_U=(0.0, 0.0, 0.05))


def test_L_parts_reassemble(tables16, rng):
    # total comes from the symmetrized deflated matrix; the raw parts
    # reassemble it up to the quadrature defect of the raw operator
    f = smooth_field(tables16.grid, tables16.sqrt_mu, rng.standard_normal(7))
    total, nuf, k1f, k2f = co.L_apply(tables16, f)
    raw = nuf + k1f - k2f
    assert tables16.grid.norm(total - raw) < 5e-2 * max(1.0, tables16.grid.norm(raw))


# -- K2 two routes ----------------------------------------------------------

def test_k2_zeta_vs_direct_20_points():
    rng = np.random.default_rng(11)

    def f(p):
        p = np.atleast_2d(p)
        return np.exp(-0.3 * np.sum(p**2, axis=-1)) * (1.0 + 0.2 * p[:, 0] - 0.1 * p[:, 1] * p[:, 2])

    for _ in range(20):
        xi = rng.uniform(-3.0, 3.0, 3)
        a = co.k2_point_zeta(f, xi)
        b = co.k2_point_direct(f, xi)
        assert abs(a - b) <= 1e-5 * abs(a)


# -- Gamma on the grid ------------------------------------------------------

def test_gamma_equilibrium(tables12):
    sm = tables12.sqrt_mu
    vals, tally = co.gamma_bilinear(tables12, sm, sm)
    assert np.max(np.abs(vals)) < 1e-6
    assert tally["dropped"] > 0


def test_gamma_symmetry(tables12, rng):
    g = tables12.grid
    sm = tables12.sqrt_mu
    f = smooth_field(g, sm, rng.standard_normal(7))
    h = smooth_field(g, sm, rng.standard_normal(7))
    small = dict(rule=(4, 6.0, 4, 6), omega_rule=(3, 6))
    a, _ = co.gamma_bilinear(tables12, f, h, **small)
    b, _ = co.gamma_bilinear(tables12, h, f, **small)
    assert np.max(np.abs(a - b)) < 1e-10


def test_gamma_collision_invariants(tables16, rng):
    # mass/momentum/energy pairings vanish at the measured quadrature
    # tolerance of the default rule (worst observed 4.3e-3, energy channel)
    g = tables16.grid
    sm = tables16.sqrt_mu
    f = smooth_field(g, sm, 0.5 * rng.standard_normal(7))
    h = smooth_field(g, sm, 0.5 * rng.standard_normal(7))
    vals, _ = co.gamma_bilinear(tables16, f, h)
    scale = g.norm(vals)
    for psi in (np.ones(g.n_nodes), g.xi[:, 0], g.xi[:, 1], g.xi[:, 2],
                np.sum(g.xi**2, 1)):
        assert abs(g.inner(vals, psi * sm)) < 2e-2 * scale


def test_gamma_point_equilibrium_quadrature():
    # independent 5D route: Gamma(sqrt mu, sqrt mu)(xi) = 0 pointwise
    def f(p):
        return sqrt_mu0(p)
    v = co.gamma_point(f, f, np.array([0.7, -0.4, 1.1]),
                       rule=(16, 10.0, 12, 24), omega_rule=(8, 12))
    assert abs(v) < 1e-12


# -- hydrodynamic projection ------------------------------------------------

def test_project_P_equilibrium_moments(tables16):
    tri, Pf, rem = co.project_P(tables16, tables16.sqrt_mu)
    assert abs(tri.a - 1.0) < 1e-6
    assert np.max(np.abs(tri.b)) < 1e-8
    assert abs(tri.c) < 1e-6
    assert tables16.grid.norm(rem) < 1e-6


def test_project_P_momentum_moment(tables16):
    f = tables16.phi[:, 0] * tables16.sqrt_mu
    tri, _, _ = co.project_P(tables16, f)
    assert np.max(np.abs(tri.b - np.array([1.0, 0.0, 0.0]))) < 1e-6
    assert abs(tri.a) < 1e-8 and abs(tri.c) < 1e-8


def test_project_P_idempotent(tables16, rng):
    f = rng.standard_normal(tables16.grid.n_nodes) * tables16.sqrt_mu
    _, Pf, _ = co.project_P(tables16, f)
    _, PPf, rem = co.project_P(tables16, Pf)
    assert np.max(np.abs(PPf - Pf)) < 1e-10
    assert np.max(np.abs(rem)) < 1e-10


def test_project_P_reconstructs_display_formula(tables16):
    # f with moments (a, b, c) = (2, (0.3, 0, 0), 0.7); P must return f
    phi = tables16.phi
    sm = tables16.sqrt_mu
    q = np.sum(phi**2, 1)
    f = (2.0 + 0.3 * phi[:, 0] + 0.7 * (q - 3.0) / 2.0) * sm
    tri, Pf, rem = co.project_P(tables16, f)
    assert abs(tri.a - 2.0) < 1e-6
    assert abs(tri.b[0] - 0.3) < 1e-6
    assert abs(tri.c - 0.7) < 1e-6
    assert np.max(np.abs(Pf - f)) < 1e-10
    assert np.max(np.abs(rem)) < 1e-10


def test_project_P_complement_orthogonal(tables16, rng):
    g = tables16.grid
    f = rng.standard_normal(g.n_nodes) * tables16.sqrt_mu
    _, Pf, rem = co.project_P(tables16, f)
    assert abs(g.inner(Pf, rem)) < 1e-10 * g.norm(f) ** 2


# -- diffuse-reflection projection ------------------------------------------

def test_boundary_projection_fixed_point():
    out = co.project_boundary(lambda p: sqrt_mu0(p))
    assert abs(out.coefficient - 1.0) < 1e-12


def test_boundary_projection_idempotent():
    out = co.project_boundary(lambda p: 0.3 * sqrt_mu0(p) + 0.01 * p[:, 0] * sqrt_mu0(p))
    out2 = co.project_boundary(out)
    assert abs(out2.coefficient - out.coefficient) < 1e-10


def test_boundary_projection_kills_odd():
    out = co.project_boundary(lambda p: p[:, 0] * sqrt_mu0(p))
    assert abs(out.coefficient) < 1e-12


def test_boundary_projection_grid_route(tables16):
    g = tables16.grid
    sm = sqrt_mu0(g.xi)
    out = co.project_boundary(sm, grid=g)
    assert np.max(np.abs(out - sm)) < 1e-12
    out2 = co.project_boundary(out, grid=g)
    assert np.max(np.abs(out2 - out)) < 1e-12


# -- viscosity solve --------------------------------------------------------

def test_solve_Aij_gram_tensor(tables16):
    A, eta0, c = co.solve_Aij(tables16)
    assert eta0 > 0
    eta, worst = co.gram_tensor_fit(tables16, A)
    assert worst <= 1e-2


def test_solve_Aij_eta0_golden(tables16):
    _, eta0, _ = co.solve_Aij(tables16)
    assert abs(eta0 - 0.089529) < 5e-4


def test_solve_Aij_isotropy(tables16):
    g = tables16.grid
    A, eta0, _ = co.solve_Aij(tables16)
    vals = [g.inner(co.ahat_source(tables16.phi, i, j), A[(i, j)])
            for (i, j) in [(0, 1), (1, 0), (0, 2), (1, 2)]]
    assert (max(vals) - min(vals)) / eta0 < 1e-3


def test_solve_Aij_offdiagonal_mean_vanishes(tables16):
    _, _, c = co.solve_Aij(tables16)
    for (i, j), v in c.items():
        if i != j:
            assert abs(v) < 1e-6


def test_solve_Aij_parity(tables16):
    g = tables16.grid
    A, _, _ = co.solve_Aij(tables16)
    F12 = g.as_field(A[(0, 1)])
    assert np.max(np.abs(F12 - F12[::-1, ::-1, ::-1])) < 1e-10
    F13 = g.as_field(A[(0, 2)])
    assert np.max(np.abs(F13 + F13[::-1, :, :])) < 1e-10


def test_invert_L_rejects_null_component(tables16):
    with pytest.raises(co.NullComponent):
        co.invert_L(tables16, tables16.sqrt_mu)


def test_invert_L_solution_in_range(tables16):
    rhs = co.ahat_source(tables16.phi, 0, 1)
    sol = co.invert_L(tables16, rhs)
    g = tables16.grid
    nc = np.max(np.abs(tables16.null_basis @ (g.w * sol)))
    assert nc < 1e-10
    assert g.norm(tables16.L_matrix @ sol - rhs) < 1e-6 * g.norm(rhs)


# -- moment orthogonality ---------------------------------------------------

def test_moment_orthogonality_pattern(tables16):
    rep = co.moment_orthogonality_check(tables16)
    assert rep["pattern_holds"]
    assert rep["I2_beta_a"] == 0.0
    assert rep["I1_beta_c"] == 0.0
    assert rep["I1_beta_a"] == -15.0
    assert abs(rep["grid_I1_beta_c"]) < 1e-3
    assert abs(rep["grid_I2_beta_a"]) < 1e-2
    assert abs(rep["grid_I1_beta_a"] + 15.0) < 1e-2


# -- wall-Maxwellian operator -----------------------------------------------

def test_kM2_reduces_to_k2():
    xi = np.array([[0.4, -0.2, 0.9], [1.5, 0.0, 0.0], [0.0, 2.0, -1.0]])
    xs = xi + np.array([[1.0, 0.5, -0.3], [0.0, 1.0, 0.0], [0.7, -0.7, 0.7]])
    a = co.kM2_kernel(xi, xs, TM=1.0 - 1e-9)
    b = co.k2_kernel(xi, xs)
    assert np.max(np.abs(a - b) / b) < 1e-5


def test_kM_rejects_bad_temperature():
    xi = np.zeros((1, 3))
    xs = np.ones((1, 3))
    with pytest.raises(BadTemperature):
        co.kM2_kernel(xi, xs, TM=0.4)


def test_LM_annihilates_wall_invariants():
    TM, eps_U = 0.9, np.array([0.003, 0.002, 0.0])

    def ratio(p):
        p = np.atleast_2d(p)
        mu_loc = (2.0 * np.pi) ** (-1.5) * np.exp(-0.5 * np.sum((p - eps_U) ** 2, -1))
        smM = (2.0 * np.pi * TM) ** (-0.75) * np.exp(-np.sum(p**2, -1) / (4.0 * TM))
        return mu_loc / smM

    xi = np.array([0.6, -0.3, 0.8])
    for poly in (lambda p: 1.0 + 0.0 * p[:, 0],
                 lambda p: p[:, 0],
                 lambda p: np.sum(p**2, -1)):
        total, _, _, _ = co.lm_point(lambda p: ratio(p) * poly(np.atleast_2d(p)),
                                     xi, TM, eps_U)
        assert abs(total) < 1e-8


def test_LM_kernel_envelope_golden(tables16):
    tabM = co.CollisionTables(tables16.grid, eps_U=(0.003, 0.002, 0.0),
                              TM=0.9, build_matrices=False)
    rep = co.LM_kernel_check(tabM)
    assert rep["rho0"] > 0.05
    assert rep["C"] <= rep["c_cap"]
    assert abs(rep["rho0_analytic"] - 0.12345679012345678) < 1e-12
    assert rep["nuM_min"] > 0


def test_LM_kernel_envelope_floor_violation(tables16):
    tabM = co.CollisionTables(tables16.grid, eps_U=(0.003, 0.002, 0.0),
                              TM=0.9, build_matrices=False)
    with pytest.raises(co.BoundViolated):
        co.LM_kernel_check(tabM, rho_floor=0.12)


# -- tables infrastructure --------------------------------------------------

def test_tables_require_uniform_grid():
    g = VelocityGrid(8, 6.0, kind="gauss")
    with pytest.raises(ValueError):
        co.CollisionTables(g, build_matrices=False)


def test_tables_cache_round_trip(tmp_path):
    g = VelocityGrid(8, 5.0, kind="uniform")
    rule = dict(band_rule=(6, 8.0, 8, 12), band_stencil=4)
    t1 = co.CollisionTables(g, cache_dir=str(tmp_path), **rule)
    assert len(list(tmp_path.glob("collision-tables-*.npz"))) == 1
    t2 = co.CollisionTables(g, cache_dir=str(tmp_path), **rule)
    assert np.array_equal(t1.L_matrix, t2.L_matrix)
    assert np.array_equal(t1.k2_matrix, t2.k2_matrix)


def test_grid_drift_changes_frequency():
    g = VelocityGrid(8, 5.0, kind="uniform")
    t = co.CollisionTables(g, eps_U=(0.2, 0.0, 0.0), build_matrices=False)
    v0 = t.nu_eval(np.array([[0.2, 0.0, 0.0]]))[0]
    assert abs(v0 - 4.0 * np.sqrt(2.0 * np.pi)) < 1e-12
