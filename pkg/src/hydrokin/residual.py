"""Navier-Stokes residual of the assembled expansion, computed two ways.

A finalized stack satisfies its layer equations by construction, so
substituting the assembled velocity and pressure into the Navier-Stokes
operator leaves only identifiable leftovers: convection pairs past the
truncation order, wall Taylor remainders of outer coefficients multiplying
layer factors, viscous terms deferred past the last solved order, the
projected tangential mean forcing, and the trailing time derivatives of the
deepest layer.  ``ns_residual_direct`` substitutes and differentiates the
summed fields; ``ns_residual_structural`` assembles the leftover groups one
by one.  Both land in the same weighted analytic norm, and their agreement
checks every absorbed index range of the construction at once.

Derivatives follow the shrinking-radius convention: the multi-index
alpha = (a0, a1, a2) means (eps_time d_t)^a0 d_x1^a1 d_x2^a2, with d_t read
off the stored towers, and each term is weighted by
tau(t)^|alpha| (1 + |alpha|)^9 / alpha!.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from . import fluid as fl

DEFAULT_KAPPAS = (1e-1, 3e-2, 1e-2, 3e-3, 1e-3)

U_TERMS = (
    "u_outer_pairs",
    "u_layer_grad_outer",
    "u_outer_grad_layer",
    "u_layer_pairs",
    "u_outer_vertical",
    "u_layer_vertical_outer",
    "u_layer_vertical_pairs",
    "u_viscous_tail",
    "u_mean_mode_forcing",
)
V_TERMS = (
    "v_outer_pairs",
    "v_layer_grad_outer",
    "v_outer_grad_layer",
    "v_layer_pairs",
    "v_outer_vertical",
    "v_layer_vertical_outer",
    "v_layer_vertical_pairs",
    "v_viscous_tail",
    "v_time_tail",
)


class _EvalCtx:
    """Cached composite-grid evaluations of one finalized stack's towers."""

    def __init__(self, stack):
        if not stack.finalized or stack.towers is None:
            raise fl.IncompleteStack("residual evaluation needs a finalized stack")
        self.stack = stack
        p = stack.params
        self.N = p.N
        self.K = stack.K
        self.delta = p.delta if stack.has_prandtl else 0.0
        self.nu = p.eta0 * p.kappa
        self.ctx = fl._Ctx(stack.towers, stack)
        self.comp = fl.CompositeGrid(stack.grid_e, stack.grid_z, self.delta, p.n_bulk, p.X_max)
        nk = 2 * self.K + 1
        self.zero_u = np.zeros((2, nk, nk, self.comp.P), complex)
        self.zero_s = np.zeros((nk, nk, self.comp.P), complex)
        self._lev = {}
        self._tot = {}
        self._rem = {}

    def lev(self, name, m, r, d=0):
        """Tower level r of name[m] on the composite grid, d normal derivatives.

        Layer fields are differentiated in the layer variable; callers keep
        track of the matching powers of delta.
        """
        key = (name, m, r, d)
        if key not in self._lev:
            raw = self.ctx.lev(name, m, r)
            layer = name in ("up", "vp", "pp")
            if d:
                grid = self.stack.grid_z if layer else self.stack.grid_e
                raw = grid.dnormal(raw, d)
            ev = self.comp.eval_prandtl if layer else self.comp.eval_euler
            self._lev[key] = ev(raw)
        return self._lev[key]

    def remainder(self, name, m, r, d, cap, k_lo=0):
        """d-th normal derivative of outer name[m] minus its wall Taylor part.

        Monomials x3^k/k! times the (k+d)-th wall trace are removed for
        k_lo <= k <= cap; a cap below k_lo removes nothing.
        """
        key = (name, m, r, d, cap, k_lo)
        if key not in self._rem:
            out = self.lev(name, m, r, d)
            if cap >= k_lo:
                out = out.copy()
                for k in range(k_lo, cap + 1):
                    tr = self.ctx.trace(name, m, r, k + d)
                    out -= self.comp.xpow[k] * tr[..., None]
            self._rem[key] = out
        return self._rem[key]

    def total(self, which, r, d=0):
        """One assembled component ("u", "v" or "p") at tower level r."""
        key = (which, r, d)
        if key not in self._tot:
            dl, N = self.delta, self.N
            hp = self.stack.has_prandtl
            if which == "u":
                out = self.zero_u.copy()
                for i in range(N + 1):
                    out += dl**i * self.lev("ue", i, r, d)
                    if hp:
                        out += dl ** (i - d) * self.lev("up", i, r, d)
            elif which == "v":
                out = self.zero_s.copy()
                for i in range(N + 1):
                    out += dl**i * self.lev("ve", i, r, d)
                if hp:
                    for i in range(1, N + 2):
                        out += dl ** (i - d) * self.lev("vp", i, r, d)
            else:
                out = self.zero_s.copy()
                for i in range(N + 1):
                    out += dl**i * self.lev("pe", i, r, d)
                    if hp:
                        out += dl ** (i - d) * self.lev("pp", i, r, d)
            self._tot[key] = out
        return self._tot[key]


def _direct_parts(ctx, a0):
    """Tangential NS, wall-normal NS, and divergence arrays at time level a0."""
    C = fl._comb_row(a0)
    ns_u = ctx.total("u", a0 + 1).copy()
    ns_v = ctx.total("v", a0 + 1).copy()
    for a in range(a0 + 1):
        b = a0 - a
        u_a = ctx.total("u", a)
        v_a = ctx.total("v", a)
        u_b = ctx.total("u", b)
        v_b = ctx.total("v", b)
        ns_u += C[a] * (
            fl.mode_product(u_a[0], fl.mode_dx(u_b, 1))
            + fl.mode_product(u_a[1], fl.mode_dx(u_b, 2))
            + fl.mode_product(v_a, ctx.total("u", b, 1))
        )
        ns_v += C[a] * (
            fl.mode_product(u_a[0], fl.mode_dx(v_b, 1))
            + fl.mode_product(u_a[1], fl.mode_dx(v_b, 2))
            + fl.mode_product(v_a, ctx.total("v", b, 1))
        )
    p_r = ctx.total("p", a0)
    ns_u += np.stack([fl.mode_dx(p_r, 1), fl.mode_dx(p_r, 2)])
    ns_v += ctx.total("p", a0, 1)
    ns_u -= ctx.nu * (fl.mode_laplacian_par(ctx.total("u", a0)) + ctx.total("u", a0, 2))
    ns_v -= ctx.nu * (fl.mode_laplacian_par(ctx.total("v", a0)) + ctx.total("v", a0, 2))
    u_r = ctx.total("u", a0)
    div = fl.mode_dx(u_r[0], 1) + fl.mode_dx(u_r[1], 2) + ctx.total("v", a0, 1)
    return ns_u, ns_v, div


def _u_groups(ctx, a0):
    """Leftover tangential groups at time level a0, keyed by name."""
    N, dl = ctx.N, ctx.delta
    hp = ctx.stack.has_prandtl
    g = {name: ctx.zero_u.copy() for name in U_TERMS}
    C = fl._comb_row(a0)
    splits = [(a, a0 - a, C[a]) for a in range(a0 + 1)]

    for i in range(N + 1):
        for j in range(N + 1):
            w = dl ** (i + j)
            if i + j > N:
                # outer convection pairs past the truncation order
                for a, b, c in splits:
                    ue_i = ctx.lev("ue", i, a)
                    g["u_outer_pairs"] += (w * c) * (
                        fl.mode_product(ue_i[0], fl.mode_dx(ctx.lev("ue", j, b), 1))
                        + fl.mode_product(ue_i[1], fl.mode_dx(ctx.lev("ue", j, b), 2))
                        + fl.mode_product(ctx.lev("ve", i, a), ctx.lev("ue", j, b, 1))
                    )
            if not hp:
                continue
            cap = N - i - j
            for a, b, c in splits:
                up_i = ctx.lev("up", i, a)
                # layer advecting the unabsorbed outer Taylor remainder
                rem = ctx.remainder("ue", j, b, 0, cap)
                g["u_layer_grad_outer"] += (w * c) * (
                    fl.mode_product(up_i[0], fl.mode_dx(rem, 1))
                    + fl.mode_product(up_i[1], fl.mode_dx(rem, 2))
                )
                # outer remainder advecting the layer
                rem = ctx.remainder("ue", i, a, 0, cap)
                g["u_outer_grad_layer"] += (w * c) * (
                    fl.mode_product(rem[0], fl.mode_dx(ctx.lev("up", j, b), 1))
                    + fl.mode_product(rem[1], fl.mode_dx(ctx.lev("up", j, b), 2))
                )
                # outer vertical remainder against the layer shear
                rem = ctx.remainder("ve", i, a, 0, N + 1 - i - j, 1 if i == 0 else 0)
                g["u_outer_vertical"] += (dl ** (i + j - 1) * c) * fl.mode_product(
                    rem, ctx.lev("up", j, b, 1)
                )
                if i + j > N:
                    g["u_layer_pairs"] += (w * c) * (
                        fl.mode_product(up_i[0], fl.mode_dx(ctx.lev("up", j, b), 1))
                        + fl.mode_product(up_i[1], fl.mode_dx(ctx.lev("up", j, b), 2))
                    )
    if hp:
        for i in range(1, N + 2):
            for j in range(N + 1):
                for a, b, c in splits:
                    # layer vertical velocity against the outer shear remainder
                    rem = ctx.remainder("ue", j, b, 1, N - i - j)
                    g["u_layer_vertical_outer"] += (dl ** (i + j) * c) * fl.mode_product(
                        ctx.lev("vp", i, a), rem
                    )
                    if i + j > N + 1:
                        g["u_layer_vertical_pairs"] += (dl ** (i + j - 1) * c) * fl.mode_product(
                            ctx.lev("vp", i, a), ctx.lev("up", j, b, 1)
                        )
    # viscous terms deferred past the last solved order
    for i in range(max(0, N - 1), N + 1):
        term = fl.mode_laplacian_par(ctx.lev("ue", i, a0)) + ctx.lev("ue", i, a0, 2)
        if hp:
            term = term + fl.mode_laplacian_par(ctx.lev("up", i, a0))
        g["u_viscous_tail"] -= dl ** (i + 2) * term
    # tangential mean forcing removed by the pressure projection
    for m in range(1, N + 1):
        conv = fl.euler_conv(ctx.ctx, m, a0, "u")
        g["u_mean_mode_forcing"] += dl**m * ctx.comp.eval_euler(fl.mode_mean_part(conv))
    return g


def _v_groups(ctx, a0):
    """Leftover wall-normal groups at time level a0, keyed by name."""
    N, dl = ctx.N, ctx.delta
    hp = ctx.stack.has_prandtl
    g = {name: ctx.zero_s.copy() for name in V_TERMS}
    C = fl._comb_row(a0)
    splits = [(a, a0 - a, C[a]) for a in range(a0 + 1)]

    for i in range(N + 1):
        for j in range(N + 1):
            if i + j > N:
                for a, b, c in splits:
                    ue_i = ctx.lev("ue", i, a)
                    g["v_outer_pairs"] += (dl ** (i + j) * c) * (
                        fl.mode_product(ue_i[0], fl.mode_dx(ctx.lev("ve", j, b), 1))
                        + fl.mode_product(ue_i[1], fl.mode_dx(ctx.lev("ve", j, b), 2))
                        + fl.mode_product(ctx.lev("ve", i, a), ctx.lev("ve", j, b, 1))
                    )
            if not hp:
                continue
            for a, b, c in splits:
                up_i = ctx.lev("up", i, a)
                rem = ctx.remainder("ve", j, b, 0, N - 1 - i - j)
                g["v_layer_grad_outer"] += (dl ** (i + j) * c) * (
                    fl.mode_product(up_i[0], fl.mode_dx(rem, 1))
                    + fl.mode_product(up_i[1], fl.mode_dx(rem, 2))
                )
    if hp:
        for i in range(N + 1):
            for j in range(1, N + 2):
                w = dl ** (i + j)
                for a, b, c in splits:
                    rem = ctx.remainder("ue", i, a, 0, N - 1 - i - j)
                    g["v_outer_grad_layer"] += (w * c) * (
                        fl.mode_product(rem[0], fl.mode_dx(ctx.lev("vp", j, b), 1))
                        + fl.mode_product(rem[1], fl.mode_dx(ctx.lev("vp", j, b), 2))
                    )
                    rem = ctx.remainder("ve", i, a, 0, N - i - j, 1 if i == 0 else 0)
                    g["v_outer_vertical"] += (dl ** (i + j - 1) * c) * fl.mode_product(
                        rem, ctx.lev("vp", j, b, 1)
                    )
                    if i + j >= N:
                        up_i = ctx.lev("up", i, a)
                        g["v_layer_pairs"] += (w * c) * (
                            fl.mode_product(up_i[0], fl.mode_dx(ctx.lev("vp", j, b), 1))
                            + fl.mode_product(up_i[1], fl.mode_dx(ctx.lev("vp", j, b), 2))
                        )
        for i in range(1, N + 2):
            for j in range(N + 1):
                for a, b, c in splits:
                    rem = ctx.remainder("ve", j, b, 1, N - 1 - i - j)
                    g["v_layer_vertical_outer"] += (dl ** (i + j) * c) * fl.mode_product(
                        ctx.lev("vp", i, a), rem
                    )
            for j in range(1, N + 2):
                if i + j > N:
                    for a, b, c in splits:
                        g["v_layer_vertical_pairs"] += (dl ** (i + j - 1) * c) * fl.mode_product(
                            ctx.lev("vp", i, a), ctx.lev("vp", j, b, 1)
                        )
        for j in (N, N + 1):
            if j >= 1:
                g["v_viscous_tail"] -= dl**j * ctx.lev("vp", j, a0, 2)
                g["v_time_tail"] += dl**j * ctx.lev("vp", j, a0 + 1)
        for j in range(max(1, N - 2), N + 2):
            g["v_viscous_tail"] -= dl ** (j + 2) * fl.mode_laplacian_par(ctx.lev("vp", j, a0))
    for i in range(max(0, N - 1), N + 1):
        g["v_viscous_tail"] -= dl ** (i + 2) * (
            fl.mode_laplacian_par(ctx.lev("ve", i, a0)) + ctx.lev("ve", i, a0, 2)
        )
    return g


def _tail_estimate(by_order):
    if len(by_order) < 2:
        return math.inf if by_order and by_order[-1] else 0.0
    last, prev = by_order[-1], by_order[-2]
    if last == 0.0:
        return 0.0
    if prev <= last:
        return math.inf
    q = last / prev
    return last * q / (1.0 - q)


def _finite(x):
    return x if math.isfinite(x) else None


@dataclass
class ResidualReport:
    """Weighted-norm summary of one residual evaluation."""

    kappa: float
    N: int
    t: float
    p: float
    ns_par: float
    ns_normal: float
    ns: float
    div: float
    total: float
    tails: dict
    by_order: dict
    per_term: dict = None
    structural: dict = None
    two_route: dict = None

    def to_dict(self):
        out = {
            "kappa": self.kappa,
            "N": self.N,
            "t": self.t,
            "p": "inf" if math.isinf(self.p) else self.p,
            "ns_par": self.ns_par,
            "ns_normal": self.ns_normal,
            "ns": self.ns,
            "div": self.div,
            "total": self.total,
            "tails": {k: _finite(v) for k, v in self.tails.items()},
            "by_order": {k: list(v) for k, v in self.by_order.items()},
        }
        if self.per_term is not None:
            out["per_term"] = dict(self.per_term)
        if self.structural is not None:
            out["structural"] = dict(self.structural)
        if self.two_route is not None:
            out["two_route"] = dict(self.two_route)
        return out


def _evaluate(stack, ledger, t, p, structural):
    ctx = _EvalCtx(stack)
    params = stack.params
    ledger = params.ledger() if ledger is None else ledger
    t = stack.t if t is None else float(t)
    ledger.tau(t)
    p = float(p)
    if p != 2.0 and not math.isinf(p):
        raise ValueError("p must be 2 or inf")
    eps = params.eps_time
    comp = ctx.comp
    kk = fl.kvec(ctx.K)
    ik1 = (1j * kk.astype(float))[:, None, None]
    ik2 = (1j * kk.astype(float))[None, :, None]
    n_ord = ledger.max_order
    keys = ["ns_par", "ns_normal", "div"]
    if structural:
        keys += ["s_par", "s_normal", "d_par", "d_normal"]
        keys += list(U_TERMS) + list(V_TERMS)
    by_order = {key: [0.0] * (n_ord + 1) for key in keys + ["ns", "s", "d", "total"]}

    for a0 in range(n_ord + 1):
        du, dv, ddiv = _direct_parts(ctx, a0)
        arrays = {"ns_par": du, "ns_normal": dv, "div": ddiv}
        if structural:
            ug = _u_groups(ctx, a0)
            vg = _v_groups(ctx, a0)
            su = ctx.zero_u
            for name in U_TERMS:
                arrays[name] = ug[name]
                su = su + ug[name]
            sv = ctx.zero_s
            for name in V_TERMS:
                arrays[name] = vg[name]
                sv = sv + vg[name]
            arrays["s_par"] = su
            arrays["s_normal"] = sv
            arrays["d_par"] = du - su
            arrays["d_normal"] = dv - sv
        scale = eps**a0
        for a1 in range(n_ord - a0 + 1):
            f1 = ik1**a1
            for a2 in range(n_ord - a0 - a1 + 1):
                wgt = ledger.coeff((a0, a1, a2), t) * scale
                fac = f1 * ik2**a2
                n = a0 + a1 + a2
                vals = {}
                for key, arr in arrays.items():
                    m = arr * fac
                    vals[key] = comp.l2(m) if p == 2.0 else comp.linf(m)
                for key, v in vals.items():
                    by_order[key][n] += wgt * v
                combine = math.hypot if p == 2.0 else max
                ns = combine(vals["ns_par"], vals["ns_normal"])
                by_order["ns"][n] += wgt * ns
                by_order["total"][n] += wgt * (ns + vals["div"])
                if structural:
                    by_order["s"][n] += wgt * combine(vals["s_par"], vals["s_normal"])
                    by_order["d"][n] += wgt * combine(vals["d_par"], vals["d_normal"])

    sums = {key: float(sum(v)) for key, v in by_order.items()}
    tails = {key: _tail_estimate(by_order[key]) for key in ("ns_par", "ns_normal", "ns", "div", "total")}
    report = ResidualReport(
        kappa=params.kappa,
        N=params.N,
        t=t,
        p=p,
        ns_par=sums["ns_par"],
        ns_normal=sums["ns_normal"],
        ns=sums["ns"],
        div=sums["div"],
        total=sums["total"],
        tails=tails,
        by_order=by_order,
    )
    if structural:
        report.per_term = {name: sums[name] for name in U_TERMS + V_TERMS}
        report.structural = {"par": sums["s_par"], "normal": sums["s_normal"], "ns": sums["s"]}
        report.two_route = {
            "defect_par": sums["d_par"],
            "defect_normal": sums["d_normal"],
            "rel_par": sums["d_par"] / (1.0 + sums["s_par"]),
            "rel_normal": sums["d_normal"] / (1.0 + sums["s_normal"]),
        }
    return report


def ns_residual_direct(stack, ledger=None, t=None, p=2):
    """Residual norms from direct substitution of the assembled fields."""
    return _evaluate(stack, ledger, t, p, structural=False)


def ns_residual_structural(stack, ledger=None, t=None, p=2):
    """Residual norms assembled from the leftover construction groups.

    The report also carries the direct norms, the per-group norms, and the
    two-route defect; agreement of the routes validates every absorbed index
    range of the construction.  Valid only for towers built by the layer
    recursion, not for closed-form test stacks.
    """
    return _evaluate(stack, ledger, t, p, structural=True)


def fit_slope(kappas, totals, n_fit=3):
    """Log-log slope and intercept fitted on the n_fit smallest kappas."""
    ks = np.asarray(kappas, float)
    ts = np.asarray(totals, float)
    order = np.argsort(ks)[:n_fit]
    co = np.polyfit(np.log(ks[order]), np.log(ts[order]), 1)
    return float(co[0]), float(co[1])


@dataclass
class SweepResult:
    """Residual reports across kappa plus the fitted convergence slope."""

    reports: list
    slope: float
    intercept: float
    n_fit: int

    def to_dict(self):
        return {
            "slope": self.slope,
            "intercept": self.intercept,
            "n_fit": self.n_fit,
            "reports": [r.to_dict() for r in self.reports],
        }


def kappa_sweep(
    kappas=DEFAULT_KAPPAS,
    N=2,
    rich=True,
    structural=False,
    overrides=None,
    n_fit=3,
    progress=None,
):
    """Solve the default shear data across kappa and fit the residual slope.

    ``overrides`` updates the StackParams fields shared by every run; the
    slope is fitted through log(total) vs log(kappa) on the n_fit smallest
    values, where total is the combined NS norm plus the divergence norm.
    """
    reports = []
    for kap in sorted(kappas, reverse=True):
        kw = {"N": N, "kappa": float(kap)}
        if overrides:
            kw.update(overrides)
        pr = fl.StackParams(**kw)
        ge = fl.NormalGrid(pr.n_x3, 0.0, pr.X_max)
        gz = fl.NormalGrid(pr.n_z, 0.0, pr.Z_max)
        data = fl.default_shear_data(pr.N, K=pr.K_max, grid_e=ge, grid_z=gz, rich=rich)
        st = fl.solve_stack(data, pr)
        fn = ns_residual_structural if structural else ns_residual_direct
        rep = fn(st)
        reports.append(rep)
        if progress is not None:
            progress(rep)
    slope, intercept = fit_slope([r.kappa for r in reports], [r.total for r in reports], n_fit)
    return SweepResult(reports, slope, intercept, n_fit)


def sweep_to_csv(sweep, path):
    """One delimited row per kappa: kappa,N,ns_par,ns_normal,div,total."""
    lines = ["kappa,N,ns_par,ns_normal,div,total"]
    for r in sweep.reports:
        lines.append(
            "%.12e,%d,%.12e,%.12e,%.12e,%.12e"
            % (r.kappa, r.N, r.ns_par, r.ns_normal, r.div, r.total)
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def sweep_to_json(sweep, path):
    """Full sweep payload (per-term norms included) as deterministic JSON."""
    with open(path, "w") as fh:
        json.dump(sweep.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
