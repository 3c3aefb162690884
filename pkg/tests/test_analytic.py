import doctest
import math
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from hydrokin import analytic as an
from hydrokin.analytic import AnalyticLedger, MultiIndex, NonPositiveRadius, OrderCap

small_index = st.tuples(st.integers(0, 3), st.integers(0, 3), st.integers(0, 3))


def test_doctests():
    failures, _ = doctest.testmod(an)
    assert failures == 0


# -- multi-index bookkeeping --------------------------------------------------

def test_index_basics():
    a = MultiIndex(2, 0, 3)
    assert a.order == 5
    assert a.bracket == 6
    assert a.factorial == 12
    assert tuple(a + (1, 1, 0)) == (3, 1, 3)
    assert MultiIndex.unit(0) == MultiIndex(1, 0, 0)


def test_index_rejects_bad_entries():
    with pytest.raises(ValueError):
        MultiIndex(-1, 0, 0)
    with pytest.raises(ValueError):
        MultiIndex(0, 0.5, 0)


def test_graded_indices_count_and_order():
    for n in (0, 1, 2, 5, 8):
        idx = an.graded_indices(n)
        # simplex count C(n+3, 3)
        assert len(idx) == (n + 1) * (n + 2) * (n + 3) // 6
        keys = [a.grlex_key() for a in idx]
        assert keys == sorted(keys)
        assert len(set(keys)) == len(keys)


def test_graded_indices_cap():
    with pytest.raises(OrderCap):
        an.graded_indices(17)


# -- weight ledger ------------------------------------------------------------

def test_coeff_examples():
    led = AnalyticLedger(tau0=1.0, M0=0.0)
    assert led.coeff((0, 0, 0)) == 1.0
    assert led.coeff((1, 0, 0)) == 512.0
    # tau(1) = 0.4, order 2, bracket 3: 0.4^2 * 3^9; exact rational route
    led = AnalyticLedger(tau0=0.5, M0=0.1)
    exact = Fraction(2, 5) ** 2 * 3**9
    assert exact == Fraction(78732, 25)
    assert abs(led.coeff((1, 1, 0), t=1.0) - float(exact)) < 1e-12


def test_radius_closure():
    with pytest.raises(NonPositiveRadius):
        AnalyticLedger(tau0=0.0)
    led = AnalyticLedger(tau0=0.05, M0=1.0)
    assert led.tau(0.04) > 0
    with pytest.raises(NonPositiveRadius):
        led.tau(0.05)
    with pytest.raises(NonPositiveRadius):
        led.coeff((1, 0, 0), t=1.0)


def test_coeff_order_cap():
    led = AnalyticLedger(tau0=0.05, M0=1.0, max_order=3)
    with pytest.raises(OrderCap):
        led.coeff((2, 2, 0))


@given(alpha=small_index, steps=st.integers(1, 4))
def test_coeff_decreases_in_time(alpha, steps):
    # shrinking radius can only shrink the weight of a genuine derivative
    led = AnalyticLedger(tau0=0.05, M0=1.0)
    if sum(alpha) == 0 or sum(alpha) > led.max_order:
        return
    t1 = 0.04 * (steps - 1) / 4.0
    t2 = 0.04 * steps / 4.0
    assert led.coeff(alpha, t2) < led.coeff(alpha, t1)


def test_weight_ratio_bound():
    # tau * A_alpha / A_{alpha+e_i} <= sqrt((|alpha|+1)(|alpha|+2)): the
    # one-step ratio that the product estimates on the weighted norms use.
    # The combination on the left is tau-free, so two radii cover it.
    for tau0 in (0.05, 1.7):
        led = AnalyticLedger(tau0=tau0, M0=0.0, max_order=12)
        for a in an.graded_indices(11):
            n = a.order
            for axis in range(3):
                up = a + MultiIndex.unit(axis)
                ratio = led.tau() * led.coeff(a) / led.coeff(up)
                assert ratio <= math.sqrt((n + 1) * (n + 2)) + 1e-12


def test_aggregate_styles():
    led = AnalyticLedger()
    assert led.aggregate([3.0, 4.0], style="l1") == 7.0
    assert abs(led.aggregate([3.0, 4.0], style="l2") - 5.0) < 1e-15
    with pytest.raises(ValueError):
        led.aggregate([1.0], style="sup")


# -- one-variable partition sum ----------------------------------------------

def test_faa_1d_closed_form_exact():
    # enumeration equals R (R+1)^(n-1) exactly for every n up to 12
    for R in (Fraction(1, 3), Fraction(1), Fraction(2), Fraction(5)):
        for n in range(1, 13):
            assert an.faa_sum_1d(n, R) == R * (R + 1) ** (n - 1)


def test_faa_1d_rejects_zero_order():
    with pytest.raises(ValueError):
        an.faa_sum_1d(0, 1)


# -- multivariate partition sum ------------------------------------------------

def series_oracle(alpha, R):
    """alpha coefficient of 1/(1 - R(g-1)), g = 1/((1-x)(1-y)(1-z)).

    Truncated power-series composition in exact arithmetic, independent of
    the decomposition enumeration.
    """
    deg = sum(alpha)
    R = Fraction(R)

    def mul(p, q):
        out = {}
        for a, va in p.items():
            for b, vb in q.items():
                c = (a[0] + b[0], a[1] + b[1], a[2] + b[2])
                if sum(c) <= deg:
                    out[c] = out.get(c, Fraction(0)) + va * vb
        return out

    # g - 1 truncated: every nonzero triple has coefficient 1
    gm1 = {}
    for a0 in range(deg + 1):
        for a1 in range(deg + 1 - a0):
            for a2 in range(deg + 1 - a0 - a1):
                if a0 + a1 + a2 > 0:
                    gm1[(a0, a1, a2)] = Fraction(1)
    total = {(0, 0, 0): Fraction(1)}
    power = {(0, 0, 0): Fraction(1)}
    for m in range(1, deg + 1):
        power = mul(power, gm1)
        for c, v in power.items():
            total[c] = total.get(c, Fraction(0)) + R**m * v
    return total.get(tuple(alpha), Fraction(0))


def test_faa_multi_goldens():
    assert an.faa_sum_multi((1, 0, 0), 1) == 1
    assert an.faa_sum_multi((2, 0, 0), 1) == 2
    assert an.faa_sum_multi((1, 1, 0), 2) == 10
    assert an.faa_sum_multi((4, 3, 3), 1) == 265088


def test_faa_multi_matches_series_oracle():
    for R in (Fraction(1), Fraction(2), Fraction(1, 3)):
        for a in an.graded_indices(5):
            if a.order == 0:
                continue
            assert an.faa_sum_multi(a, R) == series_oracle(tuple(a), R)


def test_faa_multi_reduces_to_1d():
    for R in (Fraction(1), Fraction(2), Fraction(1, 3)):
        for n in range(1, 7):
            assert an.faa_sum_multi((n, 0, 0), R) == an.faa_sum_1d(n, R)


@given(alpha=small_index)
@settings(max_examples=40, deadline=None)
def test_faa_multi_axis_symmetric(alpha):
    if sum(alpha) == 0 or sum(alpha) > 6:
        return
    base = an.faa_sum_multi(alpha, 2)
    assert an.faa_sum_multi((alpha[1], alpha[2], alpha[0]), 2) == base
    assert an.faa_sum_multi((alpha[2], alpha[0], alpha[1]), 2) == base


def test_faa_multi_exponential_bound():
    # values stay below C min(R,1) e^(8R) in three variables; the measured
    # worst constant over this range is well under 4
    worst = 0.0
    for R in (Fraction(1, 3), Fraction(1), Fraction(2)):
        bound = min(float(R), 1.0) * math.exp(8.0 * float(R))
        for a in an.graded_indices(6):
            if a.order == 0:
                continue
            worst = max(worst, float(an.faa_sum_multi(a, R)) / bound)
    assert worst <= 4.0


def test_faa_multi_guards():
    with pytest.raises(ValueError):
        an.faa_sum_multi((0, 0, 0), 1)
    with pytest.raises(OrderCap):
        an.faa_sum_multi((5, 5, 2), 1, cap=10)


# -- Leibniz convolution --------------------------------------------------------

def delta_seq(led, at, value):
    out = {a: Fraction(0) for a in led.alphas()}
    out[an.as_index(at)] = Fraction(value)
    return out


def test_convolve_single_terms():
    led = AnalyticLedger(tau0=1.0, M0=0.0, max_order=4)
    x = delta_seq(led, (1, 0, 1), 3)
    y = delta_seq(led, (0, 2, 0), 5)
    z = an.convolve_coeffs(led, x, y)
    tgt = MultiIndex(1, 2, 1)
    # a!/(b! c!) = (1,2,1)!/(1,0,1)!(0,2,0)! = 1
    assert z[tgt] == 15
    assert sum(1 for v in z.values() if v != 0) == 1


def test_convolve_matches_brute_force():
    led = AnalyticLedger(tau0=1.0, M0=0.0, max_order=3)
    alphas = led.alphas()
    x = {a: Fraction(2 * i - 7, 3) for i, a in enumerate(alphas)}
    y = {a: Fraction(i * i - 4, 5) for i, a in enumerate(alphas)}
    z = an.convolve_coeffs(led, x, y)
    for a in alphas:
        acc = Fraction(0)
        for b in alphas:
            c = (a.a0 - b.a0, a.a1 - b.a1, a.a2 - b.a2)
            if min(c) < 0:
                continue
            cc = MultiIndex(*c)
            acc += Fraction(a.factorial, b.factorial * cc.factorial) * x[b] * y[cc]
        assert z[a] == acc


def test_convolve_commutes_and_associates():
    led = AnalyticLedger(tau0=1.0, M0=0.0, max_order=3)
    alphas = led.alphas()
    x = {a: Fraction(i % 5 - 2) for i, a in enumerate(alphas)}
    y = {a: Fraction(3 - i % 7, 2) for i, a in enumerate(alphas)}
    w = {a: Fraction(i % 3, 4) for i, a in enumerate(alphas)}
    assert an.convolve_coeffs(led, x, y) == an.convolve_coeffs(led, y, x)
    left = an.convolve_coeffs(led, an.convolve_coeffs(led, x, y), w)
    right = an.convolve_coeffs(led, x, an.convolve_coeffs(led, y, w))
    assert left == right


def test_convolve_rejects_deep_keys():
    led = AnalyticLedger(tau0=1.0, M0=0.0, max_order=2)
    x = {a: 0 for a in led.alphas()}
    bad = dict(x)
    bad[MultiIndex(3, 0, 0)] = 1.0
    with pytest.raises(OrderCap):
        an.convolve_coeffs(led, bad, x)


# -- serialization ---------------------------------------------------------------

def test_csv_roundtrip_floats():
    led = AnalyticLedger(tau0=1.0, M0=0.0, max_order=2)
    seq = {a: 0.1 * i - 0.7 for i, a in enumerate(led.alphas())}
    back = an.coeffs_from_csv(an.coeffs_to_csv(seq))
    assert back == {an.as_index(k): v for k, v in seq.items()}


def test_csv_roundtrip_fractions_exact():
    seq = {(0, 0, 0): Fraction(1, 3), (1, 0, 1): Fraction(-22, 7)}
    back = an.coeffs_from_csv(an.coeffs_to_csv(seq))
    assert back[MultiIndex(0, 0, 0)] == Fraction(1, 3)
    assert back[MultiIndex(1, 0, 1)] == Fraction(-22, 7)


def test_csv_deterministic_order():
    a = {(1, 0, 0): 1.0, (0, 0, 1): 2.0, (0, 0, 0): 3.0}
    b = {(0, 0, 0): 3.0, (0, 0, 1): 2.0, (1, 0, 0): 1.0}
    assert an.coeffs_to_csv(a) == an.coeffs_to_csv(b)
    lines = an.coeffs_to_csv(a).splitlines()
    assert lines[0] == "a0,a1,a2,value"
    assert lines[1].startswith("0,0,0")


def test_csv_rejects_foreign_header():
    with pytest.raises(ValueError):
        an.coeffs_from_csv("i,j,k,v\n0,0,0,1.0\n")
