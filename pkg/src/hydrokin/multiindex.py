"""Multi-index algebra and the analytic-norm coefficient ledger.

Derivatives in the analytic machinery are indexed by alpha = (a0, a1, a2),
standing for (eps d_t)^a0 d_x1^a1 d_x2^a2.  The ledger carries the weight

    A_alpha(t) = tau(t)^|alpha| * <alpha>^9 / alpha!,   tau(t) = tau0 - M0*t,

with <alpha> = 1 + |alpha|.  Everything combinatorial in this module is exact
(fractions.Fraction); floats appear only in coeff() and the norm helpers.
"""

from __future__ import annotations

import csv
import math
from fractions import Fraction
from itertools import product

# Exact rational type used by the identity oracles.  fractions.Fraction is
# already canonical (gcd 1, positive denominator).
Rational = Fraction


class NonPositiveRadius(ValueError):
    """Analyticity radius tau(t) = tau0 - M0*t has been exhausted."""


class OrderCap(ValueError):
    """A multi-index order or an enumeration budget was exceeded."""


class MultiIndex(tuple):
    """Immutable multi-index alpha = (a0, a1, a2) of derivative orders.

    Examples
    --------
    >>> a = MultiIndex(2, 0, 1)
    >>> a.order, a.bracket, a.factorial
    (3, 4, 2)
    """

    def __new__(cls, a0, a1, a2):
        for v in (a0, a1, a2):
            if v < 0 or v != int(v):
                raise ValueError("multi-index entries must be non-negative integers")
        return super().__new__(cls, (int(a0), int(a1), int(a2)))

    @property
    def order(self):
        """|alpha| = a0 + a1 + a2."""
        return self[0] + self[1] + self[2]

    @property
    def bracket(self):
        """<alpha> = 1 + |alpha|."""
        return 1 + self.order

    @property
    def factorial(self):
        """alpha! = a0! a1! a2!, exact."""
        return math.factorial(self[0]) * math.factorial(self[1]) * math.factorial(self[2])

    def plus(self, other):
        return MultiIndex(self[0] + other[0], self[1] + other[1], self[2] + other[2])


def indices_upto(max_order):
    """All multi-indices with |alpha| <= max_order in graded lexicographic order.

    >>> [tuple(a) for a in indices_upto(1)]
    [(0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1)]
    """
    out = []
    for n in range(max_order + 1):
        grade = [
            MultiIndex(a0, a1, n - a0 - a1)
            for a0 in range(n, -1, -1)
            for a1 in range(n - a0, -1, -1)
        ]
        out.extend(grade)
    return out


class AnalyticLedger:
    """Coefficient ledger A_alpha(t) for analytic norms.

    Parameters
    ----------
    tau0 : float
        Initial analyticity radius, > 0.
    M0 : float
        Radius shrink rate, >= 0.
    max_order : int
        Cap on |alpha| for every ledger operation (default 8; the weight
        <alpha>^9/alpha! decays so fast that order 8 already puts tails
        below 1e-2 of the head for tau <= 1).
    """

    def __init__(self, tau0, M0, max_order=8):
        if tau0 <= 0:
            raise NonPositiveRadius("tau0 must be positive")
        if M0 < 0:
            raise ValueError("M0 must be non-negative")
        if max_order < 0:
            raise ValueError("max_order must be non-negative")
        self.tau0 = float(tau0)
        self.M0 = float(M0)
        self.max_order = int(max_order)

    def tau(self, t):
        """Radius tau(t) = tau0 - M0*t; raises once the radius is gone."""
        tau = self.tau0 - self.M0 * t
        if tau <= 0:
            raise NonPositiveRadius(f"tau({t}) = {tau} <= 0")
        return tau

    def indices(self):
        return indices_upto(self.max_order)

    def coeff(self, alpha, t=0.0):
        """A_alpha(t) = tau(t)^|alpha| <alpha>^9 / alpha!.

        >>> AnalyticLedger(1.0, 0.0).coeff(MultiIndex(0, 0, 0))
        1.0
        >>> AnalyticLedger(1.0, 0.0).coeff(MultiIndex(1, 0, 0))
        512.0
        """
        alpha = MultiIndex(*alpha)
        if alpha.order > self.max_order:
            raise OrderCap(f"|alpha| = {alpha.order} exceeds max_order = {self.max_order}")
        tau = self.tau(t)
        return tau**alpha.order * alpha.bracket**9 / alpha.factorial

    def coeff_exact(self, alpha, t=0):
        """Exact-rational A_alpha(t) for cross-checking (tau0, M0, t rational)."""
        alpha = MultiIndex(*alpha)
        if alpha.order > self.max_order:
            raise OrderCap(f"|alpha| = {alpha.order} exceeds max_order = {self.max_order}")
        tau = Fraction(self.tau0).limit_denominator(10**12) - Fraction(self.M0).limit_denominator(10**12) * Fraction(t)
        if tau <= 0:
            raise NonPositiveRadius(f"tau({t}) <= 0")
        return tau**alpha.order * Fraction(alpha.bracket**9, alpha.factorial)

    def ratio_bound_holds(self, t=0.0):
        """Check tau/sqrt((|a|+1)(|a|+2)) * A_a/A_{a+e_i} <= 1 for all pairs.

        Returns the largest ratio encountered (pass when <= 1 + 1e-12).
        """
        tau = self.tau(t)
        worst = 0.0
        for alpha in self.indices():
            if alpha.order >= self.max_order:
                continue
            n = alpha.order
            a_here = self.coeff(alpha, t)
            for e in ((1, 0, 0), (0, 1, 0), (0, 0, 1)):
                a_next = self.coeff(alpha.plus(e), t)
                ratio = tau / math.sqrt((n + 1) * (n + 2)) * a_here / a_next
                worst = max(worst, ratio)
        return worst


def faa_sum_1d(n, R):
    """Exact partition sum Sum_{k1+2k2+...+nkn=n} (Sum k)!/(k1!...kn!) R^(Sum k).

    Enumerates integer partitions of n exhaustively; the closed form is
    R(R+1)^(n-1).

    >>> faa_sum_1d(3, Fraction(1))
    Fraction(4, 1)
    >>> faa_sum_1d(1, Fraction(7))
    Fraction(7, 1)
    """
    if n < 1 or n != int(n):
        raise ValueError("n must be a positive integer")
    n = int(n)
    R = Fraction(R)
    total = Fraction(0)

    # partitions as multiplicity vectors: parts[i] = k_{i+1}, built recursively
    def recurse(remaining, largest_part, mults):
        nonlocal total
        if remaining == 0:
            k_sum = sum(mults.values())
            term = Fraction(math.factorial(k_sum))
            for k in mults.values():
                term /= math.factorial(k)
            total += term * R**k_sum
            return
        for part in range(min(remaining, largest_part), 0, -1):
            for count in range(remaining // part, 0, -1):
                mults[part] = count
                recurse(remaining - part * count, part - 1, mults)
                del mults[part]

    recurse(n, n, {})
    return total


def _nonzero_indices_upto(alpha):
    """Nonzero multi-indices beta <= alpha componentwise."""
    out = []
    for b in product(range(alpha[0] + 1), range(alpha[1] + 1), range(alpha[2] + 1)):
        if any(b):
            out.append(b)
    return out


def faa_sum_multi(alpha, R, order_budget=10):
    """Exact sum over decompositions k1*b1 + ... + ks*bs = alpha, distinct bi.

    Each unordered collection of distinct nonzero multi-indices b1..bs with
    multiplicities k1..ks >= 1 contributes (Sum k)!/(k1!...ks!) R^(Sum k).
    Specializing to alpha = (n,0,0) reproduces faa_sum_1d(n, R).

    >>> faa_sum_multi(MultiIndex(1, 0, 0), Fraction(1))
    Fraction(1, 1)
    >>> faa_sum_multi(MultiIndex(2, 0, 0), Fraction(1))
    Fraction(2, 1)
    """
    alpha = MultiIndex(*alpha)
    if alpha.order < 1:
        raise ValueError("|alpha| must be >= 1")
    if alpha.order > order_budget:
        raise OrderCap(f"|alpha| = {alpha.order} exceeds enumeration budget {order_budget}")
    R = Fraction(R)
    betas = _nonzero_indices_upto(alpha)
    total = Fraction(0)

    def recurse(target, start, mults):
        nonlocal total
        if target == (0, 0, 0):
            k_sum = sum(mults)
            term = Fraction(math.factorial(k_sum))
            for k in mults:
                term /= math.factorial(k)
            total += term * R**k_sum
            return
        # choose the next distinct beta from position >= start to kill ordering
        for idx in range(start, len(betas)):
            b = betas[idx]
            if b[0] > target[0] or b[1] > target[1] or b[2] > target[2]:
                continue
            kmax = min(
                target[0] // b[0] if b[0] else 10**9,
                target[1] // b[1] if b[1] else 10**9,
                target[2] // b[2] if b[2] else 10**9,
            )
            for k in range(1, kmax + 1):
                rest = (target[0] - k * b[0], target[1] - k * b[1], target[2] - k * b[2])
                mults.append(k)
                recurse(rest, idx + 1, mults)
                mults.pop()

    recurse(tuple(alpha), 0, [])
    return total


def faa_multi_bound(R, C_d, d=3):
    """Right side C_d * min(R,1) * e^(2^d R) of the multi-dimensional bound."""
    R = float(R)
    return C_d * min(R, 1.0) * math.exp(2**d * R)


def convolve_coeffs(ledger, x, y):
    """Leibniz convolution z_alpha = Sum_{beta+gamma=alpha} alpha!/(beta! gamma!) x_beta y_gamma.

    x and y are mappings keyed by (a0,a1,a2) tuples; missing keys count as 0.
    Result is defined for every |alpha| <= ledger.max_order.
    """
    for seq in (x, y):
        for key in seq:
            if MultiIndex(*key).order > ledger.max_order:
                raise OrderCap(f"sequence key {key} beyond max_order {ledger.max_order}")
    out = {}
    for alpha in ledger.indices():
        acc = 0.0
        af = alpha.factorial
        for b0 in range(alpha[0] + 1):
            for b1 in range(alpha[1] + 1):
                for b2 in range(alpha[2] + 1):
                    beta = (b0, b1, b2)
                    xb = x.get(beta)
                    if not xb:
                        continue
                    gamma = (alpha[0] - b0, alpha[1] - b1, alpha[2] - b2)
                    yg = y.get(gamma)
                    if not yg:
                        continue
                    acc += af / (MultiIndex(*beta).factorial * MultiIndex(*gamma).factorial) * xb * yg
        out[tuple(alpha)] = acc
    return out


def aggregate_l1(ledger, values, t=0.0):
    """l1-style weighted sum: Sum_alpha A_alpha(t) |v_alpha|."""
    return sum(ledger.coeff(MultiIndex(*k), t) * abs(v) for k, v in values.items())


def aggregate_l2(ledger, values, t=0.0):
    """l2-style weighted sum: sqrt(Sum_alpha (A_alpha(t) v_alpha)^2)."""
    return math.sqrt(sum((ledger.coeff(MultiIndex(*k), t) * v) ** 2 for k, v in values.items()))


def write_csv(path, values):
    """Serialize an alpha-indexed mapping as CSV 'a0,a1,a2,value' in graded lex order."""
    keys = sorted(values.keys(), key=lambda k: (sum(k), [-k[0], -k[1]]))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["a0", "a1", "a2", "value"])
        for k in keys:
            w.writerow([k[0], k[1], k[2], repr(float(values[k]))])


def read_csv(path):
    """Inverse of write_csv."""
    out = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != ["a0", "a1", "a2", "value"]:
            raise ValueError(f"unexpected header {header}")
        for row in r:
            out[(int(row[0]), int(row[1]), int(row[2]))] = float(row[3])
    return out


if __name__ == "__main__":
    import doctest

    doctest.testmod(verbose=True)
