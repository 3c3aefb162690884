"""Multi-index algebra, analytic-norm weights, and exact combinatorial sums.

The analytic norms used throughout weight the mixed derivative
(eps d_t)^a0 d_{x1}^a1 d_{x2}^a2 of a field by

    A_alpha(t) = tau(t)^|alpha| * (1 + |alpha|)^9 / alpha!,
    tau(t) = tau0 - M0 * t,

summed over all exponent triples alpha up to a fixed total order.  This
module owns the triple bookkeeping, the weight ledger, and the exact
big-rational evaluation of the chain-rule partition sums that the weighted
norms lean on.  Everything here is pure and float-free unless a float is
asked for, so the identity checks can run in exact arithmetic.
"""

import csv
import io
import math
from dataclasses import dataclass
from fractions import Fraction

__all__ = [
    "Rational",
    "NonPositiveRadius",
    "OrderCap",
    "MultiIndex",
    "graded_indices",
    "AnalyticLedger",
    "coeff",
    "faa_sum_1d",
    "faa_sum_multi",
    "convolve_coeffs",
    "coeffs_to_csv",
    "coeffs_from_csv",
]

# Exact arbitrary-precision rational; canonical form (reduced, positive
# denominator) is guaranteed by the fractions module.
Rational = Fraction


class NonPositiveRadius(ValueError):
    """The analytic radius tau(t) has closed at the requested time."""


class OrderCap(ValueError):
    """A multi-index order beyond the configured cap was requested."""


@dataclass(frozen=True)
class MultiIndex:
    """Exponent triple (a0, a1, a2) of the derivative (eps d_t, d_x1, d_x2).

    Examples
    --------
    >>> a = MultiIndex(1, 2, 0)
    >>> a.order, a.bracket, a.factorial
    (3, 4, 2)
    >>> tuple(a + MultiIndex(0, 1, 1))
    (1, 3, 1)
    """

    a0: int
    a1: int
    a2: int

    def __post_init__(self):
        for v in (self.a0, self.a1, self.a2):
            if not isinstance(v, int) or v < 0:
                raise ValueError("multi-index entries must be non-negative integers")

    @property
    def order(self):
        return self.a0 + self.a1 + self.a2

    @property
    def bracket(self):
        """The shifted order 1 + |alpha| entering the polynomial weight."""
        return 1 + self.order

    @property
    def factorial(self):
        return math.factorial(self.a0) * math.factorial(self.a1) * math.factorial(self.a2)

    def __iter__(self):
        return iter((self.a0, self.a1, self.a2))

    def __add__(self, other):
        o = as_index(other)
        return MultiIndex(self.a0 + o.a0, self.a1 + o.a1, self.a2 + o.a2)

    def grlex_key(self):
        return (self.order, self.a0, self.a1, self.a2)

    @classmethod
    def unit(cls, axis):
        """Unit index along one of the three derivative directions.

        >>> MultiIndex.unit(2)
        MultiIndex(a0=0, a1=0, a2=1)
        """
        e = [0, 0, 0]
        e[axis] = 1
        return cls(*e)


def as_index(alpha):
    """Coerce a MultiIndex or a plain (a0, a1, a2) triple to MultiIndex."""
    if isinstance(alpha, MultiIndex):
        return alpha
    a0, a1, a2 = alpha
    return MultiIndex(int(a0), int(a1), int(a2))


def graded_indices(max_order):
    """All triples with |alpha| <= max_order in graded lexicographic order.

    Examples
    --------
    >>> [tuple(a) for a in graded_indices(1)]
    [(0, 0, 0), (0, 0, 1), (0, 1, 0), (1, 0, 0)]
    """
    if max_order > 16:
        raise OrderCap("multi-index orders beyond 16 are not supported")
    out = []
    for n in range(max_order + 1):
        for a0 in range(n, -1, -1):
            for a1 in range(n - a0, -1, -1):
                out.append(MultiIndex(a0, a1, n - a0 - a1))
    return sorted(out, key=MultiIndex.grlex_key)


@dataclass(frozen=True)
class AnalyticLedger:
    """Weight table of the analytic norm: tau(t) = tau0 - M0 t.

    The ledger is a pure function table; it carries no clock of its own and
    no grid data.  Callers pass the evaluation time to every weight request.
    """

    tau0: float = 0.05
    M0: float = 1.0
    max_order: int = 8

    def __post_init__(self):
        if self.tau0 <= 0.0:
            raise NonPositiveRadius("tau0 must be positive")

    def tau(self, t=0.0):
        tau = self.tau0 - self.M0 * t
        if tau <= 0.0:
            raise NonPositiveRadius("the analytic radius has closed at t=%g" % t)
        return tau

    def coeff(self, alpha, t=0.0):
        """The weight tau(t)^|alpha| * <alpha>^9 / alpha!."""
        a = as_index(alpha)
        if a.order > self.max_order:
            raise OrderCap("|alpha|=%d exceeds the order cap %d" % (a.order, self.max_order))
        return self.tau(t) ** a.order * a.bracket**9 / a.factorial

    def alphas(self):
        return graded_indices(self.max_order)

    def aggregate(self, weighted_terms, style="l1"):
        """Collapse per-index weighted terms to one number.

        The sections of the write-up alternate between the plain sum and the
        root-square-sum of the weighted derivative norms; both are exposed
        and the caller picks.
        """
        terms = list(weighted_terms)
        if style == "l1":
            return float(sum(terms))
        if style == "l2":
            return math.sqrt(float(sum(v * v for v in terms)))
        raise ValueError("style must be 'l1' or 'l2'")


def coeff(ledger, alpha, t=0.0):
    """Module-level alias of AnalyticLedger.coeff.

    Examples
    --------
    >>> coeff(AnalyticLedger(tau0=1.0, M0=0.0), MultiIndex(0, 0, 0))
    1.0
    >>> coeff(AnalyticLedger(tau0=1.0, M0=0.0), MultiIndex(1, 0, 0))
    512.0
    """
    return ledger.coeff(alpha, t)


def faa_sum_1d(n, R):
    """Exact partition sum of the one-variable chain-rule identity.

    Enumerates every (k_1, ..., k_n) with k_1 + 2 k_2 + ... + n k_n = n and
    accumulates (sum k)! / (k_1! ... k_n!) * R^(sum k) in exact arithmetic.
    The closed form of this sum is R (R + 1)^(n-1); the enumeration is kept
    independent of that formula so the two can be checked against each other.

    Parameters
    ----------
    n : int
        Total weight of the partitions, n >= 1.
    R : int, Fraction
        Formal weight per block, used exactly.

    Returns
    -------
    Fraction

    Examples
    --------
    >>> faa_sum_1d(3, 1)
    Fraction(4, 1)
    >>> faa_sum_1d(1, 7)
    Fraction(7, 1)
    >>> faa_sum_1d(4, 2)
    Fraction(54, 1)
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    R = Fraction(R)
    total = Fraction(0)
    stack = [(1, n, 0, 1)]
    while stack:
        part, rem, s, denom = stack.pop()
        if rem == 0:
            total += Fraction(math.factorial(s), denom) * R**s
            continue
        if part > rem:
            continue
        k = 0
        while k * part <= rem:
            stack.append((part + 1, rem - k * part, s + k, denom * math.factorial(k)))
            k += 1
    return total


def faa_sum_multi(alpha, R, cap=10):
    """Exact decomposition sum of the multivariate chain-rule bound.

    Enumerates decompositions k_1 b_1 + ... + k_s b_s = alpha over distinct
    nonzero exponent triples b_i with multiplicities k_i >= 1, accumulating
    (sum k)! / (k_1! ... k_s!) * R^(sum k) exactly.  The result equals the
    alpha Taylor coefficient of 1 / (1 - R (g - 1)) at the origin, where
    g(x) = 1 / ((1-x_1)(1-x_2)(1-x_3)); restricted to one axis it collapses
    to the one-variable sum, so faa_sum_multi((n,0,0), R) == faa_sum_1d(n, R).

    Parameters
    ----------
    alpha : MultiIndex or triple of int
        Target exponent, |alpha| >= 1.
    R : int, Fraction
        Formal weight per block, used exactly.
    cap : int
        Enumeration budget on |alpha| (the decomposition count grows fast).

    Returns
    -------
    Fraction

    Examples
    --------
    >>> faa_sum_multi((1, 0, 0), 1)
    Fraction(1, 1)
    >>> faa_sum_multi((2, 0, 0), 1)
    Fraction(2, 1)
    >>> faa_sum_multi((1, 1, 0), 2)
    Fraction(10, 1)
    """
    a = as_index(alpha)
    if a.order < 1:
        raise ValueError("alpha must have positive order")
    if a.order > cap:
        raise OrderCap("|alpha|=%d exceeds the enumeration budget %d" % (a.order, cap))
    R = Fraction(R)
    target = tuple(a)
    blocks = [
        (b0, b1, b2)
        for b0 in range(target[0] + 1)
        for b1 in range(target[1] + 1)
        for b2 in range(target[2] + 1)
        if b0 + b1 + b2 > 0
    ]
    # consume large blocks first so dead branches die quickly
    blocks.sort(key=lambda b: -(b[0] + b[1] + b[2]))
    total = Fraction(0)

    def walk(idx, rem, s, denom):
        nonlocal total
        if rem == (0, 0, 0):
            total += Fraction(math.factorial(s), denom) * R**s
            return
        if idx == len(blocks):
            return
        b = blocks[idx]
        if (b[0] + b[1] + b[2]) > rem[0] + rem[1] + rem[2]:
            walk(idx + 1, rem, s, denom)
            return
        k = 0
        r = rem
        while r[0] >= 0 and r[1] >= 0 and r[2] >= 0:
            walk(idx + 1, r, s + k, denom * math.factorial(k))
            k += 1
            r = (rem[0] - k * b[0], rem[1] - k * b[1], rem[2] - k * b[2])

    walk(0, target, 0, 1)
    return total


def convolve_coeffs(ledger, x, y):
    """Leibniz convolution z_a = sum over b+c=a of a!/(b! c!) x_b y_c.

    Both inputs map multi-indices (MultiIndex or plain triples) to values
    for every |alpha| <= ledger.max_order; the result is keyed by MultiIndex
    over the same range.

    Examples
    --------
    >>> led = AnalyticLedger(tau0=1.0, M0=0.0, max_order=1)
    >>> one = {a: 0 for a in led.alphas()}
    >>> one[MultiIndex(0, 0, 0)] = 1
    >>> y = {a: 2.0 * i for i, a in enumerate(led.alphas())}
    >>> convolve_coeffs(led, one, y) == y
    True
    """

    def lookup(seq, a):
        if a in seq:
            return seq[a]
        return seq[tuple(a)]

    for seq in (x, y):
        for key in seq:
            if as_index(key).order > ledger.max_order:
                raise OrderCap("sequence entry beyond the ledger order cap")
    out = {}
    for a in ledger.alphas():
        acc = 0
        for b0 in range(a.a0 + 1):
            for b1 in range(a.a1 + 1):
                for b2 in range(a.a2 + 1):
                    b = MultiIndex(b0, b1, b2)
                    c = MultiIndex(a.a0 - b0, a.a1 - b1, a.a2 - b2)
                    acc += (
                        a.factorial
                        // (b.factorial * c.factorial)
                        * lookup(x, b)
                        * lookup(y, c)
                    )
        out[a] = acc
    return out


def coeffs_to_csv(seq):
    """Serialize an index-keyed sequence as CSV rows in graded-lex order.

    The header is "a0,a1,a2,value"; the row order is deterministic so equal
    sequences serialize to identical text.
    """
    keys = sorted((as_index(k) for k in seq), key=MultiIndex.grlex_key)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["a0", "a1", "a2", "value"])
    for k in keys:
        try:
            v = seq[k]
        except KeyError:
            v = seq[tuple(k)]
        w.writerow([k.a0, k.a1, k.a2, str(v) if isinstance(v, Fraction) else repr(v)])
    return buf.getvalue()


def coeffs_from_csv(text):
    """Parse the output of coeffs_to_csv back to a MultiIndex-keyed dict.

    Fractions round-trip exactly (stored as "p/q"); everything else comes
    back as float.
    """
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["a0", "a1", "a2", "value"]:
        raise ValueError("expected header a0,a1,a2,value")
    out = {}
    for a0, a1, a2, value in rows[1:]:
        if "/" in value:
            v = Fraction(value)
        else:
            v = float(value)
        out[MultiIndex(int(a0), int(a1), int(a2))] = v
    return out
