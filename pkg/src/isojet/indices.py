"""Symmetric multi-index bookkeeping and the jet-dimension / threshold formulas.

Multi-indices are tuples of 0-based axis indices in nondecreasing order (the
canonical representative of a symmetric index).  The empty tuple is the order-0
index.  Every matrix assembled anywhere in the package orders its multi-index
axis with :func:`multi_indices` / :func:`jet_multi_indices`, so this module is
the single source of truth for column orderings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from itertools import combinations_with_replacement

MultiIndex = tuple[int, ...]


def multi_indices(n: int, r: int, mode: str = "exact") -> list[MultiIndex]:
    """Canonical multi-indices over axes 0..n-1, graded-lexicographically ordered.

    mode="exact" lists order r only (count C(n+r-1, r)); mode="up_to" lists
    orders 0..r including the empty index (count C(n+r, r)).
    """
    if n < 1:
        raise ValueError(f"dimension must be >= 1, got {n}")
    if r < 0:
        raise ValueError(f"order must be >= 0, got {r}")
    if mode == "exact":
        return list(combinations_with_replacement(range(n), r))
    if mode == "up_to":
        out: list[MultiIndex] = []
        for rho in range(r + 1):
            out.extend(combinations_with_replacement(range(n), rho))
        return out
    raise ValueError(f"mode must be 'exact' or 'up_to', got {mode!r}")


def jet_multi_indices(n: int, r: int) -> list[MultiIndex]:
    """Multi-indices of order 1..r, the column labels of an order-r jet matrix."""
    out: list[MultiIndex] = []
    for rho in range(1, r + 1):
        out.extend(combinations_with_replacement(range(n), rho))
    return out


def index_exponents(A: MultiIndex, n: int) -> tuple[int, ...]:
    """Exponent-vector form of a canonical multi-index: exp[axis] = multiplicity."""
    exp = [0] * n
    for axis in A:
        exp[axis] += 1
    return tuple(exp)


def exponents_index(exp) -> MultiIndex:
    """Inverse of :func:`index_exponents`."""
    out: list[int] = []
    for axis, k in enumerate(exp):
        out.extend([axis] * k)
    return tuple(out)


def index_multiplicity(A: MultiIndex) -> int:
    """Number of distinct orderings of the symmetric index A."""
    mult = math.factorial(len(A))
    for axis in set(A):
        mult //= math.factorial(A.count(axis))
    return mult


def exp_binomial(E: tuple[int, ...], F: tuple[int, ...]) -> int:
    """Product of per-axis binomials C(E_axis, F_axis); 0 unless F <= E."""
    b = 1
    for e, f in zip(E, F):
        if f > e:
            return 0
        b *= math.comb(e, f)
    return b


def jet_dim(n: int, r: int) -> int:
    """Number of partial derivatives of orders 1..r in n variables: C(n+r, r) - 1."""
    if n < 1 or r < 1:
        raise ValueError(f"jet_dim needs n >= 1 and r >= 1, got n={n}, r={r}")
    return math.comb(n + r, r) - 1


def uts_top_count(n: int, m: int, r: int) -> int:
    """Independent top-order terms of an upper-totally-symmetric operator."""
    if m + 1 > n:
        raise ValueError(f"need m + 1 <= n, got m={m}, n={n}")
    return m * sum(math.comb(n - i, r) for i in range(m + 1))


def _count_inequality_holds(n: int, m: int, s: int, r: int) -> bool:
    return (m + 1) * math.comb(n + s, s) > m * math.comb(n + r + s, r + s)


def minimal_jet_order(n: int, m: int, r: int) -> tuple[int, float]:
    """Least s with (m+1)*C(n+s, s) > m*C(n+r+s, r+s), plus the real lower bound.

    Returns (s_min, n / ((1 + 1/m)**(1/r) - 1)).  Exact integer arithmetic for
    the threshold; the bound is a float for reporting.  The product form
    prod_{l=1..r} (1 + n/(s+l)) < (m+1)/m is re-verified at s_min in exact
    rationals, and required to fail at s_min - 1.
    """
    if n < 1 or m < 1 or r < 1:
        raise ValueError("minimal_jet_order needs n, m, r >= 1")
    s = 1
    while not _count_inequality_holds(n, m, s, r):
        s += 1
    prod = Fraction(1)
    for ell in range(1, r + 1):
        prod *= 1 + Fraction(n, s + ell)
    if not prod < Fraction(m + 1, m):
        raise AssertionError(f"product form fails at s_min={s} for (n,m,r)=({n},{m},{r})")
    if s > 1:
        prod_prev = Fraction(1)
        for ell in range(1, r + 1):
            prod_prev *= 1 + Fraction(n, s - 1 + ell)
        if prod_prev < Fraction(m + 1, m):
            raise AssertionError(f"threshold not minimal at s_min={s} for (n,m,r)=({n},{m},{r})")
    bound = n / ((1 + 1 / m) ** (1 / r) - 1)
    return s, bound


def _middle_root_cubic(n: int):
    """Monic cubic cleared from the dimension-count equality.

    n + n(n+1)/2 - m = m(m+1)(n+1) - m*m(m+1)/2, denominators cleared, gives
    p(m) = m^3 - (2n+1)m^2 - (2n+4)m + n(n+3).
    """
    c2 = -(2 * n + 1)
    c1 = -(2 * n + 4)
    c0 = n * (n + 3)

    def p(x: Fraction) -> Fraction:
        return ((x + c2) * x + c1) * x + c0

    return p


def middle_root(n: int, abs_tol: Fraction = Fraction(1, 10**15)) -> float:
    """Middle real root of the dimension-count cubic, by exact-rational bisection.

    Brackets all sign changes of p on a half-integer scan, requires exactly
    three real roots, bisects each to `abs_tol` and returns the middle one.
    """
    if n < 2:
        raise ValueError(f"middle_root needs n >= 2, got {n}")
    p = _middle_root_cubic(n)
    lo_scan, hi_scan = -2 * (2 * n + 6), 2 * (2 * n + 6)
    brackets: list[tuple[Fraction, Fraction]] = []
    prev_x = Fraction(lo_scan, 2)
    prev_v = p(prev_x)
    for k in range(lo_scan + 1, hi_scan + 1):
        x = Fraction(k, 2)
        v = p(x)
        if v == 0:
            brackets.append((x, x))
        elif prev_v != 0 and (prev_v < 0) != (v < 0):
            brackets.append((prev_x, x))
        prev_x, prev_v = x, v
    if len(brackets) != 3:
        raise ArithmeticError(
            f"cubic for n={n} does not have three real roots in scan range "
            f"(found {len(brackets)} brackets)"
        )
    roots = []
    for lo, hi in brackets:
        while hi - lo > abs_tol:
            mid = (lo + hi) / 2
            v = p(mid)
            if v == 0:
                lo = hi = mid
                break
            if (p(lo) < 0) == (v < 0):
                lo = mid
            else:
                hi = mid
        roots.append((lo + hi) / 2)
    roots.sort()
    if not roots[0] < roots[1] < roots[2]:
        raise ArithmeticError(f"middle root for n={n} is not strictly between the others")
    return float(roots[1])


def middle_root_residual(n: int, root: float) -> float:
    """|p(root)| evaluated exactly at the binary-float root."""
    p = _middle_root_cubic(n)
    return abs(float(p(Fraction(root))))


def defect(n: int, m: int) -> int:
    """Jet depth consumed by the order-0 inverse of a full 2-rank map: s_min(n,m,1) + 3."""
    if n < 1 or m < 1:
        raise ValueError("defect needs n, m >= 1")
    s_min, _ = minimal_jet_order(n, m, 1)
    d = s_min + 3
    if d < n * m + 3:
        raise AssertionError(f"defect {d} below n*m+3 for (n,m)=({n},{m})")
    return d


@dataclass
class ThresholdReport:
    """All integer/real thresholds for one (n, m, r), with consistency flags."""

    n: int
    m: int
    r: int
    s_min: int
    s_lower_bound: float
    m_n: float | None
    d: int
    uts_top_count: int | None
    sandwich_ok: bool | None
    cubic_residual: float | None

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "m": self.m,
            "r": self.r,
            "s_min": self.s_min,
            "s_lower_bound": self.s_lower_bound,
            "m_n": self.m_n,
            "d": self.d,
            "uts_top_count": self.uts_top_count,
            "sandwich_ok": self.sandwich_ok,
            "cubic_residual": self.cubic_residual,
        }


def threshold_report(n: int, m: int, r: int) -> ThresholdReport:
    s_min, bound = minimal_jet_order(n, m, r)
    if s_min + 1 <= bound - 1e-9:
        raise AssertionError(f"s_min={s_min} below stated lower bound {bound}")
    m_n = None
    sandwich_ok = None
    residual = None
    if n >= 2:
        m_n = middle_root(n)
        residual = middle_root_residual(n, m_n)
        mid = math.sqrt(n / 2)
        sandwich_ok = m_n <= mid <= m_n + 0.5
    top = uts_top_count(n, m, r) if m + 1 <= n else None
    return ThresholdReport(
        n=n,
        m=m,
        r=r,
        s_min=s_min,
        s_lower_bound=bound,
        m_n=m_n,
        d=defect(n, m),
        uts_top_count=top,
        sandwich_ok=sandwich_ok,
        cubic_residual=residual,
    )
