"""Polynomials in jet coordinates f^i_A and their composition with a base map.

A JetRing assigns variable ids to jet coordinates (component i, multi-index A).
Prolongation implements the total derivative: d/dx^b of a jet polynomial is
again a jet polynomial one order higher via the chain rule.  A JetCoeff is a
jet polynomial paired with a concrete analytic map, giving an exactly
differentiable scalar field on the patch; it satisfies the same coefficient
protocol as Polynomial (diff / eval / is_zero / add / sub / scale), so linear
PDOs can carry either kind.
"""

from __future__ import annotations

from fractions import Fraction

from .indices import MultiIndex
from .maps import AnalyticMap
from .poly import Polynomial


class JetRing:
    def __init__(self, n: int):
        self.n = n
        self._ids: dict[tuple[int, MultiIndex], int] = {}
        self._keys: list[tuple[int, MultiIndex]] = []
        self._point_cache: dict[tuple[int, tuple[float, ...]], dict[int, float]] = {}

    def var_id(self, i: int, A: MultiIndex) -> int:
        key = (i, tuple(A))
        vid = self._ids.get(key)
        if vid is None:
            vid = len(self._keys)
            self._ids[key] = vid
            self._keys.append(key)
        return vid

    def key_of(self, vid: int) -> tuple[int, MultiIndex]:
        return self._keys[vid]

    def variable(self, i: int, A: MultiIndex) -> Polynomial:
        return Polynomial.variable(self.var_id(i, A))

    def prolong(self, p: Polynomial, axis: int) -> Polynomial:
        """Total x^axis-derivative: sum over vars of dP/dv * f^i_{A+axis}."""
        out = Polynomial.zero()
        for vid in p.vars_used():
            dp = p.diff(vid)
            if dp.is_zero():
                continue
            i, A = self._keys[vid]
            lifted = tuple(sorted(A + (axis,)))
            out = out + dp * self.variable(i, lifted)
        return out

    def values_at(self, f: AnalyticMap, x, vars_needed) -> dict[int, float]:
        xt = tuple(float(v) for v in x)
        cache_key = (id(f), xt)
        values = self._point_cache.get(cache_key)
        if values is None:
            values = {}
            self._point_cache[cache_key] = values
        for vid in vars_needed:
            if vid not in values:
                i, A = self._keys[vid]
                values[vid] = f.component_jet(i, A).eval(xt)
        return values

    def exact_values_at(self, f: AnalyticMap, x, vars_needed) -> dict[int, Fraction]:
        """Exact jet values at a rational point; polynomial (trig-free) jets only."""
        out: dict[int, Fraction] = {}
        for vid in vars_needed:
            i, A = self._keys[vid]
            jet = f.component_jet(i, A)
            if not jet.is_polynomial():
                raise ValueError("exact jet values need a trig-free map")
            out[vid] = jet.to_polynomial().eval_exact([Fraction(v) for v in x])
        return out


class JetCoeff:
    """A jet polynomial evaluated along a fixed map: an exact scalar field."""

    __slots__ = ("ring", "f", "poly")

    def __init__(self, ring: JetRing, f: AnalyticMap, poly: Polynomial):
        self.ring = ring
        self.f = f
        self.poly = poly

    def diff(self, axis: int) -> "JetCoeff":
        return JetCoeff(self.ring, self.f, self.ring.prolong(self.poly, axis))

    def eval(self, x) -> float:
        values = self.ring.values_at(self.f, x, self.poly.vars_used())
        return self.poly.eval(values)

    def is_zero(self) -> bool:
        return self.poly.is_zero()

    def scale(self, c) -> "JetCoeff":
        return JetCoeff(self.ring, self.f, self.poly.scale(c))

    def __add__(self, other: "JetCoeff") -> "JetCoeff":
        if not isinstance(other, JetCoeff) or other.ring is not self.ring or other.f is not self.f:
            raise ValueError("can only add jet coefficients over the same ring and map")
        return JetCoeff(self.ring, self.f, self.poly + other.poly)

    def __sub__(self, other: "JetCoeff") -> "JetCoeff":
        return self + other.scale(-1)

    def compose_polynomial(self) -> Polynomial:
        """Closed-form composition with a trig-free map: a polynomial in x."""
        subs: dict[int, Polynomial] = {}
        for vid in self.poly.vars_used():
            i, A = self.ring.key_of(vid)
            jet = self.f.component_jet(i, A)
            if not jet.is_polynomial():
                raise ValueError("composition needs a trig-free map")
            subs[vid] = jet.to_polynomial()
        out = Polynomial.zero()
        for mon, c in self.poly.terms.items():
            term = Polynomial.constant(c)
            for v, e in mon:
                term = term * subs[v] ** e
            out = out + term
        return out
