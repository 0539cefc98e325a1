"""Sparse multivariate polynomials with exact rational coefficients.

Variables are nonnegative integer ids; a monomial is a sorted tuple of
(var, exponent) pairs.  The same class backs polynomials in the base
coordinates x^0..x^{n-1} (PDO coefficients, submanifold equations) and
polynomials in jet coordinates f^i_A (dependence coefficients), which is why
evaluation accepts either a positional sequence or a {var: value} mapping.
"""

from __future__ import annotations

from fractions import Fraction
from numbers import Rational

Monomial = tuple[tuple[int, int], ...]


def _as_fraction(c) -> Fraction:
    if isinstance(c, Fraction):
        return c
    if isinstance(c, Rational):
        return Fraction(c)
    if isinstance(c, float):
        return Fraction(c)
    raise TypeError(f"cannot use {type(c).__name__} as an exact coefficient")


class Polynomial:
    __slots__ = ("terms",)

    def __init__(self, terms: dict[Monomial, Fraction] | None = None):
        self.terms: dict[Monomial, Fraction] = {}
        if terms:
            for mon, c in terms.items():
                if c != 0:
                    self.terms[mon] = _as_fraction(c)

    @classmethod
    def zero(cls) -> "Polynomial":
        return cls()

    @classmethod
    def constant(cls, c) -> "Polynomial":
        return cls({(): _as_fraction(c)})

    @classmethod
    def variable(cls, var: int) -> "Polynomial":
        return cls({((var, 1),): Fraction(1)})

    @classmethod
    def monomial(cls, pairs, c=1) -> "Polynomial":
        mon = tuple(sorted((v, e) for v, e in pairs if e))
        return cls({mon: _as_fraction(c)})

    def is_zero(self) -> bool:
        return not self.terms

    def __bool__(self) -> bool:
        return bool(self.terms)

    def __eq__(self, other) -> bool:
        return isinstance(other, Polynomial) and self.terms == other.terms

    def __hash__(self):
        return hash(frozenset(self.terms.items()))

    def __add__(self, other: "Polynomial") -> "Polynomial":
        out = dict(self.terms)
        for mon, c in other.terms.items():
            s = out.get(mon, Fraction(0)) + c
            if s:
                out[mon] = s
            else:
                out.pop(mon, None)
        res = Polynomial()
        res.terms = out
        return res

    def __neg__(self) -> "Polynomial":
        res = Polynomial()
        res.terms = {mon: -c for mon, c in self.terms.items()}
        return res

    def __sub__(self, other: "Polynomial") -> "Polynomial":
        return self + (-other)

    def scale(self, c) -> "Polynomial":
        c = _as_fraction(c)
        res = Polynomial()
        if c:
            res.terms = {mon: c * v for mon, v in self.terms.items()}
        return res

    def __mul__(self, other: "Polynomial") -> "Polynomial":
        out: dict[Monomial, Fraction] = {}
        for m1, c1 in self.terms.items():
            for m2, c2 in other.terms.items():
                mon = _merge(m1, m2)
                s = out.get(mon, Fraction(0)) + c1 * c2
                if s:
                    out[mon] = s
                else:
                    out.pop(mon, None)
        res = Polynomial()
        res.terms = out
        return res

    def __pow__(self, k: int) -> "Polynomial":
        if k < 0:
            raise ValueError("negative power")
        res = Polynomial.constant(1)
        base = self
        while k:
            if k & 1:
                res = res * base
            base = base * base
            k >>= 1
        return res

    def diff(self, var: int) -> "Polynomial":
        out: dict[Monomial, Fraction] = {}
        for mon, c in self.terms.items():
            for j, (v, e) in enumerate(mon):
                if v == var:
                    new = list(mon)
                    if e == 1:
                        del new[j]
                    else:
                        new[j] = (v, e - 1)
                    key = tuple(new)
                    s = out.get(key, Fraction(0)) + c * e
                    if s:
                        out[key] = s
                    else:
                        out.pop(key, None)
                    break
        res = Polynomial()
        res.terms = out
        return res

    def eval(self, values) -> float:
        """Float value; `values` is a sequence indexed by var id or a mapping."""
        getter = values.__getitem__
        total = 0.0
        for mon, c in self.terms.items():
            t = float(c)
            for v, e in mon:
                t *= float(getter(v)) ** e
            total += t
        return total

    def eval_exact(self, values) -> Fraction:
        getter = values.__getitem__
        total = Fraction(0)
        for mon, c in self.terms.items():
            t = c
            for v, e in mon:
                t *= Fraction(getter(v)) ** e
            total += t
        return total

    def vars_used(self) -> set[int]:
        used: set[int] = set()
        for mon in self.terms:
            used.update(v for v, _ in mon)
        return used

    def degree(self) -> int:
        if not self.terms:
            return 0
        return max(sum(e for _, e in mon) for mon in self.terms)

    def constant_value(self) -> Fraction | None:
        """The constant if the polynomial has no variables, else None."""
        if not self.terms:
            return Fraction(0)
        if len(self.terms) == 1 and () in self.terms:
            return self.terms[()]
        return None

    def __repr__(self) -> str:
        if not self.terms:
            return "Polynomial(0)"
        bits = []
        for mon, c in sorted(self.terms.items()):
            factors = "".join(f"*v{v}^{e}" if e > 1 else f"*v{v}" for v, e in mon)
            bits.append(f"{c}{factors}")
        return "Polynomial(" + " + ".join(bits) + ")"


def _merge(m1: Monomial, m2: Monomial) -> Monomial:
    if not m1:
        return m2
    if not m2:
        return m1
    exps: dict[int, int] = dict(m1)
    for v, e in m2:
        exps[v] = exps.get(v, 0) + e
    return tuple(sorted(exps.items()))


def determinant(rows: list[list[Polynomial]]) -> Polynomial:
    """Exact determinant of a square matrix of polynomials by cofactor expansion."""
    k = len(rows)
    if k == 0:
        return Polynomial.constant(1)
    if any(len(r) != k for r in rows):
        raise ValueError("determinant needs a square matrix")
    if k == 1:
        return rows[0][0]
    if k == 2:
        return rows[0][0] * rows[1][1] - rows[0][1] * rows[1][0]
    total = Polynomial.zero()
    minor_rows = rows[1:]
    for j in range(k):
        entry = rows[0][j]
        if entry.is_zero():
            continue
        minor = [[r[c] for c in range(k) if c != j] for r in minor_rows]
        term = entry * determinant(minor)
        total = total + (term if j % 2 == 0 else -term)
    return total
