"""Linear partial differential operators with exactly differentiable coefficients.

Coefficients satisfy a small protocol (diff/eval/is_zero/add/sub/scale):
either Polynomial (polynomial in the base coordinates, the serializable kind)
or JetCoeff (a jet polynomial along a concrete map, produced by the
compatibility machinery).  The formal adjoint, coefficient jets and pointwise
application work uniformly over both.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .indices import (
    MultiIndex,
    exp_binomial,
    exponents_index,
    index_exponents,
    index_multiplicity,
    multi_indices,
)
from .linalg import DEFAULT_RANK_TOL, numerical_rank, solve_with_derivative
from .poly import Polynomial

CoeffKey = tuple[int, MultiIndex, int]  # (target a, derivative multi-index A, source i)


def _diff_by_index(coeff, A: MultiIndex):
    cur = coeff
    for axis in A:
        cur = cur.diff(axis)
        if cur.is_zero():
            return cur
    return cur


class LinearPDO:
    """Operator sections(R^q_in) -> sections(R^q_out) of order r on an n-patch."""

    def __init__(self, n: int, q_in: int, q_out: int, coeffs: dict[CoeffKey, object]):
        self.n = n
        self.q_in = q_in
        self.q_out = q_out
        self.coeffs: dict[CoeffKey, object] = {}
        for (a, A, i), c in coeffs.items():
            if c is None or c.is_zero():
                continue
            if not (0 <= a < q_out and 0 <= i < q_in):
                raise ValueError(f"coefficient index ({a}, {A}, {i}) out of range")
            self.coeffs[(a, tuple(sorted(A)), i)] = c
        self.r = max((len(A) for (_, A, _) in self.coeffs), default=0)
        self._adjoint: LinearPDO | None = None
        self._deriv_cache: dict[tuple[CoeffKey, MultiIndex], object] = {}

    def coeff(self, a: int, A: MultiIndex, i: int):
        return self.coeffs.get((a, tuple(A), i))

    def coeff_derivative(self, a: int, A: MultiIndex, i: int, D: MultiIndex):
        """The exact field d_D Lambda^{aA}_i, or None if identically zero."""
        base = self.coeffs.get((a, tuple(A), i))
        if base is None:
            return None
        D = tuple(sorted(D))
        if not D:
            return base
        key = ((a, tuple(A), i), D)
        if key not in self._deriv_cache:
            derived = _diff_by_index(base, D)
            self._deriv_cache[key] = None if derived.is_zero() else derived
        return self._deriv_cache[key]

    def apply(self, sections: list[Polynomial]) -> list[Polynomial]:
        """Exact application to polynomial sections (polynomial coefficients only)."""
        if len(sections) != self.q_in:
            raise ValueError(f"expected {self.q_in} section components, got {len(sections)}")
        out = [Polynomial.zero() for _ in range(self.q_out)]
        for (a, A, i), c in self.coeffs.items():
            if not isinstance(c, Polynomial):
                raise TypeError("symbolic apply needs polynomial coefficients")
            df = sections[i]
            for axis in A:
                df = df.diff(axis)
            if df.is_zero():
                continue
            out[a] = out[a] + c * df
        return out

    def apply_at(self, sections: list[Polynomial], x) -> np.ndarray:
        return self.apply_jet_at(sections, (), x)

    def apply_jet_at(self, sections: list[Polynomial], B: MultiIndex, x) -> np.ndarray:
        """d_B (L sections)(x), exact, for any coefficient backend.

        Leibniz over the split B = B1 + B2: coefficient jets times exact
        derivatives of the polynomial sections.
        """
        EB = index_exponents(tuple(B), self.n)
        out = np.zeros(self.q_out)
        section_jets: dict[tuple[int, MultiIndex], float] = {}
        for (a, A, i), _c in self.coeffs.items():
            for F in _sub_exponents(EB):
                B1 = exponents_index(F)
                cder = self.coeff_derivative(a, A, i, B1)
                if cder is None:
                    continue
                B2 = exponents_index(tuple(e - f for e, f in zip(EB, F)))
                full = tuple(sorted(tuple(A) + B2))
                skey = (i, full)
                if skey not in section_jets:
                    p = sections[i]
                    for axis in full:
                        p = p.diff(axis)
                    section_jets[skey] = p.eval(x)
                sval = section_jets[skey]
                if sval == 0.0:
                    continue
                out[a] += exp_binomial(EB, F) * cder.eval(x) * sval
        return out

    def adjoint(self) -> "LinearPDO":
        """Formal adjoint: derivatives moved off the unknown with (-1)^|A| signs.

        Coefficients come out through the Leibniz expansion, so they stay in
        the same coefficient algebra; the double adjoint reproduces the
        operator coefficient-by-coefficient.
        """
        if self._adjoint is not None:
            return self._adjoint
        accum: dict[CoeffKey, object] = {}
        for (a, A, i), c in self.coeffs.items():
            EA = index_exponents(A, self.n)
            sign = -1 if len(A) % 2 else 1
            for F in _sub_exponents(EA):
                B = exponents_index(F)
                D = exponents_index(tuple(e - f for e, f in zip(EA, F)))
                derived = _diff_by_index(c, D)
                if derived.is_zero():
                    continue
                term = derived.scale(Fraction(sign * exp_binomial(EA, F)))
                key = (i, B, a)
                accum[key] = term if key not in accum else accum[key] + term
        adj = LinearPDO(self.n, q_in=self.q_out, q_out=self.q_in, coeffs=accum)
        self._adjoint = adj
        return adj

    def is_uts(self, m: int) -> bool:
        """Exact upper-total-symmetry of the top block for target rank m.

        In multiset storage the ordered-tensor condition reads: for any two
        decompositions (slot, rest) of one multiset with slots < m+1, the
        stored coefficients are proportional to the orbit sizes of the rests.
        """
        if self.q_in != m + 1:
            return False
        for (a, A, i), c in self.coeffs.items():
            if len(A) != self.r:
                continue
            S = tuple(sorted(A + (i,)))
            for alt in set(S):
                if alt >= m + 1 or alt == i:
                    continue
                rest = list(S)
                rest.remove(alt)
                other = self.coeffs.get((a, tuple(rest), alt))
                mult_here = index_multiplicity(A)
                mult_other = index_multiplicity(tuple(rest))
                lhs = c.scale(Fraction(mult_other))
                rhs = other.scale(Fraction(mult_here)) if other is not None else None
                if rhs is None or not (lhs - rhs).is_zero():
                    return False
        return True

    def to_json_dict(self) -> dict:
        entries = []
        for (a, A, i), c in sorted(self.coeffs.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2])):
            if not isinstance(c, Polynomial):
                raise TypeError("only polynomial-coefficient operators serialize")
            entries.append(
                {
                    "a": a + 1,
                    "A": [axis + 1 for axis in A],
                    "i": i + 1,
                    "poly": polynomial_to_json(self.n, c),
                }
            )
        return {"n": self.n, "r": self.r, "q": self.q_in, "q_prime": self.q_out, "coeffs": entries}

    @classmethod
    def from_json_dict(cls, data: dict) -> "LinearPDO":
        n = int(data["n"])
        coeffs: dict[CoeffKey, object] = {}
        for entry in data["coeffs"]:
            key = (
                int(entry["a"]) - 1,
                tuple(sorted(int(axis) - 1 for axis in entry["A"])),
                int(entry["i"]) - 1,
            )
            p = polynomial_from_json(n, entry["poly"])
            coeffs[key] = p if key not in coeffs else coeffs[key] + p
        return cls(n, q_in=int(data["q"]), q_out=int(data["q_prime"]), coeffs=coeffs)


def formal_adjoint(L: LinearPDO) -> LinearPDO:
    return L.adjoint()


def _sub_exponents(E: tuple[int, ...]):
    return itertools.product(*(range(e + 1) for e in E))


def polynomial_to_json(n: int, p: Polynomial) -> list[dict]:
    atoms = []
    for mon, c in sorted(p.terms.items()):
        powers = [0] * n
        for v, e in mon:
            powers[v] = e
        atoms.append(
            {
                "coeff": f"{c.numerator}/{c.denominator}" if c.denominator != 1 else str(c.numerator),
                "powers": powers,
            }
        )
    return atoms


def polynomial_from_json(n: int, atoms: list[dict]) -> Polynomial:
    out = Polynomial.zero()
    for atom in atoms:
        c = Fraction(str(atom["coeff"]))
        powers = atom["powers"]
        if len(powers) != n:
            raise ValueError("powers length mismatch")
        out = out + Polynomial.monomial(list(enumerate(powers)), c)
    return out


def load_pdo(path: str) -> LinearPDO:
    with open(path) as fh:
        return LinearPDO.from_json_dict(json.load(fh))


def lie_pdo(n: int, xi: list[Polynomial]) -> LinearPDO:
    """First-order homogeneous operator f -> xi^a d_a f (zero 0-order block)."""
    if len(xi) != n:
        raise ValueError("vector field needs n components")
    coeffs: dict[CoeffKey, object] = {(0, (axis,), 0): xi[axis] for axis in range(n)}
    return LinearPDO(n, q_in=1, q_out=1, coeffs=coeffs)


def vector_fields_pdo(n: int, fields: list[list[Polynomial]]) -> LinearPDO:
    """(f_1, ..., f_q) -> sum_i L_{xi_i} f_i, one equation from q unknowns."""
    coeffs: dict[CoeffKey, object] = {}
    for i, xi in enumerate(fields):
        if len(xi) != n:
            raise ValueError("vector field needs n components")
        for axis in range(n):
            if not xi[axis].is_zero():
                coeffs[(0, (axis,), i)] = xi[axis]
    return LinearPDO(n, q_in=len(fields), q_out=1, coeffs=coeffs)


@dataclass
class SubmanifoldSpec:
    """Codimension-k zero set H(x) = 0 with exact gradients of the stored H."""

    n: int
    polys: list[Polynomial]

    def __post_init__(self):
        self.k = len(self.polys)
        if self.k < 1:
            raise ValueError("need at least one defining polynomial")
        self.gradients = [[H.diff(axis) for axis in range(self.n)] for H in self.polys]

    @classmethod
    def from_json_dict(cls, data: dict) -> "SubmanifoldSpec":
        n = int(data["n"])
        return cls(n, [polynomial_from_json(n, atoms) for atoms in data["polys"]])


def transversality_matrices(L: LinearPDO, H: SubmanifoldSpec, x) -> list[np.ndarray]:
    """The k contracted top-order matrices T^l(x), each q_out x q_in.

    With multiset-canonical coefficient storage the contraction over ordered
    index tuples collapses to a sum over canonical indices of
    Lambda^{aA}_i(x) * prod_{axis in A} d_axis H^l(x).
    """
    grads = [np.array([g.eval(x) for g in grad]) for grad in H.gradients]
    mats = []
    for grad in grads:
        T = np.zeros((L.q_out, L.q_in))
        for (a, A, i), c in L.coeffs.items():
            if len(A) != L.r:
                continue
            factor = 1.0
            for axis in A:
                factor *= grad[axis]
            if factor != 0.0:
                T[a, i] += c.eval(x) * factor
        mats.append(T)
    return mats


def transversality_check(L: LinearPDO, H: SubmanifoldSpec, x, tol: float = DEFAULT_RANK_TOL) -> dict:
    """Transversal iff every T^l has maximal rank q_out at x."""
    mats = transversality_matrices(L, H, x)
    per_l = []
    for T in mats:
        rank = numerical_rank(T, tol)
        per_l.append({"rank": rank, "required": L.q_out, "maximal": rank == L.q_out})
    return {"per_l": per_l, "transversal": all(v["maximal"] for v in per_l)}


def characteristic_sweep(L: LinearPDO, H: SubmanifoldSpec, points, tol: float = DEFAULT_RANK_TOL) -> dict:
    """Report tangency (failed transversality) pointwise over a patch sweep."""
    points = np.asarray(points, dtype=float)
    tangent = []
    for idx in range(points.shape[0]):
        verdict = transversality_check(L, H, points[idx], tol)
        if not verdict["transversal"]:
            tangent.append(idx)
    return {
        "points": int(points.shape[0]),
        "tangent_points": tangent,
        "characteristic": len(tangent) == points.shape[0],
    }


@dataclass
class LargeInverseResult:
    large: bool
    witness: int | None
    lam: np.ndarray  # (P, q)
    dlam: np.ndarray  # (P, n, q)
    min_sigma: float


def large_operator_inverse(
    n: int, fields: list[list[Polynomial]], points, tol: float = DEFAULT_RANK_TOL
) -> LargeInverseResult:
    """Largeness certificate and pointwise zero-order inverse weights.

    The q x (n+1) matrix (xi_i^a | -d_a xi_i^a) must have rank n+1 at every
    point; the weights solve lam.xi^a = 0, lam.(d xi) = -1 with minimal
    Euclidean norm, and their exact derivatives come from differentiating the
    closed-form minimal-norm solution.
    """
    q = len(fields)
    if q <= n:
        raise ValueError("largeness needs q > n")
    points = np.asarray(points, dtype=float)
    P = points.shape[0]
    div = []
    for xi in fields:
        d = Polynomial.zero()
        for axis in range(n):
            d = d + xi[axis].diff(axis)
        div.append(d)
    rhs = np.zeros(n + 1)
    rhs[n] = 1.0
    lam = np.zeros((P, q))
    dlam = np.zeros((P, n, q))
    min_sigma = np.inf
    for idx in range(P):
        x = points[idx]
        mat = np.zeros((n + 1, q))  # rows: the n constraint rows, then the -div row
        for i, xi in enumerate(fields):
            for axis in range(n):
                mat[axis, i] = xi[axis].eval(x)
            mat[n, i] = -div[i].eval(x)
        svals = np.linalg.svd(mat, compute_uv=False)
        if svals[0] == 0 or svals[-1] <= tol * svals[0]:
            return LargeInverseResult(False, idx, lam, dlam, float(svals[-1]))
        min_sigma = min(min_sigma, float(svals[-1] / svals[0]))
        dmats = []
        for gamma in range(n):
            dmat = np.zeros((n + 1, q))
            for i, xi in enumerate(fields):
                for axis in range(n):
                    dmat[axis, i] = xi[axis].diff(gamma).eval(x)
                dmat[n, i] = -div[i].diff(gamma).eval(x)
            dmats.append(dmat)
        sol, dsols = solve_with_derivative(mat, dmats, rhs, [np.zeros(n + 1)] * n, tol)
        lam[idx] = sol
        for gamma in range(n):
            dlam[idx, gamma] = dsols[gamma]
    return LargeInverseResult(True, None, lam, dlam, min_sigma)


def large_identity_residual(
    n: int, fields: list[list[Polynomial]], result: LargeInverseResult, points, g: Polynomial
) -> float:
    """sup over points of |Xi(lam^i g) - g| using the exact lam derivatives."""
    points = np.asarray(points, dtype=float)
    dg = [g.diff(axis) for axis in range(n)]
    worst = 0.0
    for idx in range(points.shape[0]):
        x = points[idx]
        gval = g.eval(x)
        total = 0.0
        for i, xi in enumerate(fields):
            for axis in range(n):
                xival = xi[axis].eval(x)
                if xival == 0.0:
                    continue
                total += xival * (result.dlam[idx, axis, i] * gval + result.lam[idx, i] * dg[axis].eval(x))
        worst = max(worst, abs(total - gval))
    return worst


def _eval_poly_mesh(p: Polynomial, pts: np.ndarray) -> np.ndarray:
    out = np.zeros(pts.shape[0])
    for mon, c in p.terms.items():
        t = np.full(pts.shape[0], float(c))
        for v, e in mon:
            t = t * pts[:, v] ** e
        out += t
    return out


def duality_residual(
    L: LinearPDO,
    f_polys: list[Polynomial],
    g_polys: list[Polynomial],
    lo,
    hi,
    tol: float = 1e-6,
    orders=(4, 6, 8, 12, 16, 24),
) -> tuple[float, int]:
    """|<L u, v> - <u, adj(L) v>| on a box, with polynomial bump-supported u, v.

    u = w*f, v = w*g with w = prod((x-lo)(hi-x))^r, which kills every boundary
    term of the r-fold integration by parts while keeping all integrands
    polynomial.  Gauss-Legendre quadrature is refined until the mismatch drops
    below tol; returns (residual, order_used).
    """
    n = L.n
    bump = Polynomial.constant(1)
    for axis in range(n):
        lin = (Polynomial.variable(axis) - Polynomial.constant(Fraction(lo[axis]))) * (
            Polynomial.constant(Fraction(hi[axis])) - Polynomial.variable(axis)
        )
        bump = bump * lin ** max(L.r, 1)
    u = [bump * p for p in f_polys]
    v = [bump * p for p in g_polys]
    Lu = L.apply(u)
    Lbar_v = L.adjoint().apply(v)
    residual = np.inf
    used = orders[-1]
    for order in orders:
        nodes, weights = np.polynomial.legendre.leggauss(order)
        axes_nodes = []
        axes_weights = []
        for axis in range(n):
            a, b = lo[axis], hi[axis]
            axes_nodes.append(0.5 * (b - a) * nodes + 0.5 * (a + b))
            axes_weights.append(0.5 * (b - a) * weights)
        mesh = np.meshgrid(*axes_nodes, indexing="ij")
        pts = np.column_stack([m.reshape(-1) for m in mesh])
        wmesh = np.meshgrid(*axes_weights, indexing="ij")
        wts = np.ones(pts.shape[0])
        for wm in wmesh:
            wts = wts * wm.reshape(-1)
        lhs = sum(float(wts @ (_eval_poly_mesh(Lu[a], pts) * _eval_poly_mesh(v[a], pts))) for a in range(L.q_out))
        rhs = sum(float(wts @ (_eval_poly_mesh(u[i], pts) * _eval_poly_mesh(Lbar_v[i], pts))) for i in range(L.q_in))
        residual = abs(lhs - rhs)
        used = order
        if residual < tol:
            break
    return residual, used
