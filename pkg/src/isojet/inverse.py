"""Universal right inverses of UTS operators via the adjoint's algebraic system.

Finding a right inverse M of order s for L is equivalent to a left inverse of
the formal adjoint, which is a purely algebraic linear system in the s-jets of
the adjoint coefficients at each point.  This module assembles that system,
solves it pointwise with minimal norm, tests bundle membership (full row rank),
and realizes the right inverse numerically on grids.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .fd import STENCIL_REACH, fd_index_derivative
from .indices import MultiIndex, exp_binomial, exponents_index, index_exponents, multi_indices
from .linalg import DEFAULT_RANK_TOL, min_norm_solve, numerical_rank, rational_solve
from .maps import GridPatch
from .pdo import LinearPDO
from .poly import Polynomial

Unknown = tuple[int, MultiIndex]  # (alpha, B)
Equation = tuple[int, MultiIndex]  # (b, C)


def system_shape(n: int, m: int, r: int, s: int) -> tuple[int, int]:
    """(unknowns, equations) per independent block: (m+1)C(n+s,s), mC(n+r+s,r+s)."""
    import math

    return (m + 1) * math.comb(n + s, s), m * math.comb(n + r + s, r + s)


@dataclass
class AssembledSystem:
    x: np.ndarray
    s: int
    unknowns: list[Unknown]
    equations: list[Equation]
    matrix: np.ndarray
    m: int

    def rhs(self, a: int) -> np.ndarray:
        b = np.zeros(len(self.equations))
        b[self.equations.index((a, ()))] = 1.0
        return b


def _assembly_entries(L: LinearPDO, s: int):
    """Yield (row, col, binom, alpha, A, b, D) for every potential matrix term."""
    n, r, m = L.n, L.r, L.q_out
    unknowns = [(alpha, B) for alpha in range(m + 1) for B in multi_indices(n, s, "up_to")]
    equations = [(b, C) for b in range(m) for C in multi_indices(n, r + s, "up_to")]
    uexp = [(alpha, B, index_exponents(B, n)) for alpha, B in unknowns]
    for row, (b, C) in enumerate(equations):
        EC = index_exponents(C, n)
        oC = len(C)
        for col, (alpha, B, EB) in enumerate(uexp):
            cap = tuple(min(e, c) for e, c in zip(EB, EC))
            for F in itertools.product(*(range(c + 1) for c in cap)):
                oF = sum(F)
                if oC - oF > r:
                    continue
                A = exponents_index(tuple(c - f for c, f in zip(EC, F)))
                D = exponents_index(tuple(e - f for e, f in zip(EB, F)))
                yield row, col, exp_binomial(EB, F), alpha, A, b, D
    return


def assemble_system(L: LinearPDO, x, s: int) -> AssembledSystem:
    """The per-point linear system for the adjoint left inverse of order s.

    One matrix serves all m independent blocks; block a's right-hand side is
    the indicator of equation (b=a, C=empty).  Row and column orderings come
    from the shared multi-index enumeration.
    """
    if L.q_in != L.q_out + 1:
        raise ValueError(f"operator must map m+1 unknowns to m targets, got {L.q_in}->{L.q_out}")
    n, r, m = L.n, L.r, L.q_out
    unknowns = [(alpha, B) for alpha in range(m + 1) for B in multi_indices(n, s, "up_to")]
    equations = [(b, C) for b in range(m) for C in multi_indices(n, r + s, "up_to")]
    u_count, e_count = system_shape(n, m, r, s)
    assert (len(unknowns), len(equations)) == (u_count, e_count)
    Lbar = L.adjoint()
    mat = np.zeros((e_count, u_count))
    x = np.asarray(x, dtype=float)
    for row, col, binom, alpha, A, b, D in _assembly_entries(L, s):
        cder = Lbar.coeff_derivative(alpha, A, b, D)
        if cder is not None:
            mat[row, col] += binom * cder.eval(x)
    return AssembledSystem(x=x, s=s, unknowns=unknowns, equations=equations, matrix=mat, m=m)


def assemble_system_exact(L: LinearPDO, x_rational, s: int) -> tuple[list[list[Fraction]], list[Unknown], list[Equation]]:
    """Exact-rational assembly for polynomial-coefficient operators (cross-oracle)."""
    n, r, m = L.n, L.r, L.q_out
    unknowns = [(alpha, B) for alpha in range(m + 1) for B in multi_indices(n, s, "up_to")]
    equations = [(b, C) for b in range(m) for C in multi_indices(n, r + s, "up_to")]
    Lbar = L.adjoint()
    xq = [Fraction(v) for v in x_rational]
    mat = [[Fraction(0)] * len(unknowns) for _ in range(len(equations))]
    for row, col, binom, alpha, A, b, D in _assembly_entries(L, s):
        cder = Lbar.coeff_derivative(alpha, A, b, D)
        if cder is None:
            continue
        if not isinstance(cder, Polynomial):
            raise TypeError("exact assembly needs polynomial coefficients")
        mat[row][col] += binom * cder.eval_exact(xq)
    return mat, unknowns, equations


@dataclass
class PointSolve:
    solution: np.ndarray | None
    rank: int
    sigma_min: float
    residual: float
    consistent: bool
    full_row_rank: bool
    borderline: bool


def solve_pointwise(system: AssembledSystem, tol: float = DEFAULT_RANK_TOL) -> list[PointSolve]:
    """Minimal-norm solve of each independent block, with an honest verdict.

    An inconsistent block (the non-homogeneous row escapes the row space of
    the homogeneous ones) means no inverse exists at this point; that is the
    membership-failure outcome, distinct from a borderline-rank warning.
    """
    out = []
    for a in range(system.m):
        x, info = min_norm_solve(system.matrix, system.rhs(a), tol)
        out.append(
            PointSolve(
                solution=x if info["consistent"] else None,
                rank=info["rank"],
                sigma_min=info["sigma_min"],
                residual=info["residual"],
                consistent=info["consistent"],
                full_row_rank=info["full_row_rank"],
                borderline=info["borderline"],
            )
        )
    return out


@dataclass
class MembershipCertificate:
    s: int
    points: int
    full_row_rank_flags: np.ndarray
    sigma_min: np.ndarray
    member: bool
    witness: int | None

    def to_json_dict(self) -> dict:
        return {
            "s": self.s,
            "points": self.points,
            "member": self.member,
            "witness": self.witness,
            "min_sigma": float(self.sigma_min.min()) if self.points else None,
            "full_row_rank_fraction": float(self.full_row_rank_flags.mean()) if self.points else None,
        }


def bundle_membership(L: LinearPDO, points, s: int, tol: float = DEFAULT_RANK_TOL) -> MembershipCertificate:
    """Desk-scale membership test: full row rank of the system at every point."""
    if isinstance(points, GridPatch):
        points = points.points()
    points = np.asarray(points, dtype=float)
    flags = np.zeros(points.shape[0], dtype=bool)
    sig = np.zeros(points.shape[0])
    witness = None
    for p in range(points.shape[0]):
        system = assemble_system(L, points[p], s)
        svals = np.linalg.svd(system.matrix, compute_uv=False)
        smax = svals[0] if svals.size else 0.0
        rank = int((svals > tol * smax).sum()) if smax > 0 else 0
        flags[p] = rank == system.matrix.shape[0]
        sig[p] = float(svals[-1]) if svals.size else 0.0
        if not flags[p] and witness is None:
            witness = p
    return MembershipCertificate(
        s=s,
        points=points.shape[0],
        full_row_rank_flags=flags,
        sigma_min=sig,
        member=bool(flags.all()),
        witness=witness,
    )


@dataclass
class RightInverseField:
    """Pointwise-solved adjoint-inverse coefficients over a grid patch."""

    patch: GridPatch
    s: int
    unknowns: list[Unknown]
    values: np.ndarray  # shape counts + (m, n_unknowns)
    rank: int
    min_sigma: float


def solve_field(L: LinearPDO, patch: GridPatch, s: int, tol: float = DEFAULT_RANK_TOL) -> RightInverseField:
    """Solve the algebraic system at every grid point; rank must stay constant
    across the patch (minimal-norm selection is only smooth at constant rank)."""
    points = patch.points()
    m = L.q_out
    first = assemble_system(L, points[0], s)
    U = len(first.unknowns)
    values = np.zeros((points.shape[0], m, U))
    ranks = np.zeros(points.shape[0], dtype=int)
    min_sigma = np.inf
    for p in range(points.shape[0]):
        system = first if p == 0 else assemble_system(L, points[p], s)
        solves = solve_pointwise(system, tol)
        for a, sol in enumerate(solves):
            if sol.solution is None:
                raise ValueError(f"no inverse at grid point {p}: block {a} inconsistent")
            values[p, a] = sol.solution
        ranks[p] = solves[0].rank
        min_sigma = min(min_sigma, min(sol.sigma_min for sol in solves))
    if not (ranks == ranks[0]).all():
        bad = int(np.argmax(ranks != ranks[0]))
        raise ValueError(f"system rank changes across the patch (point {bad}); field not smooth")
    return RightInverseField(
        patch=patch,
        s=s,
        unknowns=first.unknowns,
        values=values.reshape(tuple(patch.counts) + (m, U)),
        rank=int(ranks[0]),
        min_sigma=float(min_sigma),
    )


def verify_left_inverse(
    L: LinearPDO,
    mbar_values: np.ndarray,
    unknowns: list[Unknown],
    g_polys: list[Polynomial],
    points,
) -> float:
    """sup |Mbar(adj(L) g) - g| using only pointwise Mbar values.

    adj(L) g and its derivatives are computed exactly, so the check needs no
    derivatives of Mbar: the left-inverse condition is algebraic in the jets
    of the adjoint coefficients.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[None, :]
    Lbar = L.adjoint()
    m = L.q_out
    worst = 0.0
    bees = sorted({B for _, B in unknowns}, key=lambda B: (len(B), B))
    for p in range(points.shape[0]):
        x = points[p]
        ujets = {B: Lbar.apply_jet_at(g_polys, B, x) for B in bees}
        gvals = np.array([g.eval(x) for g in g_polys])
        for a in range(m):
            total = 0.0
            for col, (alpha, B) in enumerate(unknowns):
                total += mbar_values[p, a, col] * ujets[B][alpha]
            worst = max(worst, abs(total - gvals[a]))
    return worst


def _coeff_grid(coeff, points: np.ndarray) -> np.ndarray:
    return np.array([coeff.eval(points[p]) for p in range(points.shape[0])])


def apply_right_inverse(
    field: RightInverseField, L: LinearPDO, g_polys: list[Polynomial], order: int = 2
) -> np.ndarray:
    """Realize M = adjoint of the solved field on the grid: h with L h ~ g.

    h_alpha = sum_{a,B} (-1)^|B| d_B(Mbar^{aB}_alpha g^a), derivatives taken by
    central differences of the solved coefficient field; entries without a full
    stencil are NaN.  Discretization error is O(h^order).
    """
    patch = field.patch
    counts = tuple(patch.counts)
    points = patch.points()
    m = L.q_out
    gvals = [np.array([g.eval(points[p]) for p in range(points.shape[0])]).reshape(counts) for g in g_polys]
    h = np.zeros(counts + (m + 1,))
    for col, (alpha, B) in enumerate(field.unknowns):
        sign = -1.0 if len(B) % 2 else 1.0
        for a in range(m):
            prod = field.values[..., a, col] * gvals[a]
            if len(B) == 0:
                term = prod
            else:
                term = fd_index_derivative(prod, B, patch.spacing, order)
            h[..., alpha] += sign * term
    return h


def fd_apply_pdo(L: LinearPDO, h_field: np.ndarray, patch: GridPatch, order: int = 2) -> np.ndarray:
    """Apply L to a grid section field with FD derivatives; NaN margins propagate."""
    counts = tuple(patch.counts)
    points = patch.points()
    out = np.zeros(counts + (L.q_out,))
    for (b, A, i), coeff in L.coeffs.items():
        cvals = _coeff_grid(coeff, points).reshape(counts)
        dh = h_field[..., i] if len(A) == 0 else fd_index_derivative(h_field[..., i], A, patch.spacing, order)
        out[..., b] += cvals * dh
    return out


@dataclass
class RightInverseCheck:
    residual_coarse: float
    residual_fine: float
    ratio: float
    h_coarse: np.ndarray
    field: RightInverseField


def right_inverse_with_refinement(
    L: LinearPDO,
    g_polys: list[Polynomial],
    patch: GridPatch,
    s: int,
    tol: float = DEFAULT_RANK_TOL,
    order: int = 2,
    ratio_window: tuple[float, float] = (3.0, 5.0),
) -> RightInverseCheck:
    """Solve, apply, and certify O(h^2) convergence of L(M(g)) -> g by Richardson."""

    def residual_on(p: GridPatch) -> tuple[float, np.ndarray, RightInverseField]:
        fld = solve_field(L, p, s, tol)
        h = apply_right_inverse(fld, L, g_polys, order)
        lh = fd_apply_pdo(L, h, p, order)
        pts = p.points()
        g = np.stack([np.array([gp.eval(pts[i]) for i in range(pts.shape[0])]) for gp in g_polys], axis=-1)
        diff = np.abs(lh.reshape(-1, L.q_out) - g)
        valid = ~np.isnan(diff).any(axis=1)
        if not valid.any():
            raise ValueError("grid too coarse: no interior points survive the stencils")
        return float(diff[valid].max()), h, fld

    res_c, h_c, fld = residual_on(patch)
    res_f, _, _ = residual_on(patch.refine())
    ratio = res_c / res_f if res_f > 0 else float("inf")
    if not (ratio_window[0] <= ratio <= ratio_window[1]):
        raise ValueError(
            f"Richardson ratio {ratio:.2f} outside {ratio_window}; refine the grid "
            f"(residuals {res_c:.3e} -> {res_f:.3e})"
        )
    return RightInverseCheck(res_c, res_f, ratio, h_c, fld)


def exact_cross_check(L: LinearPDO, x_rational, s: int, tol: float = DEFAULT_RANK_TOL) -> dict:
    """Compare float SVD rank/consistency with the exact rational elimination."""
    system = assemble_system(L, [float(v) for v in x_rational], s)
    mat_exact, unknowns, equations = assemble_system_exact(L, x_rational, s)
    report = {"blocks": []}
    for a in range(system.m):
        b_exact = [Fraction(0)] * len(equations)
        b_exact[equations.index((a, ()))] = Fraction(1)
        rank_q, consistent_q, particular = rational_solve(mat_exact, b_exact)
        x_f, info = min_norm_solve(system.matrix, system.rhs(a), tol)
        entry = {
            "rank_exact": rank_q,
            "rank_float": info["rank"],
            "consistent_exact": consistent_q,
            "consistent_float": info["consistent"],
        }
        if consistent_q:
            resid = max(
                abs(sum(float(mat_exact[row][col]) * x_f[col] for col in range(len(unknowns))) - float(b_exact[row]))
                for row in range(len(equations))
            )
            entry["float_solution_residual_on_exact_rows"] = resid
        report["blocks"].append(entry)
    report["agree"] = all(
        e["rank_exact"] == e["rank_float"] and e["consistent_exact"] == e["consistent_float"]
        for e in report["blocks"]
    )
    return report
