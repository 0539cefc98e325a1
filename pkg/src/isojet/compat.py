"""Dependence coefficients of full (r+1)-rank maps and the compatibility operator.

Between the jet vectors of orders 1..r+1 of a full (r+1)-rank map hold exactly
m = s_{n,r+1} - q linear relations; the coefficients are signed q x q minors of
the jet matrix, stored here as polynomials in the jet coordinates f^i_A so they
can be prolonged and evaluated exactly along the map.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import scipy.linalg

from .indices import MultiIndex, jet_multi_indices, multi_indices, uts_top_count
from .jetring import JetCoeff, JetRing
from .linalg import DEFAULT_RANK_TOL, line_angle, nullspace
from .maps import AnalyticMap, AtomSum, GridPatch, jet_matrices_grid, rank_profile
from .pdo import CoeffKey, LinearPDO
from .poly import Monomial, Polynomial

RESIDUAL_REL_TOL = 1e-12


def _perm_sign(perm) -> int:
    seen = [False] * len(perm)
    sign = 1
    for start in range(len(perm)):
        if seen[start]:
            continue
        length = 0
        j = start
        while not seen[j]:
            seen[j] = True
            j = perm[j]
            length += 1
        if length % 2 == 0:
            sign = -sign
    return sign


def variable_det(columns: list[list[int]]) -> Polynomial:
    """Determinant of a square matrix whose (row, col) entry is the variable
    columns[col][row]; expanded directly over permutations (all entries are
    distinct degree-1 variables, so no polynomial products are needed)."""
    q = len(columns)
    terms: dict[Monomial, Fraction] = {}
    one = Fraction(1)
    for perm in itertools.permutations(range(q)):
        mon = tuple(sorted((columns[col][row], 1) for row, col in enumerate(perm)))
        c = terms.get(mon, 0) + _perm_sign(perm) * one
        if c:
            terms[mon] = c
        else:
            terms.pop(mon, None)
    out = Polynomial()
    out.terms = terms
    return out


@dataclass
class PivotBranch:
    """One pivot choice and the coefficient polynomials valid on its points."""

    point_indices: np.ndarray
    pivot_positions: tuple[int, ...]  # positions in the jet-index list, the independent block
    dependent_positions: tuple[int, ...]
    lams: list[dict[MultiIndex, Polynomial]] = field(default_factory=list)


class CompatibilityCoeffs:
    def __init__(self, f: AnalyticMap, r: int, points: np.ndarray, ring: JetRing,
                 jet_indices: list[MultiIndex], branches: list[PivotBranch],
                 residual_max_rel: float, tol: float):
        self.f = f
        self.r = r
        self.points = points
        self.ring = ring
        self.jet_indices = jet_indices
        self.branches = branches
        self.residual_max_rel = residual_max_rel
        self.tol = tol
        self.n = f.n
        self.q = f.q
        self.m = len(jet_indices) - f.q

    def lambda_poly(self, a: int, A: MultiIndex, branch: int = 0) -> Polynomial:
        return self.branches[branch].lams[a].get(tuple(A), Polynomial.zero())

    def lambda_value_table(self, points: np.ndarray, branch: int = 0) -> np.ndarray:
        """Numeric lambda^A_a over points, shape (P, m, N); batched determinants."""
        br = self.branches[branch]
        N = len(self.jet_indices)
        stacked = jet_matrices_grid(self.f, points, self.r + 1)
        piv = list(br.pivot_positions)
        out = np.zeros((points.shape[0], self.m, N))
        v0 = np.linalg.det(stacked[:, :, piv])
        for a, dep in enumerate(br.dependent_positions):
            out[:, a, dep] = (-1) ** self.q * v0
            for idx in range(self.q):
                cols = piv[:idx] + piv[idx + 1 :] + [dep]
                out[:, a, piv[idx]] = (-1) ** idx * np.linalg.det(stacked[:, :, cols])
        return out

    def defining_relation_residual(self, points: np.ndarray, branch: int = 0) -> float:
        """max over points/relations of |sum_A lambda^A_a d_A f| / scale."""
        stacked = jet_matrices_grid(self.f, points, self.r + 1)
        lam = self.lambda_value_table(points, branch)
        worst = 0.0
        for a in range(self.m):
            combo = np.einsum("pqN,pN->pq", stacked, lam[:, a, :])
            scale = np.abs(lam[:, a, :]).max(axis=1) * np.abs(stacked).max(axis=(1, 2))
            scale = np.where(scale > 0, scale, 1.0)
            worst = max(worst, float((np.abs(combo).max(axis=1) / scale).max()))
        return worst

    def nullspace_agreement(self, points: np.ndarray, branch: int = 0,
                            tol: float = DEFAULT_RANK_TOL) -> float:
        """Largest angle between each lambda row and the numeric jet-matrix kernel."""
        stacked = jet_matrices_grid(self.f, points, self.r + 1)
        lam = self.lambda_value_table(points, branch)
        worst = 0.0
        for p in range(points.shape[0]):
            basis = nullspace(stacked[p], tol)
            for a in range(self.m):
                vec = lam[p, a]
                proj = basis @ (basis.T @ vec)
                worst = max(worst, line_angle(vec, proj))
        return worst

    def top_vanishing_keys(self, branch: int = 0, rel_tol: float = 1e-9) -> list[tuple[int, MultiIndex]]:
        """Top-order (a, A) whose coefficient vanishes identically along f on the points."""
        lam = self.lambda_value_table(self.points, branch)
        scale = np.abs(lam).max() or 1.0
        out = []
        for a in range(self.m):
            for pos, A in enumerate(self.jet_indices):
                if len(A) != self.r + 1:
                    continue
                if np.abs(lam[:, a, pos]).max() <= rel_tol * scale:
                    out.append((a, A))
        return out


def dependence_coeffs(
    f: AnalyticMap,
    r: int,
    points,
    tol: float = DEFAULT_RANK_TOL,
    ring: JetRing | None = None,
) -> CompatibilityCoeffs:
    """Signed-minor dependence coefficients of a certified full (r+1)-rank map.

    Pivots are chosen by column-pivoted QR at the point nearest the patch
    centroid and reused wherever the pivot block keeps its singular-value
    margin; points where it degrades are re-pivoted into separate branches.
    """
    if isinstance(points, GridPatch):
        points = points.points()
    points = np.asarray(points, dtype=float)
    cert = rank_profile(f, points, r + 1, tol)
    if cert.classification != f"full {r + 1}-rank":
        detail = "" if cert.witness is None else f" ({cert.witness[1]})"
        raise ValueError(f"map is {cert.classification}, not full {r + 1}-rank{detail}")
    n, q = f.n, f.q
    jet_idx = jet_multi_indices(n, r + 1)
    N = len(jet_idx)
    m = N - q
    stacked = jet_matrices_grid(f, points, r + 1)

    def pivot_at(p: int) -> tuple[int, ...]:
        _, _, perm = scipy.linalg.qr(stacked[p], pivoting=True)
        return tuple(sorted(int(c) for c in perm[:q]))

    def pivot_valid(pivot: tuple[int, ...], idx: np.ndarray) -> np.ndarray:
        blocks = stacked[idx][:, :, list(pivot)]
        svals = np.linalg.svd(blocks, compute_uv=False)
        full = np.linalg.svd(stacked[idx], compute_uv=False)
        return svals[:, -1] > tol * full[:, 0]

    centroid = points.mean(axis=0)
    center = int(np.argmin(np.linalg.norm(points - centroid, axis=1)))
    ring = ring or JetRing(n)
    remaining = np.arange(points.shape[0])
    branches: list[PivotBranch] = []
    pivot = pivot_at(center)
    while remaining.size:
        ok = pivot_valid(pivot, remaining)
        covered = remaining[ok]
        if covered.size == 0:
            raise ValueError(
                f"pivot {pivot} invalid even at its defining point; rank margin lost"
            )
        branches.append(_build_branch(ring, f, jet_idx, pivot, covered))
        remaining = remaining[~ok]
        if remaining.size:
            pivot = pivot_at(int(remaining[0]))
    coeffs = CompatibilityCoeffs(f, r, points, ring, jet_idx, branches, 0.0, tol)
    coeffs.residual_max_rel = max(
        coeffs.defining_relation_residual(points[br.point_indices], b)
        for b, br in enumerate(branches)
    )
    if coeffs.residual_max_rel > RESIDUAL_REL_TOL:
        raise AssertionError(
            f"defining relation residual {coeffs.residual_max_rel:.3e} above {RESIDUAL_REL_TOL}"
        )
    return coeffs


def _build_branch(ring: JetRing, f: AnalyticMap, jet_idx, pivot, point_indices) -> PivotBranch:
    q = f.q
    dep = tuple(pos for pos in range(len(jet_idx)) if pos not in pivot)
    piv = list(pivot)
    col_vars = {pos: [ring.var_id(i, jet_idx[pos]) for i in range(q)] for pos in range(len(jet_idx))}
    lams: list[dict[MultiIndex, Polynomial]] = []
    for dep_pos in dep:
        lam_a: dict[MultiIndex, Polynomial] = {}
        v0 = variable_det([col_vars[pos] for pos in piv])
        lam_a[jet_idx[dep_pos]] = v0.scale((-1) ** q)
        for idx in range(q):
            cols = piv[:idx] + piv[idx + 1 :] + [dep_pos]
            det = variable_det([col_vars[pos] for pos in cols])
            if not det.is_zero():
                lam_a[jet_idx[piv[idx]]] = det.scale((-1) ** idx)
        lams.append(lam_a)
    return PivotBranch(np.asarray(point_indices), tuple(piv), dep, lams)


@dataclass
class CompatibilityPDO:
    """Order-r operator in n unknowns h_alpha whose surjectivity restores
    solvability of the underdetermined jet system; for r = 1 it also carries
    the symmetrized right-hand-side builder of the isometric case."""

    coeffs: CompatibilityCoeffs
    pdo: LinearPDO
    branch: int = 0

    def rhs_value(self, dg_value, x) -> np.ndarray:
        """(1/2) sum_{a<=b} lambda^{ab}_a(x) dg_{ab}(x); isometric case r = 1."""
        if self.coeffs.r != 1:
            raise ValueError("right-hand-side builder is the r = 1 (isometric) form")
        cc = self.coeffs
        pt = np.asarray(x, dtype=float)[None, :]
        lam = cc.lambda_value_table(pt, self.branch)[0]
        g = dg_value(x) if callable(dg_value) else dg_value
        out = np.zeros(cc.m)
        for a in range(cc.m):
            for pos, A in enumerate(cc.jet_indices):
                if len(A) != 2:
                    continue
                out[a] += 0.5 * lam[a, pos] * g[A[0], A[1]]
        return out

    def rhs_atoms(self, dg_entries: list[list[AtomSum]]) -> list[AtomSum]:
        """Exact RHS as atom sums; needs a trig-free base map."""
        cc = self.coeffs
        if cc.r != 1:
            raise ValueError("right-hand-side builder is the r = 1 (isometric) form")
        out = []
        for a in range(cc.m):
            total = AtomSum.zero(cc.n)
            for A in cc.jet_indices:
                if len(A) != 2:
                    continue
                lam_poly = cc.lambda_poly(a, A, self.branch)
                if lam_poly.is_zero():
                    continue
                composed = JetCoeff(cc.ring, cc.f, lam_poly).compose_polynomial()
                total = total + dg_entries[A[0]][A[1]].mul_polynomial(composed.scale(Fraction(1, 2)))
            out.append(total)
        return out


def compatibility_pdo(coeffs: CompatibilityCoeffs, branch: int = 0) -> CompatibilityPDO:
    """Split each dependence coefficient over its (slot, derivative) readings.

    A relation index A' of order k contributes weight count_alpha(A')/k to the
    operator coefficient of d_{A'\alpha} h_alpha; for r = 1 this reproduces the
    half-weights of the symmetrized isometric coefficients.
    """
    cc = coeffs
    pdo_coeffs: dict[CoeffKey, object] = {}
    for a in range(cc.m):
        for Aprime, lam in cc.branches[branch].lams[a].items():
            if lam.is_zero():
                continue
            k = len(Aprime)
            for alpha in sorted(set(Aprime)):
                rest = list(Aprime)
                rest.remove(alpha)
                weight = Fraction(Aprime.count(alpha), k)
                term = JetCoeff(cc.ring, cc.f, lam.scale(weight))
                key = (a, tuple(rest), alpha)
                pdo_coeffs[key] = term if key not in pdo_coeffs else pdo_coeffs[key] + term
    pdo = LinearPDO(cc.n, q_in=cc.n, q_out=cc.m, coeffs=pdo_coeffs)
    return CompatibilityPDO(coeffs=cc, pdo=pdo, branch=branch)


@dataclass
class UTSRestriction:
    relabeling: tuple[int, ...]  # new axis of each old axis
    pdo: LinearPDO
    coeffs: CompatibilityCoeffs  # coefficients of the relabeled map
    vanishing_top: list[tuple[int, MultiIndex]]
    retained_top_nonzero: int
    expected_top_count: int | None
    uts_certified: bool


def uts_restriction(
    coeffs: CompatibilityCoeffs,
    tol: float = DEFAULT_RANK_TOL,
    branch: int = 0,
) -> UTSRestriction:
    """Restrict the compatibility operator to the unknowns h_1..h_{m+1}.

    When n > m+1 a coordinate relabeling must push every identically-vanishing
    top dependence coefficient onto axes above m+1; when n = m+1 nothing is
    dropped and no relabeling is needed.  The upper-total-symmetry of the
    retained block holds identically by construction and is re-certified.
    """
    cc = coeffs
    n, m, r = cc.n, cc.m, cc.r
    if m == 0:
        empty = LinearPDO(n, q_in=1, q_out=0, coeffs={})
        return UTSRestriction(tuple(range(n)), empty, cc, [], 0, None, True)
    vanishing = cc.top_vanishing_keys(branch)
    if n == m + 1:
        perm = tuple(range(n))
        base = cc
    else:
        if n < m + 1 + r * m:
            raise ValueError(f"relabeling hypothesis needs n >= m+1+r*m, got n={n}, m={m}, r={r}")
        support = sorted({axis for _, A in vanishing for axis in A})
        if len(support) > n - (m + 1):
            raise ValueError(
                "no coordinate relabeling isolates the vanishing top coefficients "
                f"{[(a, tuple(x + 1 for x in A)) for a, A in vanishing]}: "
                f"{len(support)} axes involved, only {n - (m + 1)} droppable"
            )
        perm_list = [-1] * n
        high = n - 1
        for axis in reversed(support):
            perm_list[axis] = high
            high -= 1
        free_slots = [s for s in range(n) if s not in set(perm_list)]
        it = iter(free_slots)
        for axis in range(n):
            if perm_list[axis] < 0:
                perm_list[axis] = next(it)
        perm = tuple(perm_list)
        f_rel = cc.f.permute_axes(list(perm))
        pts_rel = np.empty_like(cc.points)
        for old_axis in range(n):
            pts_rel[:, perm[old_axis]] = cc.points[:, old_axis]
        base = dependence_coeffs(f_rel, r, pts_rel, tol)
    full = compatibility_pdo(base, 0 if base is not cc else branch)
    kept: dict[CoeffKey, object] = {
        key: c for key, c in full.pdo.coeffs.items() if key[2] < m + 1
    }
    pdo = LinearPDO(n, q_in=m + 1, q_out=m, coeffs=kept)
    certified = pdo.is_uts(m)
    if not certified:
        raise AssertionError("restricted operator lost upper total symmetry")
    retained = sum(1 for (a, A, i) in pdo.coeffs if len(A) == r)
    expected = uts_top_count(n, m, r) if m + 1 <= n else None
    return UTSRestriction(perm, pdo, base, vanishing, retained, expected, certified)


@dataclass
class IndependenceReport:
    selection: list[tuple[int, MultiIndex]]
    s: int
    samples: int
    full_rank_fraction: float
    independent: bool


def independence_check(
    coeffs: CompatibilityCoeffs,
    selection: list[tuple[int, MultiIndex]] | None = None,
    s: int = 0,
    samples: int = 200,
    seed: int = 0,
    tol: float = DEFAULT_RANK_TOL,
    branch: int = 0,
) -> IndependenceReport:
    """Functional independence of chosen coefficients and their prolongations.

    The coefficients and their derivatives up to order s are polynomials on a
    higher jet space; their Jacobian with respect to all jet coordinates is
    evaluated at random fiber points, and the verdict is positive when it has
    full row rank on at least 95% of the samples.
    """
    cc = coeffs
    if selection is None:
        selection = []
        for a in range(cc.m):
            for A, lam in sorted(cc.branches[branch].lams[a].items()):
                if not lam.is_zero():
                    selection.append((a, tuple(A)))
        selection = selection[: cc.q]
        if len(selection) < cc.q:
            raise ValueError(f"only {len(selection)} nonzero coefficients available, need {cc.q}")
    funcs: list[Polynomial] = []
    for a, A in selection:
        lam = cc.lambda_poly(a, A, branch)
        if lam.is_zero():
            raise ValueError(f"selected coefficient ({a}, {A}) is the zero polynomial")
        for B in multi_indices(cc.n, s, "up_to"):
            p = lam
            for axis in B:
                p = cc.ring.prolong(p, axis)
            funcs.append(p)
    var_ids = sorted(set().union(*(p.vars_used() for p in funcs)))
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(samples):
        values = dict(zip(var_ids, rng.uniform(-1.0, 1.0, size=len(var_ids))))
        jac = np.array([[p.diff(v).eval(values) for v in var_ids] for p in funcs])
        svals = np.linalg.svd(jac, compute_uv=False)
        if svals.size and svals[0] > 0 and (svals > tol * svals[0]).sum() == len(funcs):
            hits += 1
    frac = hits / samples
    return IndependenceReport(selection, s, samples, frac, frac >= 0.95)


def jet_poly_to_json(ring: JetRing, p: Polynomial) -> list[dict]:
    """Serialized jet polynomial: factors name jet coordinates (i, A) 1-based."""
    out = []
    for mon, c in sorted(p.terms.items()):
        factors = []
        for vid, e in mon:
            i, A = ring.key_of(vid)
            factors.append({"i": i + 1, "A": [axis + 1 for axis in A], "exp": e})
        out.append(
            {
                "coeff": f"{c.numerator}/{c.denominator}" if c.denominator != 1 else str(c.numerator),
                "factors": factors,
            }
        )
    return out
