"""Algebraic inversion of the metric linearization and Newton continuation.

The product rule turns the first-order linearized isometry system into a
pointwise linear system on the stacked first- and second-derivative rows, with
n auxiliary functions h on the right-hand side.  Free maps solve it with h = 0;
full 2-rank maps first choose h so the dependent rows stay consistent, through
the compatibility operator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .compat import compatibility_pdo, dependence_coeffs, uts_restriction
from .fd import grid_jets_order2
from .indices import minimal_jet_order, multi_indices
from .inverse import bundle_membership
from .jetring import JetCoeff
from .linalg import DEFAULT_RANK_TOL, solve_with_derivative
from .maps import AnalyticMap, AtomSum, GridPatch, jet_matrices_grid, rank_profile
from .metric import ClosedFormMetric

CONSISTENCY_TOL = 1e-8


def nash_row_indices(n: int) -> list[tuple[int, ...]]:
    """Row order of the algebraic system: n first-order rows, then pairs a<=b."""
    return [(alpha,) for alpha in range(n)] + multi_indices(n, 2, "exact")


def nash_matrix(f: AnalyticMap, x) -> np.ndarray:
    """(n + s_n) x q matrix stacking d_a f rows and 2 d2_ab f rows at x."""
    rows = []
    for A in nash_row_indices(f.n):
        vec = f.jet_vector(A, x)
        rows.append(vec if len(A) == 1 else 2.0 * vec)
    return np.array(rows)


def _nash_matrix_derivatives(f: AnalyticMap, x) -> list[np.ndarray]:
    """d/dx^gamma of the system matrix, from exact 2- and 3-jets."""
    out = []
    for gamma in range(f.n):
        rows = []
        for A in nash_row_indices(f.n):
            vec = f.jet_vector(tuple(sorted(A + (gamma,))), x)
            rows.append(vec if len(A) == 1 else 2.0 * vec)
        out.append(np.array(rows))
    return out


def _metric_values(dg, x) -> np.ndarray:
    if hasattr(dg, "value"):
        return dg.value(x)
    return np.asarray(dg, dtype=float)


@dataclass
class FreeInverseResult:
    points: np.ndarray
    values: np.ndarray  # (P, q)
    derivatives: np.ndarray | None  # (P, n, q)
    identity_residual: float | None
    jets_of_f_consumed: int
    dg_order_consumed: int


def infinitesimal_inverse_free(
    f: AnalyticMap,
    dg,
    points,
    tol: float = DEFAULT_RANK_TOL,
    with_derivative: bool = True,
) -> FreeInverseResult:
    """Pointwise minimal-norm solve of the algebraic system with h = 0.

    For a certified free map the system matrix has full row rank, so the
    solve is algebraic in the 2-jets of f and the values of dg (order 0).
    With `with_derivative` the exact derivative of the minimal-norm field is
    propagated (consuming 3-jets of f) and the linearization identity
    T_f D(delta f) = dg is verified exactly.
    """
    if isinstance(points, GridPatch):
        points = points.points()
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[None, :]
    cert = rank_profile(f, points, 2, tol)
    if cert.classification != "2-free":
        detail = "" if cert.witness is None else f": {cert.witness[1]}"
        raise ValueError(f"map is {cert.classification}, not 2-free{detail}")
    n, q = f.n, f.q
    pairs = multi_indices(n, 2, "exact")
    P = points.shape[0]
    values = np.zeros((P, q))
    derivs = np.zeros((P, n, q)) if with_derivative else None
    worst = 0.0 if with_derivative else None
    for p in range(P):
        x = points[p]
        A = nash_matrix(f, x)
        g = _metric_values(dg, x)
        rhs = np.zeros(n + len(pairs))
        for row, (a, b) in enumerate(pairs, start=n):
            rhs[row] = -g[a, b]
        if not with_derivative:
            values[p] = np.linalg.lstsq(A, rhs, rcond=None)[0]
            continue
        dA = _nash_matrix_derivatives(f, x)
        drhs = []
        for gamma in range(n):
            dg_gamma = dg.derivative_value(gamma, x) if hasattr(dg, "derivative_value") else np.zeros((n, n))
            dr = np.zeros(n + len(pairs))
            for row, (a, b) in enumerate(pairs, start=n):
                dr[row] = -dg_gamma[a, b]
            drhs.append(dr)
        sol, dsols = solve_with_derivative(A, dA, rhs, drhs, tol)
        values[p] = sol
        for gamma in range(n):
            derivs[p, gamma] = dsols[gamma]
        Jf = np.column_stack([f.jet_vector((axis,), x) for axis in range(n)])
        lin = np.empty((n, n))
        for a in range(n):
            for b in range(a, n):
                v = float(Jf[:, a] @ derivs[p, b] + Jf[:, b] @ derivs[p, a])
                lin[a, b] = v
                lin[b, a] = v
        worst = max(worst, float(np.abs(lin - g).max()))
    return FreeInverseResult(
        points=points,
        values=values,
        derivatives=derivs,
        identity_residual=worst,
        jets_of_f_consumed=3 if with_derivative else 2,
        dg_order_consumed=0,
    )


@dataclass
class FullRankInverseResult:
    points: np.ndarray
    h_components: list[AtomSum]
    values: np.ndarray
    derivatives: np.ndarray | None
    consistency_residual: float
    identity_residual: float | None
    restriction_relabeling: tuple[int, ...]


def _solve_compat_exact(restricted, rhs_atoms: list[AtomSum], n: int) -> list[AtomSum]:
    """Closed-form h for a single-term restricted operator with constant scalar.

    Jet coefficients are composed along the (trig-free) map first, which drops
    the terms that vanish identically along it.  If one term c * d_B h_alpha
    survives with constant c, it integrates exactly in the atom algebra:
    h_alpha = antiderivative_B(rho) / c, all other components zero.
    """
    pdo = restricted.pdo
    if pdo.q_out != 1:
        raise ValueError("closed-form path needs a single-relation operator")
    surviving = []
    for (a, A, alpha), coeff in pdo.coeffs.items():
        composed = coeff.compose_polynomial() if isinstance(coeff, JetCoeff) else coeff
        if not composed.is_zero():
            surviving.append((A, alpha, composed))
    if len(surviving) != 1:
        raise ValueError(f"closed-form path needs a single surviving term, found {len(surviving)}")
    A, alpha, composed = surviving[0]
    c = composed.constant_value()
    if c is None or c == 0:
        raise ValueError("closed-form path needs a constant nonzero coefficient")
    rho = rhs_atoms[0]
    h_alpha = rho.scale(1 / c)
    for axis in A:
        h_alpha = h_alpha.antiderivative(axis)
    h = [AtomSum.zero(n) for _ in range(n)]
    h[alpha] = h_alpha
    return h


def infinitesimal_inverse_full_rank(
    f: AnalyticMap,
    dg: ClosedFormMetric,
    points,
    tol: float = DEFAULT_RANK_TOL,
    with_derivative: bool = True,
) -> FullRankInverseResult:
    """Choose h through the compatibility operator, then solve the full system.

    The auxiliary field must satisfy L_f(h) = (1/2) sum lambda^{ab} dg_ab so
    the dependent rows stay consistent.  The closed-form antiderivative path
    covers the quadric families, whose single-term constant-coefficient
    operators fall outside the right-inverse bundle; maps with neither path
    available are reported as outside the bundle.
    """
    if isinstance(points, GridPatch):
        points = points.points()
    points = np.asarray(points, dtype=float)
    coeffs = dependence_coeffs(f, 1, points, tol)
    cpdo = compatibility_pdo(coeffs)
    restricted = uts_restriction(coeffs, tol)
    if restricted.relabeling != tuple(range(f.n)):
        raise NotImplementedError("relabeled restrictions are not wired into the solve path")
    rho = cpdo.rhs_atoms(dg.entries)
    try:
        h = _solve_compat_exact(restricted, rho, f.n)
    except ValueError as exc:
        s_min, _ = minimal_jet_order(f.n, coeffs.m, 1)
        member = bundle_membership(restricted.pdo, points, s_min, tol)
        if not member.member:
            raise ValueError(
                f"no exact path ({exc}); membership fails at point {member.witness}: "
                "the map is outside the right-inverse bundle on this patch"
            ) from exc
        raise NotImplementedError(
            "pointwise right-inverse h-path for generic operators is not implemented; "
            "solve on a grid via inverse.right_inverse_with_refinement"
        ) from exc
    n, q = f.n, f.q
    pairs = multi_indices(n, 2, "exact")
    dh = [[h[alpha].diff(axis) for axis in range(n)] for alpha in range(n)]
    P = points.shape[0]
    values = np.zeros((P, q))
    derivs = np.zeros((P, n, q)) if with_derivative else None
    worst_consistency = 0.0
    worst_identity = 0.0 if with_derivative else None
    for p in range(P):
        x = points[p]
        A = nash_matrix(f, x)
        g = _metric_values(dg, x)
        rhs = np.zeros(n + len(pairs))
        for alpha in range(n):
            rhs[alpha] = h[alpha].eval(x)
        for row, (a, b) in enumerate(pairs, start=n):
            rhs[row] = dh[b][a].eval(x) + dh[a][b].eval(x) - g[a, b]
        if with_derivative:
            dA = _nash_matrix_derivatives(f, x)
            drhs = []
            for gamma in range(n):
                dgg = dg.derivative_value(gamma, x)
                dr = np.zeros(n + len(pairs))
                for alpha in range(n):
                    dr[alpha] = dh[alpha][gamma].eval(x)
                for row, (a, b) in enumerate(pairs, start=n):
                    dr[row] = (
                        dh[b][a].diff(gamma).eval(x) + dh[a][b].diff(gamma).eval(x) - dgg[a, b]
                    )
                drhs.append(dr)
            sol, dsols = solve_with_derivative(A, dA, rhs, drhs, tol)
            values[p] = sol
            for gamma in range(n):
                derivs[p, gamma] = dsols[gamma]
        else:
            sol, *_ = np.linalg.lstsq(A, rhs, rcond=None)
            values[p] = sol
        scale = max(np.abs(A).max() * max(np.abs(values[p]).max(), 1.0), np.abs(rhs).max(), 1.0)
        worst_consistency = max(worst_consistency, float(np.abs(A @ values[p] - rhs).max() / scale))
        if with_derivative:
            Jf = np.column_stack([f.jet_vector((axis,), x) for axis in range(n)])
            lin = np.empty((n, n))
            for a in range(n):
                for b in range(a, n):
                    v = float(Jf[:, a] @ derivs[p, b] + Jf[:, b] @ derivs[p, a])
                    lin[a, b] = v
                    lin[b, a] = v
            worst_identity = max(worst_identity, float(np.abs(lin - g).max()))
    if worst_consistency > CONSISTENCY_TOL:
        raise AssertionError(f"dependent rows inconsistent: residual {worst_consistency:.3e}")
    return FullRankInverseResult(
        points=points,
        h_components=h,
        values=values,
        derivatives=derivs,
        consistency_residual=worst_consistency,
        identity_residual=worst_identity,
        restriction_relabeling=restricted.relabeling,
    )


@dataclass
class ContinuationTrace:
    tol: float
    iterations: list[dict] = field(default_factory=list)
    converged: bool = False
    failure: str | None = None

    @property
    def final_residual(self) -> float:
        return self.iterations[-1]["residual"] if self.iterations else float("nan")

    def to_json_dict(self) -> dict:
        return {
            "tol": self.tol,
            "converged": self.converged,
            "failure": self.failure,
            "iterations": self.iterations,
        }


class ContinuationFailure(RuntimeError):
    def __init__(self, message: str, trace: ContinuationTrace, field_state: np.ndarray):
        super().__init__(message)
        self.trace = trace
        self.field_state = field_state


def isometric_continuation(
    f0: AnalyticMap,
    g_target: np.ndarray,
    patch: GridPatch,
    tol: float = 1e-6,
    max_steps: int = 10,
    rank_tol: float = DEFAULT_RANK_TOL,
) -> tuple[np.ndarray, ContinuationTrace]:
    """Newton continuation f_{k+1} = f_k + E_{f_k}(g_target - D(f_k)) on a grid.

    The first step uses exact jets of the analytic start map; afterwards the
    iterate is a grid field and its jets are O(h^2) central differences, so
    each further step spends one stencil cell of margin (NaN-poisoned and
    recorded in the trace).  Residuals are sup norms of the metric defect over
    the currently valid region; the operator being quadratic, the measured
    residual contracts like a Newton iteration until the FD floor.
    """
    n, q = f0.n, f0.q
    counts = tuple(patch.counts)
    points = patch.points()
    g_target = np.asarray(g_target, dtype=float)
    if g_target.shape == (points.shape[0], n, n):
        g_target = g_target.reshape(counts + (n, n))
    if g_target.shape != counts + (n, n):
        raise ValueError("g_target shape mismatch with patch")
    eigs = np.linalg.eigvalsh(g_target.reshape(-1, n, n))
    if not (eigs[:, 0] > 0).all():
        raise ValueError("target metric is not positive definite on the patch")
    cert = rank_profile(f0, points, 2, rank_tol)
    if cert.classification != "2-free":
        raise ValueError(f"start map is {cert.classification}; continuation needs a free map")

    pairs = multi_indices(n, 2, "exact")
    pair_rows = np.array(pairs)
    trace = ContinuationTrace(tol=tol)
    f_field = f0.eval_grid(points).reshape(counts + (q,))
    margin = 0
    prev_residual = None
    growth = 0
    flat_target = g_target.reshape(-1, n, n)
    for step in range(max_steps + 1):
        if step == 0:
            jets = jet_matrices_grid(f0, points, 2).reshape(counts + (q, n + len(pairs)))
        else:
            jets = grid_jets_order2(f_field, patch.spacing, pairs)
            margin += 1
            if 2 * margin >= min(counts) - 1:
                trace.failure = "stencil margin exhausted the patch"
                raise ContinuationFailure(trace.failure, trace, f_field)
        flat_jets = jets.reshape(-1, q, n + len(pairs))
        valid = ~np.isnan(flat_jets).any(axis=(1, 2))
        J = flat_jets[valid][:, :, :n]
        metric = np.einsum("pia,pib->pab", J, J)
        defect = flat_target[valid] - metric
        residual = float(np.abs(defect).max())
        sys_mats = np.concatenate(
            [np.swapaxes(J, 1, 2), 2.0 * np.swapaxes(flat_jets[valid][:, :, n:], 1, 2)], axis=1
        )
        svals = np.linalg.svd(sys_mats, compute_uv=False)
        sigma_margin = float((svals[:, -1] / svals[:, 0]).min())
        trace.iterations.append(
            {
                "step": step,
                "residual": residual,
                "margin": margin,
                "sigma_margin": sigma_margin,
                "valid_points": int(valid.sum()),
            }
        )
        if residual < tol:
            trace.converged = True
            return f_field, trace
        if sigma_margin <= rank_tol:
            trace.failure = "rank margin collapse"
            raise ContinuationFailure(trace.failure, trace, f_field)
        if prev_residual is not None and residual >= prev_residual:
            growth += 1
            if growth >= 2:
                trace.failure = "residual increased twice in a row"
                raise ContinuationFailure(trace.failure, trace, f_field)
        else:
            growth = 0
        prev_residual = residual
        if step == max_steps:
            trace.failure = f"no convergence within {max_steps} steps"
            raise ContinuationFailure(trace.failure, trace, f_field)
        rhs = np.zeros((sys_mats.shape[0], n + len(pairs)))
        rhs[:, n:] = -defect[:, pair_rows[:, 0], pair_rows[:, 1]]
        pinv = np.linalg.pinv(sys_mats)
        delta = np.full((points.shape[0], q), np.nan)
        delta[valid] = np.einsum("pij,pj->pi", pinv, rhs)
        f_field = f_field + delta.reshape(counts + (q,))
    raise AssertionError("unreachable")
