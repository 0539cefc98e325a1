"""Small dense solves: minimal-norm solutions, their exact derivatives, ranks,
and an exact rational elimination used as a cross-oracle on tiny systems."""

from __future__ import annotations

from fractions import Fraction

import numpy as np

DEFAULT_RANK_TOL = 1e-10


def numerical_rank(a: np.ndarray, tol: float = DEFAULT_RANK_TOL) -> int:
    if a.size == 0:
        return 0
    s = np.linalg.svd(a, compute_uv=False)
    if s[0] == 0:
        return 0
    return int((s > tol * s[0]).sum())


def min_norm_solve(a: np.ndarray, b: np.ndarray, tol: float = DEFAULT_RANK_TOL):
    """Minimal-Euclidean-norm least-squares solution with diagnostics.

    Returns (x, info) where info carries the numerical row rank, the smallest
    retained singular value, the residual norm, and a consistency verdict
    (rank(A) == rank([A|b]) within the same relative tolerance).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0:
        x = np.zeros(a.shape[1] if a.ndim == 2 else 0)
        return x, {"rank": 0, "sigma_min": 0.0, "residual": float(np.linalg.norm(b)), "consistent": not b.any(), "full_row_rank": a.shape[0] == 0}
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    smax = s[0] if s.size else 0.0
    keep = s > tol * smax if smax > 0 else np.zeros_like(s, dtype=bool)
    rank = int(keep.sum())
    inv = np.zeros_like(s)
    inv[keep] = 1.0 / s[keep]
    x = vt.T @ (inv * (u.T @ b))
    residual = float(np.linalg.norm(a @ x - b))
    aug = np.column_stack([a, b])
    rank_aug = numerical_rank(aug, tol)
    scale = max(smax, float(np.linalg.norm(b)), 1e-300)
    info = {
        "rank": rank,
        "sigma_min": float(s[keep].min()) if rank else 0.0,
        "residual": residual,
        "consistent": rank_aug == rank,
        "residual_rel": residual / scale,
        "full_row_rank": rank == a.shape[0],
        "borderline": bool(rank < s.size and smax > 0 and tol * 0.1 < s[rank] / smax <= tol * 10),
    }
    return x, info


def solve_with_derivative(a, da_list, b, db_list, tol: float = DEFAULT_RANK_TOL):
    """Pseudoinverse solve plus its exact directional derivatives.

    Handles the two certified regimes:
      * full row rank (underdetermined): x = A^T (A A^T)^{-1} b,
      * full column rank with consistent b (overdetermined): x = (A^T A)^{-1} A^T b.
    d/dt of either closed form is propagated from dA, db.  Raises if neither
    rank condition holds with margin, since the pseudoinverse is not smooth
    across rank drops.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    rows, cols = a.shape
    s = np.linalg.svd(a, compute_uv=False)
    smax = s[0] if s.size else 0.0
    rank = int((s > tol * smax).sum()) if smax > 0 else 0
    if rank == rows and rows <= cols:
        m = a @ a.T
        w = np.linalg.solve(m, b)
        x = a.T @ w
        dxs = []
        for da, db in zip(da_list, db_list):
            dm = da @ a.T + a @ da.T
            dw = np.linalg.solve(m, db - dm @ w)
            dxs.append(da.T @ w + a.T @ dw)
        return x, dxs
    if rank == cols:
        m = a.T @ a
        atb = a.T @ b
        x = np.linalg.solve(m, atb)
        resid = a @ x - b
        scale = max(smax * float(np.linalg.norm(x)), float(np.linalg.norm(b)), 1e-300)
        if np.linalg.norm(resid) > 1e-8 * scale:
            raise ValueError("overdetermined system inconsistent; derivative formula invalid")
        dxs = []
        for da, db in zip(da_list, db_list):
            dm = da.T @ a + a.T @ da
            rhs = da.T @ b + a.T @ db - dm @ x
            dxs.append(np.linalg.solve(m, rhs))
        return x, dxs
    raise ValueError(f"rank {rank} matrix ({rows}x{cols}) has no smooth pseudoinverse formula here")


def nullspace(a: np.ndarray, tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Orthonormal basis (columns) of the kernel of a."""
    a = np.asarray(a, dtype=float)
    u, s, vt = np.linalg.svd(a)
    smax = s[0] if s.size else 0.0
    rank = int((s > tol * smax).sum()) if smax > 0 else 0
    return vt[rank:].T


def line_angle(u: np.ndarray, v: np.ndarray) -> float:
    """Angle between the lines spanned by u and v (orientation ignored)."""
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return float("nan")
    c = abs(float(u @ v)) / (nu * nv)
    c = min(c, 1.0)
    return float(np.arccos(c))


def rational_solve(a_rows: list[list[Fraction]], b: list[Fraction]):
    """Exact Gauss elimination over Q.

    Returns (rank, consistent, particular) where particular is one exact
    solution (free variables set to 0) or None when inconsistent.
    """
    rows = [list(map(Fraction, row)) + [Fraction(bi)] for row, bi in zip(a_rows, b)]
    nrows = len(rows)
    ncols = len(a_rows[0]) if a_rows else 0
    pivots: list[tuple[int, int]] = []
    rank = 0
    for col in range(ncols):
        piv = None
        for rr in range(rank, nrows):
            if rows[rr][col] != 0:
                piv = rr
                break
        if piv is None:
            continue
        rows[rank], rows[piv] = rows[piv], rows[rank]
        pv = rows[rank][col]
        rows[rank] = [v / pv for v in rows[rank]]
        for rr in range(nrows):
            if rr != rank and rows[rr][col] != 0:
                factor = rows[rr][col]
                rows[rr] = [v - factor * pv2 for v, pv2 in zip(rows[rr], rows[rank])]
        pivots.append((rank, col))
        rank += 1
        if rank == nrows:
            break
    consistent = all(rows[rr][ncols] == 0 for rr in range(rank, nrows))
    if not consistent:
        return rank, False, None
    x = [Fraction(0)] * ncols
    for rr, col in pivots:
        x[col] = rows[rr][ncols]
    return rank, True, x
