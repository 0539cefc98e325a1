"""Central finite differences on uniform grid fields.

Grid fields are arrays of shape counts + component dims.  Differentiation
shrinks the valid region; the freshly invalid margin is filled with NaN so
that accidental use is loud, and callers track the integer margin alongside.
"""

from __future__ import annotations

import numpy as np

from .indices import MultiIndex

STENCIL_REACH = {2: 1, 4: 2}


def central_diff(u: np.ndarray, axis: int, h: float, order: int = 2) -> np.ndarray:
    """Order-2 or order-4 central first derivative along a grid axis."""
    if order not in STENCIL_REACH:
        raise ValueError(f"unsupported FD order {order}")
    out = np.full_like(u, np.nan, dtype=float)
    sl = [slice(None)] * u.ndim

    def shifted(k: int) -> np.ndarray:
        s = list(sl)
        n = u.shape[axis]
        reach = STENCIL_REACH[order]
        s[axis] = slice(reach + k, n - reach + k)
        return u[tuple(s)]

    core = list(sl)
    reach = STENCIL_REACH[order]
    core[axis] = slice(reach, u.shape[axis] - reach)
    if order == 2:
        out[tuple(core)] = (shifted(1) - shifted(-1)) / (2 * h)
    else:
        out[tuple(core)] = (-shifted(2) + 8 * shifted(1) - 8 * shifted(-1) + shifted(-2)) / (12 * h)
    return out


def fd_index_derivative(u: np.ndarray, A: MultiIndex, spacings, order: int = 2) -> np.ndarray:
    """Iterated central differences for the symmetric multi-index A."""
    cur = np.asarray(u, dtype=float)
    for axis in A:
        cur = central_diff(cur, axis, spacings[axis], order)
    return cur


def margin_for(A: MultiIndex, order: int = 2) -> int:
    return len(A) * STENCIL_REACH[order]


def interior(counts, margin: int):
    """Slices selecting the region still valid after `margin` stencil layers."""
    return tuple(slice(margin, c - margin) for c in counts)


def grid_jet_fields(field: np.ndarray, spacings, indices, order: int = 2) -> np.ndarray:
    """FD jets of a grid map field (shape counts + (q,)) for the given multi-indices.

    Returns shape counts + (q, len(indices)); entries needing missing stencil
    points are NaN.
    """
    cols = [fd_index_derivative(field, A, spacings, order) for A in indices]
    return np.stack(cols, axis=-1)


def compact_second_diff(u: np.ndarray, a: int, b: int, ha: float, hb: float) -> np.ndarray:
    """O(h^2) second derivative with one-cell reach (3-point / cross stencil)."""
    out = np.full_like(u, np.nan, dtype=float)

    def block(shift_a: int, shift_b: int) -> np.ndarray:
        sl = []
        for axis, size in enumerate(u.shape):
            k = (shift_a if axis == a else 0) + (shift_b if axis == b else 0)
            sl.append(slice(1 + k, size - 1 + k))
        return u[tuple(sl)]

    core = tuple(slice(1, s - 1) for s in u.shape)
    if a == b:
        out[core] = (block(1, 0) - 2 * block(0, 0) + block(-1, 0)) / ha**2
    else:
        out[core] = (block(1, 1) - block(1, -1) - block(-1, 1) + block(-1, -1)) / (4 * ha * hb)
    return out


def grid_jets_order2(field: np.ndarray, spacings, pair_indices) -> np.ndarray:
    """All first and second FD derivatives of a grid map field with 1-cell reach.

    field has shape counts + (q,); output counts + (q, n + len(pairs)) with the
    first-derivative columns first, then the a<=b pairs in the given order.
    O(h^2) throughout.
    """
    n = len(spacings)
    cols = [central_diff(field, axis, spacings[axis], 2) for axis in range(n)]
    for a, b in pair_indices:
        cols.append(compact_second_diff(field, a, b, spacings[a], spacings[b]))
    return np.stack(cols, axis=-1)


def richardson_ratio(coarse: float, fine: float) -> float:
    """Residual ratio under halving h; ~4 for clean O(h^2) convergence."""
    if fine == 0:
        return float("inf")
    return coarse / fine
