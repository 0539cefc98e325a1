"""The metric-inducing operator, its linearization, and consistency checks."""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .maps import AnalyticMap, AtomSum, GridPatch

FROBENIUS = "fro"


class ClosedFormMetric:
    """Symmetric matrix field with atom-algebra entries (exact derivatives)."""

    def __init__(self, n: int, entries: list[list[AtomSum]]):
        self.n = n
        if len(entries) != n or any(len(row) != n for row in entries):
            raise ValueError("entries must be n x n")
        for a in range(n):
            for b in range(a + 1, n):
                if not (entries[a][b] - entries[b][a]).is_zero():
                    raise ValueError(f"entries ({a},{b}) and ({b},{a}) differ")
        self.entries = entries

    @classmethod
    def zero(cls, n: int) -> "ClosedFormMetric":
        return cls(n, [[AtomSum.zero(n) for _ in range(n)] for _ in range(n)])

    @classmethod
    def constant(cls, n: int, mat) -> "ClosedFormMetric":
        entries = [
            [AtomSum.constant(n, Fraction(mat[a][b])) for b in range(n)] for a in range(n)
        ]
        return cls(n, entries)

    def value(self, x) -> np.ndarray:
        g = np.empty((self.n, self.n))
        for a in range(self.n):
            for b in range(a, self.n):
                v = self.entries[a][b].eval(x)
                g[a, b] = v
                g[b, a] = v
        return g

    def derivative_value(self, axis: int, x) -> np.ndarray:
        g = np.empty((self.n, self.n))
        for a in range(self.n):
            for b in range(a, self.n):
                v = self.entries[a][b].diff(axis).eval(x)
                g[a, b] = v
                g[b, a] = v
        return g

    def value_grid(self, points: np.ndarray) -> np.ndarray:
        out = np.empty((points.shape[0], self.n, self.n))
        for a in range(self.n):
            for b in range(a, self.n):
                v = self.entries[a][b].eval_grid(points)
                out[:, a, b] = v
                out[:, b, a] = v
        return out

    def scale(self, c) -> "ClosedFormMetric":
        return ClosedFormMetric(self.n, [[e.scale(c) for e in row] for row in self.entries])

    def to_json_dict(self) -> dict:
        return {
            "n": self.n,
            "closed_form": [[e.to_json_atoms() for e in row] for row in self.entries],
        }


@dataclass
class GridMetric:
    """Per-point symmetric matrices sampled on a grid patch."""

    patch: GridPatch
    values: np.ndarray  # shape counts + (n, n)

    def __post_init__(self):
        expected = tuple(self.patch.counts) + (self.patch.n, self.patch.n)
        if self.values.shape != expected:
            raise ValueError(f"values shape {self.values.shape} != {expected}")

    def flat_values(self) -> np.ndarray:
        n = self.patch.n
        return self.values.reshape(-1, n, n)

    def positive_definite_flags(self) -> np.ndarray:
        eigs = np.linalg.eigvalsh(self.flat_values())
        return eigs[:, 0] > 0

    def to_json_dict(self) -> dict:
        return {"grid": self.patch.to_json_dict(), "values": self.values.tolist()}


def load_metric(path: str):
    with open(path) as fh:
        data = json.load(fh)
    return metric_from_json_dict(data)


def metric_from_json_dict(data: dict):
    if "closed_form" in data:
        n = int(data["n"])
        entries = [
            [AtomSum.from_json_atoms(n, cell) for cell in row] for row in data["closed_form"]
        ]
        return ClosedFormMetric(n, entries)
    patch = GridPatch.from_json_dict(data["grid"])
    values = np.asarray(data["values"], dtype=float)
    return GridMetric(patch, values)


def induced_metric(f: AnalyticMap, x) -> np.ndarray:
    """First fundamental form J^T J at a point, exactly symmetric by construction."""
    J = np.column_stack([f.jet_vector((axis,), x) for axis in range(f.n)])
    g = np.empty((f.n, f.n))
    for a in range(f.n):
        for b in range(a, f.n):
            v = float(J[:, a] @ J[:, b])
            g[a, b] = v
            g[b, a] = v
    return g


def induced_metric_grid(f: AnalyticMap, points: np.ndarray) -> np.ndarray:
    """Stacked pullback metrics, shape (P, n, n)."""
    J = np.stack([f.jet_vector_grid((axis,), points) for axis in range(f.n)], axis=-1)
    g = np.einsum("pia,pib->pab", J, J)
    return 0.5 * (g + np.swapaxes(g, 1, 2))


def metric_linearization(f: AnalyticMap, var: AnalyticMap, x) -> np.ndarray:
    """Tangent of the metric operator at f in direction var: 2 sym(J_f^T J_var)."""
    if (var.n, var.q) != (f.n, f.q):
        raise ValueError("variation shape mismatch")
    Jf = np.column_stack([f.jet_vector((axis,), x) for axis in range(f.n)])
    Jv = np.column_stack([var.jet_vector((axis,), x) for axis in range(f.n)])
    g = np.empty((f.n, f.n))
    for a in range(f.n):
        for b in range(a, f.n):
            v = float(Jf[:, a] @ Jv[:, b] + Jf[:, b] @ Jv[:, a])
            g[a, b] = v
            g[b, a] = v
    return g


def fd_linearization_check(f: AnalyticMap, var: AnalyticMap, x, t: float) -> float:
    """||D(f + t var)(x) - D(f)(x) - t T_f D(var)(x)||_F / t^2.

    The metric operator is quadratic, so this equals ||D(var)(x)||_F exactly
    for every t; the map sum is formed with t as an exact rational so no
    truncation enters.
    """
    if t <= 0:
        raise ValueError("step must be positive")
    tf = Fraction(t)
    bumped = f.add(var.scale(tf))
    lhs = induced_metric(bumped, x)
    base = induced_metric(f, x)
    lin = metric_linearization(f, var, x)
    resid = lhs - base - float(tf) * lin
    return float(np.linalg.norm(resid, FROBENIUS)) / float(tf) ** 2


def positive_definite_everywhere(values: np.ndarray) -> bool:
    eigs = np.linalg.eigvalsh(values.reshape(-1, values.shape[-1], values.shape[-1]))
    return bool((eigs[:, 0] > 0).all())
