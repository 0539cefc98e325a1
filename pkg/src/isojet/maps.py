"""Analytic maps with exact jets, grid patches, and jet-rank certification.

Map components live in a fixed atom algebra: finite sums of
(rational coefficient) * (monomial in x^0..x^{n-1}) * (optional sin/cos of a
single coordinate).  The algebra is closed under partial differentiation and
under antidifferentiation along an axis, so every jet is exact and the
closed-form solve paths downstream stay exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .indices import MultiIndex, jet_dim, jet_multi_indices
from .poly import Polynomial

Trig = tuple[str, int] | None  # ("sin"|"cos", axis) or None
AtomKey = tuple[tuple[int, ...], Trig]

DEFAULT_RANK_TOL = 1e-10


class AtomSum:
    """Canonical sum of atoms; the scalar-expression type of the map algebra."""

    __slots__ = ("n", "terms")

    def __init__(self, n: int, terms: dict[AtomKey, Fraction] | None = None):
        self.n = n
        self.terms: dict[AtomKey, Fraction] = {}
        if terms:
            for key, c in terms.items():
                if c != 0:
                    self.terms[key] = Fraction(c)

    @classmethod
    def zero(cls, n: int) -> "AtomSum":
        return cls(n)

    @classmethod
    def constant(cls, n: int, c) -> "AtomSum":
        return cls(n, {((0,) * n, None): Fraction(c)})

    @classmethod
    def coordinate(cls, n: int, axis: int) -> "AtomSum":
        powers = tuple(1 if a == axis else 0 for a in range(n))
        return cls(n, {(powers, None): Fraction(1)})

    @classmethod
    def monomial(cls, n: int, powers, c=1, trig: Trig = None) -> "AtomSum":
        return cls(n, {(tuple(powers), trig): Fraction(c)})

    def _accumulate(self, out: dict, key: AtomKey, c: Fraction) -> None:
        s = out.get(key, Fraction(0)) + c
        if s:
            out[key] = s
        else:
            out.pop(key, None)

    def __add__(self, other: "AtomSum") -> "AtomSum":
        if self.n != other.n:
            raise ValueError("dimension mismatch")
        out = dict(self.terms)
        for key, c in other.terms.items():
            self._accumulate(out, key, c)
        res = AtomSum(self.n)
        res.terms = out
        return res

    def __neg__(self) -> "AtomSum":
        res = AtomSum(self.n)
        res.terms = {k: -c for k, c in self.terms.items()}
        return res

    def __sub__(self, other: "AtomSum") -> "AtomSum":
        return self + (-other)

    def scale(self, c) -> "AtomSum":
        c = Fraction(c)
        res = AtomSum(self.n)
        if c:
            res.terms = {k: c * v for k, v in self.terms.items()}
        return res

    def is_zero(self) -> bool:
        return not self.terms

    def diff(self, axis: int) -> "AtomSum":
        out: dict[AtomKey, Fraction] = {}
        for (powers, trig), c in self.terms.items():
            k = powers[axis]
            if k:
                lowered = powers[:axis] + (k - 1,) + powers[axis + 1 :]
                self._accumulate(out, (lowered, trig), c * k)
            if trig is not None and trig[1] == axis:
                kind, ax = trig
                if kind == "sin":
                    self._accumulate(out, (powers, ("cos", ax)), c)
                else:
                    self._accumulate(out, (powers, ("sin", ax)), -c)
        res = AtomSum(self.n)
        res.terms = out
        return res

    def diff_index(self, A: MultiIndex) -> "AtomSum":
        cur = self
        for axis in A:
            cur = cur.diff(axis)
        return cur

    def antiderivative(self, axis: int) -> "AtomSum":
        """Exact antiderivative along one axis (constant of integration 0)."""
        out: dict[AtomKey, Fraction] = {}

        def integrate_atom(powers: tuple[int, ...], trig: Trig, c: Fraction) -> None:
            k = powers[axis]
            if trig is None or trig[1] != axis:
                raised = powers[:axis] + (k + 1,) + powers[axis + 1 :]
                self._accumulate(out, (raised, trig), c / (k + 1))
                return
            kind = trig[0]
            # integral of x^k sin x = -x^k cos x + k * integral of x^(k-1) cos x
            # integral of x^k cos x =  x^k sin x - k * integral of x^(k-1) sin x
            if kind == "sin":
                self._accumulate(out, (powers, ("cos", axis)), -c)
                rest_kind = "cos"
                rest_sign = 1
            else:
                self._accumulate(out, (powers, ("sin", axis)), c)
                rest_kind = "sin"
                rest_sign = -1
            if k:
                lowered = powers[:axis] + (k - 1,) + powers[axis + 1 :]
                integrate_atom(lowered, (rest_kind, axis), rest_sign * c * k)

        for (powers, trig), c in self.terms.items():
            integrate_atom(powers, trig, c)
        res = AtomSum(self.n)
        res.terms = out
        return res

    def eval(self, x) -> float:
        total = 0.0
        for (powers, trig), c in self.terms.items():
            t = float(c)
            for axis, k in enumerate(powers):
                if k:
                    t *= float(x[axis]) ** k
            if trig is not None:
                kind, ax = trig
                t *= math.sin(float(x[ax])) if kind == "sin" else math.cos(float(x[ax]))
            total += t
        return total

    def eval_grid(self, points: np.ndarray) -> np.ndarray:
        """Vectorized evaluation on an array of points of shape (P, n)."""
        total = np.zeros(points.shape[0])
        for (powers, trig), c in self.terms.items():
            t = np.full(points.shape[0], float(c))
            for axis, k in enumerate(powers):
                if k:
                    t = t * points[:, axis] ** k
            if trig is not None:
                kind, ax = trig
                t = t * (np.sin(points[:, ax]) if kind == "sin" else np.cos(points[:, ax]))
            total += t
        return total

    def is_polynomial(self) -> bool:
        return all(trig is None for _, trig in self.terms)

    def to_polynomial(self) -> Polynomial:
        if not self.is_polynomial():
            raise ValueError("expression has trig factors")
        out = Polynomial()
        for (powers, _), c in self.terms.items():
            mon = tuple((axis, k) for axis, k in enumerate(powers) if k)
            out = out + Polynomial({mon: c})
        return out

    @classmethod
    def from_polynomial(cls, n: int, p: Polynomial) -> "AtomSum":
        terms: dict[AtomKey, Fraction] = {}
        for mon, c in p.terms.items():
            powers = [0] * n
            for v, e in mon:
                if v >= n:
                    raise ValueError(f"variable id {v} outside dimension {n}")
                powers[v] = e
            terms[(tuple(powers), None)] = c
        return cls(n, terms)

    def mul_polynomial(self, p: Polynomial) -> "AtomSum":
        """Product with a polynomial in the base coordinates (stays in the algebra)."""
        out: dict[AtomKey, Fraction] = {}
        for mon, pc in p.terms.items():
            add = [0] * self.n
            for v, e in mon:
                add[v] = e
            for (powers, trig), c in self.terms.items():
                raised = tuple(powers[a] + add[a] for a in range(self.n))
                self._accumulate(out, (raised, trig), c * pc)
        res = AtomSum(self.n)
        res.terms = out
        return res

    def to_json_atoms(self) -> list[dict]:
        atoms = []
        for (powers, trig), c in sorted(self.terms.items(), key=lambda kv: (kv[0][0], str(kv[0][1]))):
            entry = {
                "coeff": f"{c.numerator}/{c.denominator}" if c.denominator != 1 else str(c.numerator),
                "powers": list(powers),
                "trig": None if trig is None else {"kind": trig[0], "axis": trig[1] + 1},
            }
            atoms.append(entry)
        return atoms

    @classmethod
    def from_json_atoms(cls, n: int, atoms: list[dict]) -> "AtomSum":
        terms: dict[AtomKey, Fraction] = {}
        total = cls(n)
        for atom in atoms:
            c = Fraction(str(atom["coeff"]))
            powers = tuple(int(p) for p in atom["powers"])
            if len(powers) != n:
                raise ValueError(f"powers length {len(powers)} != dimension {n}")
            trig_spec = atom.get("trig")
            trig: Trig = None
            if trig_spec is not None:
                kind = trig_spec["kind"]
                if kind not in ("sin", "cos"):
                    raise ValueError(f"unknown trig kind {kind!r}")
                trig = (kind, int(trig_spec["axis"]) - 1)
            total._accumulate(terms, (powers, trig), c)
        total.terms = terms
        return total


class AnalyticMap:
    """Map patch -> R^q with components in the atom algebra and cached exact jets."""

    def __init__(self, n: int, components: list[AtomSum]):
        self.n = n
        self.q = len(components)
        for comp in components:
            if comp.n != n:
                raise ValueError("component dimension mismatch")
        self.components = components
        self._jet_cache: dict[tuple[int, MultiIndex], AtomSum] = {}

    def component_jet(self, i: int, A: MultiIndex) -> AtomSum:
        key = (i, tuple(A))
        cached = self._jet_cache.get(key)
        if cached is None:
            cached = self.components[i].diff_index(A)
            self._jet_cache[key] = cached
        return cached

    def jet_vector(self, A: MultiIndex, x) -> np.ndarray:
        return np.array([self.component_jet(i, A).eval(x) for i in range(self.q)])

    def jet_vector_grid(self, A: MultiIndex, points: np.ndarray) -> np.ndarray:
        """Shape (P, q)."""
        return np.column_stack([self.component_jet(i, A).eval_grid(points) for i in range(self.q)])

    def eval(self, x) -> np.ndarray:
        return np.array([comp.eval(x) for comp in self.components])

    def eval_grid(self, points: np.ndarray) -> np.ndarray:
        return np.column_stack([comp.eval_grid(points) for comp in self.components])

    def scale(self, c) -> "AnalyticMap":
        return AnalyticMap(self.n, [comp.scale(c) for comp in self.components])

    def add(self, other: "AnalyticMap") -> "AnalyticMap":
        if (self.n, self.q) != (other.n, other.q):
            raise ValueError("shape mismatch")
        return AnalyticMap(self.n, [a + b for a, b in zip(self.components, other.components)])

    def permute_axes(self, perm: list[int]) -> "AnalyticMap":
        """Map composed with the inverse coordinate permutation: new axis perm[old]."""
        comps = []
        for comp in self.components:
            terms: dict[AtomKey, Fraction] = {}
            for (powers, trig), c in comp.terms.items():
                new_powers = [0] * self.n
                for old_axis, k in enumerate(powers):
                    new_powers[perm[old_axis]] = k
                new_trig = None if trig is None else (trig[0], perm[trig[1]])
                terms[(tuple(new_powers), new_trig)] = terms.get((tuple(new_powers), new_trig), Fraction(0)) + c
            total = AtomSum(self.n)
            total.terms = {k: v for k, v in terms.items() if v}
            comps.append(total)
        return AnalyticMap(self.n, comps)

    def to_json_dict(self) -> dict:
        return {
            "n": self.n,
            "q": self.q,
            "components": [comp.to_json_atoms() for comp in self.components],
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "AnalyticMap":
        n = int(data["n"])
        comps = [AtomSum.from_json_atoms(n, atoms) for atoms in data["components"]]
        m = cls(n, comps)
        if "q" in data and int(data["q"]) != m.q:
            raise ValueError("declared q does not match component count")
        return m


@dataclass(frozen=True)
class GridPatch:
    """Uniform rectangular grid; points enumerate row-major (last axis fastest)."""

    origin: tuple[float, ...]
    spacing: tuple[float, ...]
    counts: tuple[int, ...]

    def __post_init__(self):
        if not (len(self.origin) == len(self.spacing) == len(self.counts)):
            raise ValueError("origin/spacing/counts length mismatch")
        if any(h <= 0 for h in self.spacing):
            raise ValueError("spacings must be positive")
        if any(c < 2 for c in self.counts):
            raise ValueError("counts must be >= 2 per axis")

    @property
    def n(self) -> int:
        return len(self.origin)

    @property
    def num_points(self) -> int:
        return int(np.prod(self.counts))

    def axes(self) -> list[np.ndarray]:
        return [
            self.origin[a] + self.spacing[a] * np.arange(self.counts[a])
            for a in range(self.n)
        ]

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.column_stack([m.reshape(-1) for m in mesh])

    def refine(self, factor: int = 2) -> "GridPatch":
        return GridPatch(
            origin=self.origin,
            spacing=tuple(h / factor for h in self.spacing),
            counts=tuple((c - 1) * factor + 1 for c in self.counts),
        )

    def to_json_dict(self) -> dict:
        return {"origin": list(self.origin), "spacing": list(self.spacing), "counts": list(self.counts)}

    @classmethod
    def from_json_dict(cls, data: dict) -> "GridPatch":
        return cls(
            origin=tuple(float(v) for v in data["origin"]),
            spacing=tuple(float(v) for v in data["spacing"]),
            counts=tuple(int(v) for v in data["counts"]),
        )


@dataclass
class JetMatrix:
    """q x jet_dim(n, r) matrix; column j is the A_j-th partial at x."""

    x: np.ndarray
    r: int
    indices: list[MultiIndex]
    matrix: np.ndarray


def jet_matrix(f: AnalyticMap, x, r: int) -> JetMatrix:
    if r < 1:
        raise ValueError("jet order must be >= 1")
    cols = jet_multi_indices(f.n, r)
    mat = np.empty((f.q, len(cols)))
    for j, A in enumerate(cols):
        mat[:, j] = f.jet_vector(A, x)
    return JetMatrix(x=np.asarray(x, dtype=float), r=r, indices=cols, matrix=mat)


def jet_matrices_grid(f: AnalyticMap, points: np.ndarray, r: int) -> np.ndarray:
    """Stacked jet matrices, shape (P, q, jet_dim)."""
    cols = jet_multi_indices(f.n, r)
    out = np.empty((points.shape[0], f.q, len(cols)))
    for j, A in enumerate(cols):
        out[:, :, j] = f.jet_vector_grid(A, points)
    return out


@dataclass
class RankCertificate:
    """Patch-wide rank verdict for the order-r jet matrices of a map."""

    r: int
    q: int
    n: int
    tol: float
    classification: str  # "{r}-free" | "full {r}-rank" | "degenerate"
    m: int | None
    ranks: np.ndarray
    min_retained_rel: float
    min_gap: float
    witness: tuple[int, str] | None = None

    @property
    def certified(self) -> bool:
        return self.classification != "degenerate"

    def to_json_dict(self) -> dict:
        return {
            "r": self.r,
            "q": self.q,
            "n": self.n,
            "tol": self.tol,
            "classification": self.classification,
            "m": self.m,
            "points": int(self.ranks.shape[0]),
            "min_retained_rel": self.min_retained_rel,
            "min_gap": self.min_gap,
            "witness": None if self.witness is None else {"point": self.witness[0], "reason": self.witness[1]},
        }


def _rank_stats(stacked: np.ndarray, tol: float):
    """Numerical ranks plus retained/discarded singular-value margins."""
    svals = np.linalg.svd(stacked, compute_uv=False)
    smax = svals[:, 0]
    thresholds = tol * smax
    ranks = (svals > thresholds[:, None]).sum(axis=1)
    retained_rel = np.where(
        ranks > 0,
        svals[np.arange(len(ranks)), np.maximum(ranks - 1, 0)] / np.where(smax > 0, smax, 1.0),
        0.0,
    )
    kmax = svals.shape[1]
    gaps = np.full(len(ranks), np.inf)
    has_discard = ranks < kmax
    idx = np.nonzero(has_discard & (ranks > 0))[0]
    if idx.size:
        discarded = svals[idx, ranks[idx]]
        retained = svals[idx, ranks[idx] - 1]
        with np.errstate(divide="ignore"):
            gaps[idx] = np.where(discarded > 0, retained / discarded, np.inf)
    return ranks, retained_rel, gaps


def rank_profile(f: AnalyticMap, points, r: int, tol: float = DEFAULT_RANK_TOL) -> RankCertificate:
    """Classify a map as r-free / full r-rank / degenerate over sample points.

    "r-free": rank D^r = jet_dim(n, r) everywhere (needs q >= jet_dim).
    "full r-rank": (r-1)-free and rank D^r = q everywhere, with
    jet_dim(n, r-1) < q <= jet_dim(n, r).  Anything else is degenerate, which
    is a valid verdict, not an error.
    """
    if isinstance(points, GridPatch):
        points = points.points()
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[None, :]
    if points.shape[0] == 0:
        raise ValueError("empty point set")
    if not 0 < tol < 1:
        raise ValueError("tol must be in (0, 1)")
    s_full = jet_dim(f.n, r)
    s_prev = jet_dim(f.n, r - 1) if r >= 2 else 0
    stacked = jet_matrices_grid(f, points, r)
    ranks, retained_rel, gaps = _rank_stats(stacked, tol)
    min_rel = float(retained_rel.min())
    min_gap = float(gaps.min())

    if f.q >= s_full and bool((ranks == s_full).all()):
        return RankCertificate(r, f.q, f.n, tol, f"{r}-free", None, ranks, min_rel, min_gap)

    witness = None
    full_ok = s_prev < f.q <= s_full
    if full_ok and not bool((ranks == f.q).all()):
        bad = int(np.argmax(ranks != f.q))
        witness = (bad, f"rank {int(ranks[bad])} != q at point index {bad}")
        full_ok = False
    if full_ok and r >= 2:
        prev_ranks, prev_rel, prev_gaps = _rank_stats(stacked[:, :, :s_prev], tol)
        min_rel = min(min_rel, float(prev_rel.min()))
        min_gap = min(min_gap, float(prev_gaps.min()))
        if not bool((prev_ranks == s_prev).all()):
            bad = int(np.argmax(prev_ranks != s_prev))
            witness = (bad, f"order-{r-1} block rank {int(prev_ranks[bad])} < {s_prev}")
            full_ok = False
    if full_ok:
        return RankCertificate(
            r, f.q, f.n, tol, f"full {r}-rank", s_full - f.q, ranks, min_rel, min_gap
        )
    if witness is None:
        witness = (0, f"q={f.q} outside ({s_prev}, {s_full}] and not {r}-free")
    return RankCertificate(r, f.q, f.n, tol, "degenerate", None, ranks, min_rel, min_gap, witness)


def free_euclidean(n: int) -> AnalyticMap:
    """(x^1, ..., x^n, (x^1)^2, x^1 x^2, ..., (x^n)^2): free for every n."""
    comps = [AtomSum.coordinate(n, a) for a in range(n)]
    for a in range(n):
        for b in range(a, n):
            powers = [0] * n
            powers[a] += 1
            powers[b] += 1
            comps.append(AtomSum.monomial(n, powers))
    return AnalyticMap(n, comps)


def projected(n: int, drop: set[int] | frozenset[int]) -> AnalyticMap:
    """free_euclidean(n) with the given quadratic components dropped (1-based indices)."""
    if not drop:
        raise ValueError("drop set must be nonempty")
    full = free_euclidean(n)
    bad = [j for j in drop if not n + 1 <= j <= full.q]
    if bad:
        raise ValueError(f"drop indices must lie in {n + 1}..{full.q} (quadratic block), got {sorted(bad)}")
    comps = [c for j, c in enumerate(full.components, start=1) if j not in drop]
    return AnalyticMap(n, comps)


def torus(n: int) -> AnalyticMap:
    """(sin x^1, cos x^1, ..., sin x^n, cos x^n) on the fundamental domain."""
    comps = []
    for a in range(n):
        comps.append(AtomSum.monomial(n, (0,) * n, 1, ("sin", a)))
        comps.append(AtomSum.monomial(n, (0,) * n, 1, ("cos", a)))
    return AnalyticMap(n, comps)


def builtin_map(family: str, n: int, drop: set[int] | None = None) -> AnalyticMap:
    if family == "free_euclidean":
        return free_euclidean(n)
    if family == "projected":
        return projected(n, drop or set())
    if family == "torus":
        return torus(n)
    raise ValueError(f"unknown family {family!r}")


def load_map(path: str) -> AnalyticMap:
    with open(path) as fh:
        return AnalyticMap.from_json_dict(json.load(fh))


def load_grid(path: str) -> GridPatch:
    with open(path) as fh:
        return GridPatch.from_json_dict(json.load(fh))
