"""Empirical probability measures on R^d with weighted-L2 geometry.

An :class:`EmpiricalMeasure` is a finite set of weighted atoms. It carries
the inner product / norms of the weighted L2 space it induces, plus the two
distances used throughout the simulator:

  * total variation, computed by the half-L1 formula on the atom union
    (equivalent to the sup-over-sets definition for discrete measures);
  * exact p-Wasserstein, solved as the transportation LP with a simplex
    method so the optimum is attained at a vertex of the transport polytope.

Atoms are deduplicated at construction (exact coordinate equality, weights
merged), which makes TV on overlapping supports deterministic and gives a
canonical, lexicographically sorted atom order.

All types are immutable after construction and every operation is a pure
function, so everything here is safe to share across threads.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

__all__ = [
    "EmpiricalMeasure",
    "TransportPlan",
    "LipschitzExtension",
    "mixture",
    "inner_product",
    "norm_l2",
    "norm_linf_on_support",
    "tv_distance",
    "wasserstein",
    "transport_cost",
    "lipschitz_extension",
    "min_compatible_slope",
    "support_covering_radius",
]

_WEIGHT_TOL = 1e-9
_MAX_EXACT_ATOMS = 2000


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts.reshape(-1, 1)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError("points must be a nonempty (n, d) array")
    if not np.all(np.isfinite(pts)):
        raise ValueError("atom coordinates must be finite")
    return pts


class EmpiricalMeasure:
    """Finitely supported probability measure with deduplicated atoms.

    Parameters
    ----------
    points : (n, d) array_like
        Atom locations. Rows with identical coordinates are merged and
        their weights summed. Atoms end up lexicographically sorted.
    weights : (n,) array_like, optional
        Nonnegative masses summing to 1 (within 1e-9). Defaults to uniform.

    Attributes
    ----------
    points : (A, d) ndarray, read-only
    weights : (A,) ndarray, read-only
    dim : int
    """

    __slots__ = ("points", "weights", "dim", "_fn_cache", "_key_cache")

    def __init__(self, points, weights=None):
        pts = _as_points(points)
        n = pts.shape[0]
        if weights is None:
            w = np.full(n, 1.0 / n)
        else:
            w = np.asarray(weights, dtype=np.float64)
            if w.shape != (n,):
                raise ValueError("weights must align with points")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        if abs(float(w.sum()) - 1.0) > _WEIGHT_TOL:
            raise ValueError(f"weights must sum to 1 (got {w.sum()!r})")

        uniq, inverse = np.unique(pts, axis=0, return_inverse=True)
        merged = np.zeros(uniq.shape[0])
        np.add.at(merged, inverse.ravel(), w)
        if np.any(merged <= 0.0):
            raise ValueError("every (merged) atom weight must be positive")

        uniq.flags.writeable = False
        merged.flags.writeable = False
        self.points = uniq
        self.weights = merged
        self.dim = int(uniq.shape[1])
        self._fn_cache: dict = {}
        self._key_cache = None

    # -- constructors -------------------------------------------------------
    @classmethod
    def uniform(cls, points) -> "EmpiricalMeasure":
        return cls(points)

    @classmethod
    def dirac(cls, point) -> "EmpiricalMeasure":
        return cls(np.asarray(point, dtype=np.float64).reshape(1, -1))

    # -- basics --------------------------------------------------------------
    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def atoms(self):
        """List of (point, weight) pairs in canonical order."""
        return [(self.points[j], float(self.weights[j])) for j in range(len(self))]

    def same_support(self, other: "EmpiricalMeasure") -> bool:
        return (
            self.dim == other.dim
            and self.points.shape == other.points.shape
            and bool(np.array_equal(self.points, other.points))
        )

    def equals(self, other: "EmpiricalMeasure", tol: float = 1e-12) -> bool:
        return self.same_support(other) and bool(
            np.allclose(self.weights, other.weights, rtol=0.0, atol=tol)
        )

    def __repr__(self) -> str:
        return f"EmpiricalMeasure(atoms={len(self)}, dim={self.dim})"

    # -- evaluation cache ----------------------------------------------------
    def cached_values(self, fn) -> np.ndarray:
        """Values of ``fn`` on the atoms, memoized by function identity.

        The returned array is read-only; callers must copy before mutating.
        Caching is transparent (results are identical with or without it)
        and exists so ensembles with thousands of shared base learners stay
        cheap to re-evaluate on a fixed support.
        """
        vals = self._fn_cache.get(fn)
        if vals is None:
            vals = eval_on_points(fn, self.points)
            vals.flags.writeable = False
            self._fn_cache[fn] = vals
        return vals

    def _atom_keys(self):
        """bytes key per atom, for exact-coordinate lookups."""
        if self._key_cache is None:
            self._key_cache = [row.tobytes() for row in self.points]
        return self._key_cache

    def weight_lookup(self) -> dict:
        """Map atom-coordinate bytes -> weight (exact matching)."""
        return dict(zip(self._atom_keys(), self.weights.tolist()))

    # -- serialization -------------------------------------------------------
    def to_json(self) -> dict:
        return {
            "dim": self.dim,
            "atoms": [
                {"x": self.points[j].tolist(), "w": float(self.weights[j])}
                for j in range(len(self))
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EmpiricalMeasure":
        atoms = obj["atoms"]
        pts = np.array([a["x"] for a in atoms], dtype=np.float64)
        w = np.array([a["w"] for a in atoms], dtype=np.float64)
        m = cls(pts, w)
        if m.dim != int(obj["dim"]):
            raise ValueError("serialized dim does not match atom dimension")
        return m


def eval_on_points(fn, X: np.ndarray) -> np.ndarray:
    """Evaluate ``fn`` on a batch of points, returning an (n, c) array.

    ``fn`` may expose a vectorized ``values(X)`` method or be a plain
    callable applied per point (scalar or vector output).
    """
    if hasattr(fn, "values"):
        vals = np.asarray(fn.values(X), dtype=np.float64)
    else:
        vals = np.stack(
            [np.atleast_1d(np.asarray(fn(x), dtype=np.float64)) for x in X]
        )
    if vals.ndim == 1:
        vals = vals.reshape(-1, 1)
    if vals.shape[0] != X.shape[0]:
        raise ValueError("function returned a misaligned batch of values")
    if not np.all(np.isfinite(vals)):
        raise ValueError("function evaluation produced non-finite values")
    return vals


# ---------------------------------------------------------------------------
# Mixtures and the weighted-L2 geometry
# ---------------------------------------------------------------------------
def mixture(measures, weights=None) -> EmpiricalMeasure:
    """Weighted mixture of measures: union of supports, weights summed."""
    measures = list(measures)
    if not measures:
        raise ValueError("mixture of an empty list is undefined")
    dim = measures[0].dim
    if any(m.dim != dim for m in measures):
        raise ValueError("all measures must share the same dimension")
    if weights is None:
        lam = np.full(len(measures), 1.0 / len(measures))
    else:
        lam = np.asarray(weights, dtype=np.float64)
        if lam.shape != (len(measures),) or np.any(lam < 0.0):
            raise ValueError("mixture weights must be nonnegative and aligned")
        if abs(lam.sum() - 1.0) > _WEIGHT_TOL:
            raise ValueError("mixture weights must sum to 1")
    pts = np.concatenate([m.points for m, l in zip(measures, lam) if l > 0.0])
    w = np.concatenate(
        [l * m.weights for m, l in zip(measures, lam) if l > 0.0]
    )
    return EmpiricalMeasure(pts, w)


def inner_product(f, g, mu: EmpiricalMeasure) -> float:
    """<f, g> under ``mu``: sum_j w_j <f(x_j), g(x_j)>."""
    fv = mu.cached_values(f)
    gv = mu.cached_values(g)
    if fv.shape[1] != gv.shape[1]:
        raise ValueError("f and g have different output dimensions")
    return float(np.dot(mu.weights, np.einsum("ij,ij->i", fv, gv)))


def norm_l2(f, mu: EmpiricalMeasure) -> float:
    return float(np.sqrt(max(inner_product(f, f, mu), 0.0)))


def norm_linf_on_support(f, mu: EmpiricalMeasure) -> float:
    fv = mu.cached_values(f)
    return float(np.linalg.norm(fv, axis=1).max())


# ---------------------------------------------------------------------------
# Distances
# ---------------------------------------------------------------------------
def tv_distance(a: EmpiricalMeasure, b: EmpiricalMeasure) -> float:
    """Total variation: half the L1 distance over the atom union."""
    if a.dim != b.dim:
        raise ValueError("dimension mismatch")
    wa = a.weight_lookup()
    wb = b.weight_lookup()
    keys = set(wa) | set(wb)
    total = sum(abs(wa.get(k, 0.0) - wb.get(k, 0.0)) for k in keys)
    return 0.5 * total


def _sq_dists(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    diff = P[:, None, :] - Q[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


@dataclass(frozen=True)
class TransportPlan:
    """Coupling between two measures; rows marginalize to the source."""

    source: EmpiricalMeasure
    target: EmpiricalMeasure
    mass: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mass, dtype=np.float64)
        if m.shape != (len(self.source), len(self.target)):
            raise ValueError("mass matrix shape does not match the measures")
        if np.any(m < -1e-12):
            raise ValueError("transport plan has negative mass")
        m = np.maximum(m, 0.0)
        if np.abs(m.sum(axis=1) - self.source.weights).max() > _WEIGHT_TOL:
            raise ValueError("row sums do not match source weights")
        if np.abs(m.sum(axis=0) - self.target.weights).max() > _WEIGHT_TOL:
            raise ValueError("column sums do not match target weights")
        m.flags.writeable = False
        object.__setattr__(self, "mass", m)


def transport_cost(plan: TransportPlan, p: int) -> float:
    """p-th-moment cost of a plan: (sum pi_jk ||x_j - y_k||^p)^(1/p)."""
    sq = _sq_dists(plan.source.points, plan.target.points)
    cost = sq if p == 2 else np.sqrt(sq)
    return float(np.sum(plan.mass * cost) ** (1.0 / p))


def wasserstein(a: EmpiricalMeasure, b: EmpiricalMeasure, p: int = 1):
    """Exact W_p between two empirical measures, with an optimal plan.

    Solves the transportation LP with a simplex method, so the returned
    plan is a vertex of the transport polytope and the value is exact up
    to floating point. Guarded to measures of at most 2000 atoms each.

    Returns
    -------
    (distance, TransportPlan)
    """
    if a.dim != b.dim:
        raise ValueError("dimension mismatch")
    if p not in (1, 2):
        raise ValueError("p must be 1 or 2")
    m, n = len(a), len(b)
    if m > _MAX_EXACT_ATOMS or n > _MAX_EXACT_ATOMS:
        raise ValueError(
            f"exact transport is guarded to {_MAX_EXACT_ATOMS} atoms per side"
        )
    sq = _sq_dists(a.points, b.points)
    cost = sq if p == 2 else np.sqrt(sq)

    row_marg = sparse.kron(sparse.eye(m), np.ones((1, n)), format="csr")
    col_marg = sparse.kron(np.ones((1, m)), sparse.eye(n), format="csr")
    A_eq = sparse.vstack([row_marg, col_marg], format="csr")
    b_eq = np.concatenate([a.weights, b.weights])

    res = linprog(cost.ravel(), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    plan = TransportPlan(a, b, res.x.reshape(m, n))
    return float(max(res.fun, 0.0) ** (1.0 / p)), plan


# ---------------------------------------------------------------------------
# Lipschitz extension
# ---------------------------------------------------------------------------
def min_compatible_slope(points: np.ndarray, values: np.ndarray) -> float:
    """Smallest slope L with |v_j - v_j'| <= L ||x_j - x_j'|| for all pairs."""
    pts = np.asarray(points, dtype=np.float64)
    vals = np.asarray(values, dtype=np.float64)
    if vals.ndim == 1:
        vals = vals.reshape(-1, 1)
    n = pts.shape[0]
    if n <= 1:
        return 0.0
    dist = np.sqrt(_sq_dists(pts, pts))
    dv = np.abs(vals[:, None, :] - vals[None, :, :]).max(axis=2)
    off = ~np.eye(n, dtype=bool)
    zero_gap = off & (dist == 0.0)
    if np.any(zero_gap & (dv > 0.0)):
        raise ValueError("duplicate points with conflicting values")
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(off & (dist > 0.0), dv / np.where(dist > 0, dist, 1.0), 0.0)
    return float(ratio.max())


class LipschitzExtension:
    """Pointwise-minimum extension u(x) = min_j (v_j + L ||x - x_j||).

    Interpolates the anchor values exactly (requires the anchors to be
    slope-compatible) and is globally L-Lipschitz per output coordinate.
    Vector values are extended coordinatewise with a shared slope.
    """

    def __init__(self, points, values, slope: float):
        pts = _as_points(points)
        vals = np.asarray(values, dtype=np.float64)
        if vals.ndim == 1:
            vals = vals.reshape(-1, 1)
        if vals.shape[0] != pts.shape[0]:
            raise ValueError("values must align with anchor points")
        if slope < 0.0:
            raise ValueError("slope must be nonnegative")
        needed = min_compatible_slope(pts, vals)
        if needed > slope * (1.0 + 1e-9) + 1e-12:
            j, k = _worst_pair(pts, vals)
            raise ValueError(
                f"anchor pair ({j}, {k}) violates the slope bound: needs "
                f"{needed:.6g} > {slope:.6g}"
            )
        pts.flags.writeable = False
        vals.flags.writeable = False
        self.points = pts
        self.anchor_values = vals
        self.slope = float(slope)

    @property
    def out_dim(self) -> int:
        return self.anchor_values.shape[1]

    @property
    def lip_bound(self) -> float:
        return self.slope

    def values(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, self.points.shape[1])
        dist = np.sqrt(_sq_dists(X, self.points))
        # (n, M, c): anchor value plus slope * distance, coordinatewise min
        cand = self.anchor_values[None, :, :] + self.slope * dist[:, :, None]
        return cand.min(axis=1)

    def __call__(self, x):
        out = self.values(np.asarray(x, dtype=np.float64).reshape(1, -1))[0]
        return float(out[0]) if self.out_dim == 1 else out

    def to_json(self) -> dict:
        return {
            "kind": "lipschitz_extension",
            "points": self.points.tolist(),
            "values": self.anchor_values.tolist(),
            "slope": self.slope,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LipschitzExtension":
        return cls(np.array(obj["points"]), np.array(obj["values"]), obj["slope"])


def _worst_pair(pts: np.ndarray, vals: np.ndarray):
    n = pts.shape[0]
    dist = np.sqrt(_sq_dists(pts, pts))
    dv = np.abs(vals[:, None, :] - vals[None, :, :]).max(axis=2)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(dist > 0.0, dv / np.where(dist > 0, dist, 1.0), 0.0)
    np.fill_diagonal(ratio, 0.0)
    j, k = np.unravel_index(int(ratio.argmax()), ratio.shape)
    return int(j), int(k)


def lipschitz_extension(points, labels, L: float) -> LipschitzExtension:
    """Extension of labeled points with target Lipschitz constant ``L``.

    Raises if some pair violates |y_j - y_j'| <= L ||x_j - x_j'||; the
    error names the offending pair.
    """
    if L <= 0.0:
        raise ValueError("L must be positive")
    return LipschitzExtension(points, np.asarray(labels, dtype=np.float64), L)


# ---------------------------------------------------------------------------
# Heterogeneity geometry
# ---------------------------------------------------------------------------
def support_covering_radius(measures) -> float:
    """Tightest D so every atom of every measure is within D of each other
    measure's support (max of one-sided Hausdorff distances over ordered
    pairs)."""
    measures = list(measures)
    if len(measures) < 2:
        raise ValueError("need at least two measures")
    dim = measures[0].dim
    if any(m.dim != dim for m in measures):
        raise ValueError("dimension mismatch")
    radius = 0.0
    for i, src in enumerate(measures):
        for j, dst in enumerate(measures):
            if i == j:
                continue
            d = np.sqrt(_sq_dists(src.points, dst.points))
            radius = max(radius, float(d.min(axis=1).max()))
    return radius
