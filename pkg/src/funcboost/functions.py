"""Evaluable function trees, boosted ensembles, and support tables.

Function iterates produced by boosting are represented two ways:

  * :class:`FunctionExpr` trees (Zero / Base / Scale / Sum / Clip) for
    anything that must be evaluated off a client's own support;
  * :class:`SupportTable` for residuals and subgradient queries, which the
    algorithms only ever read on one client's atoms.

An :class:`Ensemble` is the additive model built round by round. It keeps a
lazy global multiplier so the Tikhonov shrink step costs O(1) and history
terms are shared structurally between the server model and all client
copies, which also makes aggregation cheap and communication auditable.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .measures import EmpiricalMeasure, eval_on_points

__all__ = [
    "FunctionExpr",
    "Zero",
    "Base",
    "Scale",
    "Sum",
    "Clip",
    "ConstantFunction",
    "Term",
    "Ensemble",
    "SupportTable",
    "evaluate",
    "axpy_shrink",
    "average",
    "tabulate",
    "table_add",
    "table_sub",
    "table_clip",
    "expr_to_json",
    "expr_from_json",
    "register_learner_codec",
]


# ---------------------------------------------------------------------------
# Base learners that are not fitted models
# ---------------------------------------------------------------------------
class ConstantFunction:
    """Constant vector-valued function; handy as a base learner."""

    def __init__(self, value):
        v = np.atleast_1d(np.asarray(value, dtype=np.float64))
        v.flags.writeable = False
        self.value = v

    @property
    def out_dim(self) -> int:
        return self.value.shape[0]

    def values(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        n = X.shape[0] if X.ndim > 1 else 1
        return np.tile(self.value, (n, 1))

    def __call__(self, x):
        return self.value.copy()

    def to_json(self) -> dict:
        return {"kind": "constant", "value": self.value.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "ConstantFunction":
        return cls(obj["value"])


# ---------------------------------------------------------------------------
# Expression trees
# ---------------------------------------------------------------------------
class FunctionExpr:
    """Finite evaluable expression tree with a fixed output dimension."""

    out_dim: int

    def values(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def values_on(self, mu: EmpiricalMeasure) -> np.ndarray:
        """Values on a measure's atoms, reusing the measure's learner cache."""
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class Zero(FunctionExpr):
    dim: int = 1

    @property
    def out_dim(self) -> int:
        return self.dim

    def values(self, X):
        X = np.asarray(X, dtype=np.float64)
        return np.zeros((X.shape[0], self.dim))

    def values_on(self, mu):
        return np.zeros((len(mu), self.dim))


@dataclass(frozen=True, eq=False)
class Base(FunctionExpr):
    learner: object

    @property
    def out_dim(self) -> int:
        return self.learner.out_dim

    def values(self, X):
        return eval_on_points(self.learner, np.asarray(X, dtype=np.float64))

    def values_on(self, mu):
        return mu.cached_values(self.learner)


@dataclass(frozen=True, eq=False)
class Scale(FunctionExpr):
    factor: float
    child: FunctionExpr

    @property
    def out_dim(self) -> int:
        return self.child.out_dim

    def values(self, X):
        return self.factor * self.child.values(X)

    def values_on(self, mu):
        return self.factor * self.child.values_on(mu)


@dataclass(frozen=True, eq=False)
class Sum(FunctionExpr):
    children: tuple

    def __post_init__(self):
        dims = {c.out_dim for c in self.children}
        if len(self.children) == 0 or len(dims) != 1:
            raise ValueError("Sum needs children with one common output dim")

    @property
    def out_dim(self) -> int:
        return self.children[0].out_dim

    def values(self, X):
        out = self.children[0].values(X).copy()
        for c in self.children[1:]:
            out += c.values(X)
        return out

    def values_on(self, mu):
        out = self.children[0].values_on(mu).copy()
        for c in self.children[1:]:
            out += c.values_on(mu)
        return out


@dataclass(frozen=True, eq=False)
class Clip(FunctionExpr):
    """Coordinatewise projection of the child onto [-radius, radius]."""

    radius: float
    child: FunctionExpr

    def __post_init__(self):
        if self.radius <= 0.0:
            raise ValueError("clip radius must be positive")

    @property
    def out_dim(self) -> int:
        return self.child.out_dim

    def values(self, X):
        return np.clip(self.child.values(X), -self.radius, self.radius)

    def values_on(self, mu):
        return np.clip(self.child.values_on(mu), -self.radius, self.radius)


def evaluate(f: FunctionExpr, x) -> np.ndarray:
    """Evaluate an expression (or ensemble) at a single point."""
    X = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return f.values(X)[0]


# ---------------------------------------------------------------------------
# Ensembles
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class Term:
    coef: float
    expr: FunctionExpr


class Ensemble:
    """Additive model: multiplier * sum_j coef_j * expr_j(x).

    Terms are shared by identity across derived ensembles (the shrink step
    rescales only the lazy multiplier), so ``average`` can recognize the
    common history prefix of client returns and keep one copy of it.
    """

    __slots__ = ("multiplier", "terms", "dim")

    def __init__(self, multiplier: float, terms: tuple, dim: int):
        self.multiplier = float(multiplier)
        self.terms = tuple(terms)
        self.dim = int(dim)
        for t in self.terms:
            if t.expr.out_dim != self.dim:
                raise ValueError("ensemble terms must share one output dim")

    @classmethod
    def zero(cls, dim: int) -> "Ensemble":
        return cls(1.0, (), dim)

    @property
    def out_dim(self) -> int:
        return self.dim

    @property
    def term_count(self) -> int:
        return len(self.terms)

    def values(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        out = np.zeros((X.shape[0], self.dim))
        for t in self.terms:
            out += t.coef * t.expr.values(X)
        out *= self.multiplier
        return out

    def values_on(self, mu: EmpiricalMeasure) -> np.ndarray:
        out = np.zeros((len(mu), self.dim))
        for t in self.terms:
            out += t.coef * t.expr.values_on(mu)
        out *= self.multiplier
        return out

    def __call__(self, x):
        return evaluate(self, x)

    def compact(self) -> "Ensemble":
        """Fold the lazy multiplier into the coefficients."""
        lam = self.multiplier
        return Ensemble(1.0, tuple(Term(t.coef * lam, t.expr) for t in self.terms), self.dim)

    def to_json(self) -> dict:
        return {
            "multiplier": self.multiplier,
            "dim": self.dim,
            "terms": [
                {"coef": t.coef, "expr": expr_to_json(t.expr)} for t in self.terms
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Ensemble":
        terms = tuple(
            Term(float(t["coef"]), expr_from_json(t["expr"])) for t in obj["terms"]
        )
        return cls(float(obj["multiplier"]), terms, int(obj["dim"]))

    def __repr__(self) -> str:
        return f"Ensemble(terms={len(self.terms)}, dim={self.dim})"


def axpy_shrink(g: Ensemble, eta: float, mu: float, h: FunctionExpr) -> Ensemble:
    """Return (1 - eta*mu) * g - eta * h without touching existing terms.

    The shrink factor may be negative on the first steps of the
    4/(mu*(tK+k+1)) schedule (eta*mu up to 2); a factor of exactly 0 drops
    the history, which is the schedule's own first-step behavior. Factors
    below -1 would amplify flipped history and are rejected.
    """
    if eta < 0.0:
        raise ValueError("eta must be nonnegative")
    shrink = 1.0 - eta * mu
    if shrink < -1.0:
        raise ValueError(f"eta*mu = {eta * mu:.6g} > 2 would amplify history")
    if h.out_dim != g.dim:
        raise ValueError("output dimension mismatch")
    if eta == 0.0:
        return Ensemble(g.multiplier * shrink, g.terms, g.dim)
    lam = g.multiplier * shrink
    if lam == 0.0 or not g.terms:
        return Ensemble(1.0, (Term(-eta, h),), g.dim)
    return Ensemble(lam, g.terms + (Term(-eta / lam, h),), g.dim)


def average(ensembles) -> Ensemble:
    """Pointwise mean of ensembles, deduplicating a shared history prefix."""
    ensembles = list(ensembles)
    if not ensembles:
        raise ValueError("average of an empty list is undefined")
    dim = ensembles[0].dim
    if any(e.dim != dim for e in ensembles):
        raise ValueError("output dimension mismatch")
    n = len(ensembles)

    prefix = 0
    shortest = min(len(e.terms) for e in ensembles)
    while prefix < shortest:
        t0 = ensembles[0].terms[prefix]
        if all(e.terms[prefix] is t0 for e in ensembles):
            prefix += 1
        else:
            break

    mean_mult = sum(e.multiplier for e in ensembles) / n
    terms = [Term(t.coef * mean_mult, t.expr) for t in ensembles[0].terms[:prefix]]
    for e in ensembles:
        scale = e.multiplier / n
        terms.extend(Term(t.coef * scale, t.expr) for t in e.terms[prefix:])
    return Ensemble(1.0, tuple(terms), dim)


# ---------------------------------------------------------------------------
# Support tables
# ---------------------------------------------------------------------------
class SupportTable:
    """Vector values tabulated on one measure's atoms, aligned by index."""

    __slots__ = ("support", "values")

    def __init__(self, support: EmpiricalMeasure, values):
        vals = np.asarray(values, dtype=np.float64)
        if vals.ndim == 1:
            vals = vals.reshape(-1, 1)
        if vals.shape[0] != len(support):
            raise ValueError("one value vector per support atom is required")
        vals = np.ascontiguousarray(vals)
        vals.flags.writeable = False
        self.support = support
        self.values = vals

    @classmethod
    def zeros(cls, support: EmpiricalMeasure, dim: int) -> "SupportTable":
        return cls(support, np.zeros((len(support), dim)))

    @property
    def out_dim(self) -> int:
        return self.values.shape[1]

    def norm_l2(self) -> float:
        """Weighted L2 norm under the support measure."""
        sq = np.einsum("ij,ij->i", self.values, self.values)
        return float(np.sqrt(max(np.dot(self.support.weights, sq), 0.0)))

    def norm_linf(self) -> float:
        return float(np.linalg.norm(self.values, axis=1).max())

    def __repr__(self) -> str:
        return f"SupportTable(atoms={len(self.support)}, dim={self.out_dim})"


def _check_aligned(a: SupportTable, b: SupportTable):
    if a.support is not b.support and not a.support.same_support(b.support):
        raise ValueError("support mismatch between tables")
    if a.out_dim != b.out_dim:
        raise ValueError("table output dimensions differ")


def tabulate(f, support: EmpiricalMeasure) -> SupportTable:
    """Tabulate an evaluable function on a measure's atoms."""
    if isinstance(f, (FunctionExpr, Ensemble)):
        return SupportTable(support, f.values_on(support))
    return SupportTable(support, support.cached_values(f))


def table_add(a: SupportTable, b: SupportTable) -> SupportTable:
    _check_aligned(a, b)
    return SupportTable(a.support, a.values + b.values)


def table_sub(a: SupportTable, b: SupportTable) -> SupportTable:
    _check_aligned(a, b)
    return SupportTable(a.support, a.values - b.values)


def table_clip(a: SupportTable, radius: float) -> SupportTable:
    if radius < 0.0:
        raise ValueError("clip radius must be nonnegative")
    return SupportTable(a.support, np.clip(a.values, -radius, radius))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------
_LEARNER_DECODERS: dict = {}


def register_learner_codec(kind: str, decoder: Callable[[dict], object]):
    _LEARNER_DECODERS[kind] = decoder


register_learner_codec("constant", ConstantFunction.from_json)


def _learner_to_json(learner) -> dict:
    if not hasattr(learner, "to_json"):
        raise TypeError(f"learner {learner!r} is not serializable")
    return learner.to_json()


def _learner_from_json(obj: dict):
    kind = obj.get("kind")
    decoder = _LEARNER_DECODERS.get(kind)
    if decoder is None:
        raise ValueError(f"unknown learner payload kind {kind!r}")
    return decoder(obj)


def expr_to_json(expr: FunctionExpr) -> dict:
    if isinstance(expr, Zero):
        return {"kind": "zero", "dim": expr.dim}
    if isinstance(expr, Base):
        return {"kind": "base", "learner": _learner_to_json(expr.learner)}
    if isinstance(expr, Scale):
        return {"kind": "scale", "factor": expr.factor, "child": expr_to_json(expr.child)}
    if isinstance(expr, Sum):
        return {"kind": "sum", "children": [expr_to_json(c) for c in expr.children]}
    if isinstance(expr, Clip):
        return {"kind": "clip", "radius": expr.radius, "child": expr_to_json(expr.child)}
    raise TypeError(f"unknown expression node {expr!r}")


def expr_from_json(obj: dict) -> FunctionExpr:
    kind = obj["kind"]
    if kind == "zero":
        return Zero(int(obj["dim"]))
    if kind == "base":
        return Base(_learner_from_json(obj["learner"]))
    if kind == "scale":
        return Scale(float(obj["factor"]), expr_from_json(obj["child"]))
    if kind == "sum":
        return Sum(tuple(expr_from_json(c) for c in obj["children"]))
    if kind == "clip":
        return Clip(float(obj["radius"]), expr_from_json(obj["child"]))
    raise ValueError(f"unknown expression kind {kind!r}")
