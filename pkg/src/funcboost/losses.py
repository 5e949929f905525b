"""Losses, empirical functional subgradients, and the ground-truth optimum.

Supported losses: multiclass cross-entropy over logits, and the scalar
square loss (1/2)(y' - y)^2. The empirical objective decouples across the
atoms of the mixture measure, so the global optimizer can be computed
pointwise: a closed form for the square loss, damped Newton per atom for
cross-entropy. That table is the oracle behind the distance-to-optimum
metric; the weighted-L2 metric never needs values off the mixture support.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .functions import SupportTable
from .measures import EmpiricalMeasure, eval_on_points, mixture

__all__ = [
    "CROSS_ENTROPY",
    "SQUARE",
    "LabeledExample",
    "ClientDataset",
    "Objective",
    "loss_value",
    "loss_grad",
    "subgradient_table",
    "objective_value",
    "train_accuracy",
    "pointwise_optimum",
    "PointwiseOptimumError",
]

CROSS_ENTROPY = "cross_entropy"
SQUARE = "square"
_KINDS = (CROSS_ENTROPY, SQUARE)

# Tight bound on ||softmax(v) - onehot(y)||; both live in the simplex.
CROSS_ENTROPY_GRAD_BOUND = float(np.sqrt(2.0))


@dataclass(frozen=True)
class LabeledExample:
    """One observation: feature point plus a class index or real label."""

    x: tuple
    y: object

    @classmethod
    def make(cls, x, y) -> "LabeledExample":
        return cls(tuple(float(v) for v in np.atleast_1d(x)), y)


class ClientDataset:
    """One client's examples plus the induced empirical feature measure.

    The measure is uniform over the distinct feature points (duplicates
    merged, weight proportional to multiplicity); each atom keeps the
    multiset of labels observed at it.
    """

    def __init__(self, features, labels, kind: str):
        if kind not in _KINDS:
            raise ValueError(f"unknown loss kind {kind!r}")
        X = np.asarray(features, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.shape[0] == 0:
            raise ValueError("a client dataset cannot be empty")
        if kind == CROSS_ENTROPY:
            y = np.asarray(labels, dtype=np.int64)
            if np.any(y < 0):
                raise ValueError("class indices must be nonnegative")
        else:
            y = np.asarray(labels, dtype=np.float64)
            if not np.all(np.isfinite(y)):
                raise ValueError("square-loss labels must be finite")
        if y.shape != (X.shape[0],):
            raise ValueError("labels must align with features")

        self.kind = kind
        self.features = X
        self.labels = y
        self.measure = EmpiricalMeasure.uniform(X)
        # map each example to its (deduplicated, sorted) atom index
        _, inverse = np.unique(X, axis=0, return_inverse=True)
        self.atom_index = inverse.ravel()
        self._label_dist = None
        self._label_mean = None

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def examples(self) -> list:
        return [
            LabeledExample.make(self.features[i], self.labels[i].item())
            for i in range(len(self))
        ]

    @classmethod
    def from_examples(cls, examples: Sequence[LabeledExample], kind: str) -> "ClientDataset":
        X = np.array([e.x for e in examples], dtype=np.float64)
        y = [e.y for e in examples]
        return cls(X, y, kind)

    def num_classes(self) -> int:
        if self.kind != CROSS_ENTROPY:
            raise ValueError("num_classes applies to classification data")
        return int(self.labels.max()) + 1

    def atom_label_distribution(self, n_classes: int) -> np.ndarray:
        """(A, c) empirical class distribution at each atom."""
        if self._label_dist is None or self._label_dist.shape[1] != n_classes:
            A = len(self.measure)
            dist = np.zeros((A, n_classes))
            np.add.at(dist, (self.atom_index, self.labels), 1.0)
            counts = dist.sum(axis=1, keepdims=True)
            self._label_dist = dist / counts
        return self._label_dist

    def atom_label_mean(self) -> np.ndarray:
        """(A, 1) mean label at each atom (square loss)."""
        if self._label_mean is None:
            A = len(self.measure)
            total = np.zeros(A)
            count = np.zeros(A)
            np.add.at(total, self.atom_index, self.labels.astype(np.float64))
            np.add.at(count, self.atom_index, 1.0)
            self._label_mean = (total / count).reshape(-1, 1)
        return self._label_mean


@dataclass(frozen=True)
class Objective:
    """Average of per-client risks plus the Tikhonov term (mu/2)||f||^2."""

    kind: str
    mu: float
    clients: tuple

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.mu < 0.0:
            raise ValueError("mu must be nonnegative")
        if not self.clients:
            raise ValueError("objective needs at least one client")
        if any(c.kind != self.kind for c in self.clients):
            raise ValueError("client datasets disagree with the loss kind")

    def num_classes(self) -> int:
        return max(c.num_classes() for c in self.clients)


# ---------------------------------------------------------------------------
# Pointwise loss and gradient
# ---------------------------------------------------------------------------
def _softmax(v: np.ndarray) -> np.ndarray:
    z = v - v.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _logsumexp(v: np.ndarray) -> np.ndarray:
    m = v.max(axis=-1)
    return m + np.log(np.exp(v - m[..., None]).sum(axis=-1))


def loss_value(kind: str, prediction, y) -> float:
    """Loss at one prediction: cross-entropy over logits, or (1/2)(y'-y)^2."""
    pred = np.atleast_1d(np.asarray(prediction, dtype=np.float64))
    if kind == CROSS_ENTROPY:
        cls = int(y)
        if cls < 0 or cls >= pred.shape[0]:
            raise ValueError(f"class index {cls} out of range for {pred.shape[0]} logits")
        return float(_logsumexp(pred) - pred[cls])
    if kind == SQUARE:
        if pred.shape[0] != 1:
            raise ValueError("square loss expects scalar predictions")
        return float(0.5 * (pred[0] - float(y)) ** 2)
    raise ValueError(f"unknown loss kind {kind!r}")


def loss_grad(kind: str, prediction, y) -> np.ndarray:
    """Gradient of the loss in its first argument."""
    pred = np.atleast_1d(np.asarray(prediction, dtype=np.float64))
    if kind == CROSS_ENTROPY:
        cls = int(y)
        if cls < 0 or cls >= pred.shape[0]:
            raise ValueError(f"class index {cls} out of range for {pred.shape[0]} logits")
        g = _softmax(pred)
        g[cls] -= 1.0
        return g
    if kind == SQUARE:
        return np.array([pred[0] - float(y)])
    raise ValueError(f"unknown loss kind {kind!r}")


# ---------------------------------------------------------------------------
# Empirical subgradient tables
# ---------------------------------------------------------------------------
def _values_on(data: ClientDataset, g, dim: int) -> np.ndarray:
    if isinstance(g, np.ndarray):
        vals = g if g.ndim == 2 else g.reshape(-1, 1)
        if vals.shape != (len(data.measure), dim):
            raise ValueError("precomputed values misaligned with the support")
        return vals
    if hasattr(g, "values_on"):
        return g.values_on(data.measure)
    return data.measure.cached_values(g)


def subgradient_table(
    kind: str, g, data: ClientDataset, mu: float = 0.0, include_reg: bool = False
) -> SupportTable:
    """Per-atom empirical risk subgradient, optionally plus the mu*g term.

    At each atom the value is the mean of the loss gradient over that
    atom's label multiset: softmax(g(x)) minus the empirical class
    distribution for cross-entropy, g(x) minus the mean label for the
    square loss. ``g`` may be an evaluable or a precomputed (A, c) array.
    """
    if kind != data.kind:
        raise ValueError("loss kind disagrees with the dataset")
    if kind == CROSS_ENTROPY:
        n_classes = data.num_classes() if not hasattr(g, "out_dim") else g.out_dim
        if isinstance(g, np.ndarray) and g.ndim == 2:
            n_classes = g.shape[1]
        vals = _values_on(data, g, n_classes)
        table = _softmax(vals) - data.atom_label_distribution(vals.shape[1])
        # simplex geometry bounds every row by sqrt(2); failing it means a bug
        row_norms = np.linalg.norm(table, axis=1)
        assert row_norms.max() <= CROSS_ENTROPY_GRAD_BOUND + 1e-12, (
            "cross-entropy subgradient exceeded the sqrt(2) bound"
        )
    elif kind == SQUARE:
        vals = _values_on(data, g, 1)
        table = vals - data.atom_label_mean()
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    if include_reg:
        table = table + mu * vals
    return SupportTable(data.measure, table)


def _per_example_losses(data: ClientDataset, atom_vals: np.ndarray) -> np.ndarray:
    vals = atom_vals[data.atom_index]
    if data.kind == CROSS_ENTROPY:
        return _logsumexp(vals) - vals[np.arange(len(data)), data.labels]
    return 0.5 * (vals[:, 0] - data.labels) ** 2


def objective_value(obj: Objective, f) -> float:
    """(1/N) sum_i [ mean example loss + (mu/2) ||f||^2 under alpha_i ]."""
    total = 0.0
    dim = obj.num_classes() if obj.kind == CROSS_ENTROPY else 1
    for data in obj.clients:
        vals = _values_on(data, f, dim)
        risk = float(_per_example_losses(data, vals).mean())
        sq = np.einsum("ij,ij->i", vals, vals)
        reg = 0.5 * obj.mu * float(np.dot(data.measure.weights, sq))
        total += risk + reg
    return total / len(obj.clients)


def train_accuracy(obj: Objective, f) -> float:
    """Mean over clients of local accuracy (classification) or R^2 (regression)."""
    scores = []
    dim = obj.num_classes() if obj.kind == CROSS_ENTROPY else 1
    for data in obj.clients:
        vals = _values_on(data, f, dim)[data.atom_index]
        if obj.kind == CROSS_ENTROPY:
            scores.append(float((vals.argmax(axis=1) == data.labels).mean()))
        else:
            resid = float(((vals[:, 0] - data.labels) ** 2).sum())
            spread = float(((data.labels - data.labels.mean()) ** 2).sum())
            scores.append(1.0 - resid / spread if spread > 0.0 else float(resid == 0.0))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# Pointwise ground-truth optimum
# ---------------------------------------------------------------------------
class PointwiseOptimumError(RuntimeError):
    """Newton failed to reach the gradient tolerance at some atoms."""

    def __init__(self, atoms):
        self.atoms = list(atoms)
        super().__init__(f"Newton did not converge at atoms {self.atoms}")


_NEWTON_TOL = 1e-10
_NEWTON_MAX_ITER = 200


def _newton_cross_entropy(q: np.ndarray, mu: float) -> tuple:
    """Minimize logsumexp(v) - <q, v> + (mu/2)||v||^2 (strictly convex)."""
    c = q.shape[0]
    v = np.zeros(c)

    def grad(v):
        return _softmax(v) - q + mu * v

    def obj(v):
        return float(_logsumexp(v) - np.dot(q, v) + 0.5 * mu * np.dot(v, v))

    for _ in range(_NEWTON_MAX_ITER):
        g = grad(v)
        if np.linalg.norm(g) <= _NEWTON_TOL:
            return v, True
        s = _softmax(v)
        H = np.diag(s) - np.outer(s, s) + mu * np.eye(c)
        step = np.linalg.solve(H, -g)
        t, base = 1.0, obj(v)
        slope = float(np.dot(g, step))
        while t > 1e-12 and obj(v + t * step) > base + 1e-4 * t * slope:
            t *= 0.5
        v = v + t * step
    return v, bool(np.linalg.norm(grad(v)) <= _NEWTON_TOL)


def pointwise_optimum(obj: Objective) -> SupportTable:
    """Ground-truth minimizer tabulated on the mixture support.

    The empirical objective splits across atoms of the mixture; each atom's
    subproblem mixes the clients that carry the atom, weighted by their
    local atom weights, with the Tikhonov term weighted the same way.
    """
    if obj.kind == CROSS_ENTROPY and obj.mu <= 0.0:
        raise ValueError("cross-entropy needs mu > 0 for a unique optimum")
    mix = mixture([c.measure for c in obj.clients])
    A = len(mix)
    n = len(obj.clients)

    if obj.kind == SQUARE:
        num = np.zeros(A)
        den = np.zeros(A)
        for data in obj.clients:
            idx = _atom_positions(mix, data.measure)
            w = data.measure.weights
            num[idx] += w * data.atom_label_mean()[:, 0]
            den[idx] += w
        vals = (num / den / (1.0 + obj.mu)).reshape(-1, 1)
        return SupportTable(mix, vals)

    c = obj.num_classes()
    wsum = np.zeros(A)
    qsum = np.zeros((A, c))
    for data in obj.clients:
        idx = _atom_positions(mix, data.measure)
        w = data.measure.weights
        wsum[idx] += w
        qsum[idx] += w[:, None] * data.atom_label_distribution(c)
    q = qsum / wsum[:, None]

    out = np.zeros((A, c))
    failed = []
    for j in range(A):
        v, ok = _newton_cross_entropy(q[j], obj.mu)
        out[j] = v
        if not ok:
            failed.append(j)
    if failed:
        raise PointwiseOptimumError(failed)
    return SupportTable(mix, out)


def _atom_positions(mix: EmpiricalMeasure, sub: EmpiricalMeasure) -> np.ndarray:
    """Index of each of ``sub``'s atoms inside the mixture's atom list."""
    lookup = {k: j for j, k in enumerate(mix._atom_keys())}
    try:
        return np.array([lookup[k] for k in sub._atom_keys()], dtype=np.int64)
    except KeyError:
        raise ValueError("submeasure atom missing from the mixture support")
