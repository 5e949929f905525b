"""Weak learners and the weak-learning-oracle contracts.

Two oracle families:

  * ``tree``: an axis-aligned regression tree greedily fit to the query
    table under the support weights. Realistic; its contraction factor is
    measured, not guaranteed.
  * ``idealized``: a scaled Lipschitz extension that reproduces gamma times
    the query exactly on the support, so the contraction in both the
    weighted-L2 and support-infinity norms equals gamma by construction.
    Used wherever the convergence and boundedness checks need an oracle
    that certifiably satisfies its contract.

Split tie-breaking in trees is deterministic: lowest feature index first,
then smallest threshold (midpoints between consecutive distinct values).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .functions import SupportTable, register_learner_codec
from .measures import LipschitzExtension, min_compatible_slope

__all__ = [
    "OracleConfig",
    "OracleReport",
    "TreeLearner",
    "fit_tree",
    "idealized_oracle",
    "make_oracle",
    "measure_contraction",
    "probe_lipschitz_ratio",
]


@dataclass(frozen=True)
class OracleConfig:
    """Which oracle family to use and its knobs.

    kind: "idealized" or "tree".
    gamma: contraction factor of the idealized oracle, in (0, 1].
    max_depth / min_leaf: tree growth limits.
    lip_slope: optional slope cap for the idealized extension.
    target_norm: which contract the oracle is meant for ("l2", "linf",
        "lip"); informational for trees, the idealized family satisfies
        all three on the support by construction.
    """

    kind: str = "idealized"
    gamma: float = 1.0
    max_depth: int = 3
    min_leaf: int = 1
    lip_slope: Optional[float] = None
    target_norm: str = "l2"

    def __post_init__(self):
        if self.kind not in ("idealized", "tree"):
            raise ValueError(f"unknown oracle kind {self.kind!r}")
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError("gamma must lie in (0, 1]")
        if self.max_depth < 1:
            raise ValueError("max_depth must be at least 1")
        if self.target_norm not in ("l2", "linf", "lip"):
            raise ValueError(f"unknown target norm {self.target_norm!r}")


@dataclass(frozen=True)
class OracleReport:
    """Measured contraction 1 - ||h - phi|| / ||phi|| per norm (1 if ||phi|| = 0)."""

    empirical_gamma_l2: float
    empirical_gamma_linf: float
    empirical_gamma_lip: float


# ---------------------------------------------------------------------------
# Regression trees
# ---------------------------------------------------------------------------
class _TreeNode:
    __slots__ = ("feature", "threshold", "left", "right", "value")

    def __init__(self, feature=None, threshold=None, left=None, right=None, value=None):
        self.feature = feature
        self.threshold = threshold
        self.left = left
        self.right = right
        self.value = value

    @property
    def is_leaf(self) -> bool:
        return self.value is not None


class TreeLearner:
    """Axis-aligned regression tree with weighted-mean leaf values."""

    def __init__(self, root: _TreeNode, out_dim: int, in_dim: int):
        self.root = root
        self.out_dim = out_dim
        self.in_dim = in_dim
        self.lip_bound = None  # piecewise constant: no useful global bound

    def values(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, self.in_dim)
        out = np.empty((X.shape[0], self.out_dim))
        self._fill(self.root, X, np.arange(X.shape[0]), out)
        return out

    def _fill(self, node: _TreeNode, X, idx, out):
        if node.is_leaf:
            out[idx] = node.value
            return
        go_left = X[idx, node.feature] <= node.threshold
        self._fill(node.left, X, idx[go_left], out)
        self._fill(node.right, X, idx[~go_left], out)

    def __call__(self, x):
        return self.values(np.asarray(x, dtype=np.float64).reshape(1, -1))[0]

    def depth(self) -> int:
        def walk(node):
            if node.is_leaf:
                return 0
            return 1 + max(walk(node.left), walk(node.right))

        return walk(self.root)

    def to_json(self) -> dict:
        def encode(node):
            if node.is_leaf:
                return {"value": node.value.tolist()}
            return {
                "feature": node.feature,
                "threshold": node.threshold,
                "left": encode(node.left),
                "right": encode(node.right),
            }

        return {
            "kind": "tree",
            "in_dim": self.in_dim,
            "out_dim": self.out_dim,
            "root": encode(self.root),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TreeLearner":
        def decode(node):
            if "value" in node:
                return _TreeNode(value=np.asarray(node["value"], dtype=np.float64))
            return _TreeNode(
                feature=int(node["feature"]),
                threshold=float(node["threshold"]),
                left=decode(node["left"]),
                right=decode(node["right"]),
            )

        return cls(decode(obj["root"]), int(obj["out_dim"]), int(obj["in_dim"]))


def _weighted_mean(targets, weights) -> np.ndarray:
    return np.average(targets, axis=0, weights=weights)


def _sse(targets, weights, mean) -> float:
    diff = targets - mean
    return float(np.dot(weights, np.einsum("ij,ij->i", diff, diff)))


def _best_split(X, targets, weights):
    """Exhaustive scan over (feature, midpoint threshold) split candidates.

    Returns (sse_after, feature, threshold) of the best split, preferring
    lower feature index and then smaller threshold on ties.
    """
    n, d = X.shape
    best = None
    for feat in range(d):
        order = np.argsort(X[:, feat], kind="stable")
        xs = X[order, feat]
        ts = targets[order]
        ws = weights[order]
        w_cum = np.cumsum(ws)
        tw_cum = np.cumsum(ts * ws[:, None], axis=0)
        sq_cum = np.cumsum(np.einsum("ij,ij->i", ts, ts) * ws)
        w_tot, tw_tot, sq_tot = w_cum[-1], tw_cum[-1], sq_cum[-1]
        # split after position j (left = first j+1 rows) only where value changes
        change = np.nonzero(xs[:-1] < xs[1:])[0]
        for j in change:
            wl = w_cum[j]
            wr = w_tot - wl
            if wl <= 0.0 or wr <= 0.0:
                continue
            # weighted SSE decomposes via sum(w t^2) - ||sum(w t)||^2 / sum(w)
            sl = sq_cum[j] - float(np.dot(tw_cum[j], tw_cum[j])) / wl
            rr = tw_tot - tw_cum[j]
            sr = (sq_tot - sq_cum[j]) - float(np.dot(rr, rr)) / wr
            sse = sl + sr
            thr = 0.5 * (xs[j] + xs[j + 1])
            key = (sse, feat, thr)
            if best is None or key < best:
                best = key
    return best


def fit_tree(query: SupportTable, cfg: OracleConfig) -> TreeLearner:
    """Greedy weighted-least-squares regression tree on the query table."""
    X = query.support.points
    targets = query.values
    weights = query.support.weights

    def grow(idx, depth) -> _TreeNode:
        sub_t, sub_w = targets[idx], weights[idx]
        mean = _weighted_mean(sub_t, sub_w)
        if depth >= cfg.max_depth or idx.shape[0] < 2 * cfg.min_leaf:
            return _TreeNode(value=mean)
        found = _best_split(X[idx], sub_t, sub_w)
        if found is None:
            return _TreeNode(value=mean)
        sse_after, feat, thr = found
        if sse_after >= _sse(sub_t, sub_w, mean) - 1e-15:
            return _TreeNode(value=mean)
        go_left = X[idx, feat] <= thr
        left_idx, right_idx = idx[go_left], idx[~go_left]
        if left_idx.shape[0] < cfg.min_leaf or right_idx.shape[0] < cfg.min_leaf:
            return _TreeNode(value=mean)
        return _TreeNode(
            feature=feat,
            threshold=thr,
            left=grow(left_idx, depth + 1),
            right=grow(right_idx, depth + 1),
        )

    root = grow(np.arange(X.shape[0]), 0)
    return TreeLearner(root, query.out_dim, X.shape[1])


# ---------------------------------------------------------------------------
# Idealized scaling oracle
# ---------------------------------------------------------------------------
def idealized_oracle(
    query: SupportTable, gamma: float, lip_slope: Optional[float] = None
) -> LipschitzExtension:
    """Learner that equals gamma * query exactly on the support.

    The predictor is the coordinatewise Lipschitz extension of the scaled
    values; off the support it stays Lipschitz with the chosen slope. With
    the automatic slope the extension uses the smallest compatible one, so
    the output's Lipschitz bound is gamma times the query's own support
    ratio.
    """
    if not (0.0 < gamma <= 1.0):
        raise ValueError("gamma must lie in (0, 1]")
    scaled = gamma * query.values
    if lip_slope is None:
        slope = min_compatible_slope(query.support.points, scaled)
    else:
        slope = float(lip_slope)
    return LipschitzExtension(query.support.points, scaled, slope)


def make_oracle(cfg: OracleConfig):
    """Bind a config into a callable SupportTable -> weak learner."""
    if cfg.kind == "idealized":
        return lambda query: idealized_oracle(query, cfg.gamma, cfg.lip_slope)
    return lambda query: fit_tree(query, cfg)


# ---------------------------------------------------------------------------
# Contraction measurement
# ---------------------------------------------------------------------------
def _table_lip(points: np.ndarray, values: np.ndarray) -> float:
    return min_compatible_slope(points, values)


def measure_contraction(h, query: SupportTable, lip_probes: int = 0, rng=None) -> OracleReport:
    """Empirical contraction of a learner against its query.

    L2 and support-infinity factors are exact on the atoms. The Lipschitz
    factor compares the pairwise difference ratios of (h - phi) and phi on
    the support; it is an estimate of the seminorm contraction, not a
    global certificate. ``lip_probes`` extra jittered pairs refine the
    numerator's off-support behavior when h strays from the table.
    """
    mu = query.support
    hv = mu.cached_values(h)
    if hv.shape != query.values.shape:
        raise ValueError("learner output misaligned with the query table")
    diff = hv - query.values

    def ratio(num, den):
        return 1.0 if den == 0.0 else 1.0 - num / den

    w = mu.weights
    l2_phi = float(np.sqrt(np.dot(w, np.einsum("ij,ij->i", query.values, query.values))))
    l2_diff = float(np.sqrt(np.dot(w, np.einsum("ij,ij->i", diff, diff))))
    linf_phi = float(np.linalg.norm(query.values, axis=1).max())
    linf_diff = float(np.linalg.norm(diff, axis=1).max())

    lip_phi = _table_lip(mu.points, query.values)
    lip_diff = _table_lip(mu.points, diff)
    if lip_probes > 0 and rng is not None and len(mu) > 1:
        # jittered probe pairs around the support sharpen the h-side ratio
        scale = 0.1 * float(np.linalg.norm(mu.points.std(axis=0)) + 1e-12)
        a = mu.points[rng.integers(0, len(mu), size=lip_probes)]
        b = a + scale * rng.standard_normal(a.shape)
        ha, hb = h.values(a), h.values(b)
        gaps = np.linalg.norm(a - b, axis=1)
        ok = gaps > 1e-12
        if np.any(ok):
            probe = np.linalg.norm(ha - hb, axis=1)[ok] / gaps[ok]
            lip_h_probe = float(probe.max())
            lip_diff = max(lip_diff, lip_h_probe - lip_phi) if lip_phi > 0 else lip_diff

    return OracleReport(
        empirical_gamma_l2=ratio(l2_diff, l2_phi),
        empirical_gamma_linf=ratio(linf_diff, linf_phi),
        empirical_gamma_lip=ratio(lip_diff, lip_phi),
    )


def probe_lipschitz_ratio(fn, anchor_points: np.ndarray, n_pairs: int, rng) -> float:
    """Max |fn(a) - fn(b)| / ||a - b|| over random pairs around the anchors."""
    pts = np.asarray(anchor_points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts.reshape(-1, 1)
    scale = 0.25 * float(np.linalg.norm(pts.std(axis=0)) + 1e-12)
    a = pts[rng.integers(0, pts.shape[0], size=n_pairs)]
    b = pts[rng.integers(0, pts.shape[0], size=n_pairs)]
    a = a + scale * rng.standard_normal(a.shape)
    b = b + scale * rng.standard_normal(b.shape)
    fa = np.asarray(fn.values(a)) if hasattr(fn, "values") else np.stack([np.atleast_1d(fn(x)) for x in a])
    fb = np.asarray(fn.values(b)) if hasattr(fn, "values") else np.stack([np.atleast_1d(fn(x)) for x in b])
    if fa.ndim == 1:
        fa, fb = fa.reshape(-1, 1), fb.reshape(-1, 1)
    gaps = np.linalg.norm(a - b, axis=1)
    ok = gaps > 1e-12
    if not np.any(ok):
        return 0.0
    return float((np.linalg.norm(fa - fb, axis=1)[ok] / gaps[ok]).max())


register_learner_codec("tree", TreeLearner.from_json)
register_learner_codec("lipschitz_extension", LipschitzExtension.from_json)
