"""Synthetic federated datasets, the sort-by-label partitioner, CSV loading.

Heterogeneity controls:

  * semi-heterogeneous mode shares one feature support across clients and
    varies only the per-client label-flip rates;
  * fully-heterogeneous mode keeps a (1 - delta) fraction of the feature
    atoms common to all clients and gives each client a delta fraction of
    private atoms shifted along a client-specific direction, so both the
    TV and W1 radii grow monotonically with delta (and vanish at 0);
  * the regression mode draws labels from a clamped linear map, which is
    globally Lipschitz with a certified constant and noise-free, so the
    pairwise label compatibility holds by construction.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .losses import CROSS_ENTROPY, SQUARE, ClientDataset, LabeledExample

__all__ = [
    "PartitionSpec",
    "SyntheticSpec",
    "CsvSchema",
    "CompatReport",
    "partition",
    "generate",
    "check_lipschitz_compat",
    "load_csv",
]

SEMI_HET = "semi_het"
FULLY_HET = "fully_het"
LIPSCHITZ_REGRESSION = "lipschitz_regression"


@dataclass(frozen=True)
class PartitionSpec:
    n_clients: int
    iid_fraction: float
    seed: int = 0

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValueError("need at least one client")
        if not (0.0 <= self.iid_fraction <= 1.0):
            raise ValueError("iid fraction must lie in [0, 1]")


@dataclass(frozen=True)
class SyntheticSpec:
    """Desk-scale synthetic federation.

    mode: "semi_het", "fully_het", or "lipschitz_regression".
    dim / n_classes / n_clients / per_client: problem sizes.
    flip_rates: per-client label flip probabilities (semi_het); defaults
        to an even spread over [0, 0.25].
    delta: in [0, 1], fraction of per-client private atoms and relative
        shift magnitude (fully_het and lipschitz_regression).
    lip_bound / value_bound: regression slope and label clamp.
    """

    mode: str
    dim: int = 2
    n_classes: int = 3
    n_clients: int = 4
    per_client: int = 40
    seed: int = 0
    flip_rates: Optional[tuple] = None
    delta: float = 0.0
    lip_bound: float = 1.0
    value_bound: float = 1.0

    def __post_init__(self):
        if self.mode not in (SEMI_HET, FULLY_HET, LIPSCHITZ_REGRESSION):
            raise ValueError(f"unknown synthetic mode {self.mode!r}")
        if self.per_client < 1 or self.n_clients < 1:
            raise ValueError("sizes must be positive")
        if not (0.0 <= self.delta <= 1.0):
            raise ValueError("delta must lie in [0, 1]")
        if self.flip_rates is not None and len(self.flip_rates) != self.n_clients:
            raise ValueError("flip_rates must have one entry per client")


# ---------------------------------------------------------------------------
# Partitioner
# ---------------------------------------------------------------------------
def partition(dataset: Sequence[LabeledExample], spec: PartitionSpec, kind: str = CROSS_ENTROPY):
    """Split examples across clients with an iid fraction ``s``.

    A seeded uniform s-fraction is dealt round-robin (in label order, so
    each client's histogram tracks the global one within one count per
    class); the remainder is sorted by label and handed out in contiguous
    blocks. Every example is assigned exactly once.
    """
    examples = list(dataset)
    if not examples:
        raise ValueError("cannot partition an empty dataset")
    n = len(examples)
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(n)
    n_iid = int(round(spec.iid_fraction * n))
    iid_idx = perm[:n_iid]
    rest_idx = perm[n_iid:]

    buckets = [[] for _ in range(spec.n_clients)]

    def label_key(i):
        return (examples[i].y, i)

    for pos, i in enumerate(sorted(iid_idx.tolist(), key=label_key)):
        buckets[pos % spec.n_clients].append(i)

    rest_sorted = sorted(rest_idx.tolist(), key=label_key)
    sizes = _near_equal_blocks(len(rest_sorted), spec.n_clients)
    start = 0
    for client, size in enumerate(sizes):
        buckets[client].extend(rest_sorted[start : start + size])
        start += size

    out = []
    for idx in buckets:
        if not idx:
            raise ValueError("partition left a client empty; use fewer clients")
        out.append(ClientDataset.from_examples([examples[i] for i in idx], kind))
    return out


def _near_equal_blocks(total: int, parts: int):
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------
def _class_centers(n_classes: int, dim: int) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(n_classes) / n_classes
    centers = np.zeros((n_classes, dim))
    centers[:, 0] = 2.0 * np.cos(angles)
    centers[:, min(1, dim - 1)] = 2.0 * np.sin(angles)
    return centers


def _base_cloud(spec: SyntheticSpec, rng) -> tuple:
    centers = _class_centers(spec.n_classes, spec.dim)
    classes = rng.integers(0, spec.n_classes, size=spec.per_client)
    points = centers[classes] + 0.6 * rng.standard_normal((spec.per_client, spec.dim))
    return points, classes


def generate(spec: SyntheticSpec):
    """Generate one ClientDataset per client; deterministic given the seed."""
    rng = np.random.default_rng(spec.seed)
    if spec.mode == SEMI_HET:
        return _generate_semi_het(spec, rng)
    if spec.mode == FULLY_HET:
        return _generate_fully_het(spec, rng)
    return _generate_lipschitz(spec, rng)


def _generate_semi_het(spec: SyntheticSpec, rng):
    points, classes = _base_cloud(spec, rng)
    rates = spec.flip_rates
    if rates is None:
        rates = tuple(np.linspace(0.0, 0.25, spec.n_clients))
    clients = []
    for rate in rates:
        labels = classes.copy()
        flip = rng.random(spec.per_client) < rate
        shift = rng.integers(1, spec.n_classes, size=spec.per_client)
        labels[flip] = (labels[flip] + shift[flip]) % spec.n_classes
        clients.append(ClientDataset(points, labels, CROSS_ENTROPY))
    return clients


def _split_private(spec: SyntheticSpec):
    n_private = int(round(spec.delta * spec.per_client))
    return spec.per_client - n_private, n_private


def _client_shift(spec: SyntheticSpec, client: int) -> np.ndarray:
    angle = 2.0 * np.pi * client / spec.n_clients
    direction = np.zeros(spec.dim)
    direction[0] = np.cos(angle)
    direction[min(1, spec.dim - 1)] = np.sin(angle)
    return (4.0 * spec.delta) * direction


def _generate_fully_het(spec: SyntheticSpec, rng):
    points, classes = _base_cloud(spec, rng)
    n_common, n_private = _split_private(spec)
    clients = []
    for i in range(spec.n_clients):
        pts = points.copy()
        if n_private > 0:
            pts[n_common:] = points[n_common:] + _client_shift(spec, i)
        clients.append(ClientDataset(pts, classes, CROSS_ENTROPY))
    return clients


def _generate_lipschitz(spec: SyntheticSpec, rng):
    points, _ = _base_cloud(spec, rng)
    direction = rng.standard_normal(spec.dim)
    direction *= spec.lip_bound / np.linalg.norm(direction)

    def labels_for(pts):
        raw = pts @ direction
        return np.clip(raw, -spec.value_bound, spec.value_bound)

    n_common, n_private = _split_private(spec)
    clients = []
    for i in range(spec.n_clients):
        pts = points.copy()
        if n_private > 0:
            pts[n_common:] = points[n_common:] + _client_shift(spec, i)
        clients.append(ClientDataset(pts, labels_for(pts), SQUARE))
    return clients


# ---------------------------------------------------------------------------
# Lipschitz compatibility
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class CompatReport:
    ok: bool
    worst_ratio: float
    pair: Optional[tuple] = None

    def __bool__(self) -> bool:
        return self.ok


def check_lipschitz_compat(data: ClientDataset, L: float) -> CompatReport:
    """Verify |y_j - y_j'| <= L ||x_j - x_j'|| over all example pairs."""
    if data.kind != SQUARE:
        raise ValueError("compatibility applies to scalar-label data")
    X = data.features
    y = data.labels.astype(np.float64)
    diff = X[:, None, :] - X[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    dy = np.abs(y[:, None] - y[None, :])
    denom = np.where(dist > 0.0, dist, np.inf)
    same_point_conflict = (dist == 0.0) & (dy > 0.0)
    if np.any(same_point_conflict):
        j, k = np.unravel_index(int(same_point_conflict.argmax()), dist.shape)
        return CompatReport(False, float("inf"), (int(j), int(k)))
    ratio = dy / denom
    j, k = np.unravel_index(int(ratio.argmax()), ratio.shape)
    worst = float(ratio[j, k])
    ok = worst <= L * (1.0 + 1e-9) + 1e-12
    return CompatReport(ok, worst, (int(j), int(k)) if not ok else None)


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class CsvSchema:
    feature_cols: tuple
    label_col: int
    label_kind: str = CROSS_ENTROPY
    has_header: bool = True

    def __post_init__(self):
        if self.label_kind not in (CROSS_ENTROPY, SQUARE):
            raise ValueError(f"unknown label kind {self.label_kind!r}")
        if not self.feature_cols:
            raise ValueError("need at least one feature column")


class CsvFormatError(ValueError):
    pass


def load_csv(path, schema: CsvSchema):
    """Parse labeled examples; malformed rows raise with line and column."""
    examples = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows:
        return []
    start = 1 if schema.has_header else 0
    needed = max(max(schema.feature_cols), schema.label_col) + 1
    for lineno, row in enumerate(rows[start:], start=start + 1):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) < needed:
            raise CsvFormatError(f"line {lineno}: expected {needed} columns, got {len(row)}")
        feats = []
        for col in schema.feature_cols:
            try:
                feats.append(float(row[col]))
            except ValueError:
                raise CsvFormatError(
                    f"line {lineno}, column {col}: non-numeric feature {row[col]!r}"
                ) from None
        raw = row[schema.label_col]
        try:
            label = int(raw) if schema.label_kind == CROSS_ENTROPY else float(raw)
        except ValueError:
            raise CsvFormatError(
                f"line {lineno}, column {schema.label_col}: bad label {raw!r}"
            ) from None
        examples.append(LabeledExample.make(np.array(feats), label))
    return examples
