"""Federated functional gradient boosting: client steps and the server loop.

Three boosting clients plus a parametric FedAvg baseline:

  * ``ffgb_client``: residual-corrected local boosting steps with the
    2/(mu*(t*K + k + 1)) schedule. The oracle query is the residual plus
    the risk subgradient only; the Tikhonov part mu*g is applied
    analytically in the update since it is exactly available.
  * ``ffgb_c_client``: the clipped variant for heterogeneous feature
    marginals. The learner entering the iterate is clipped at
    G2 = (2-gamma)/gamma * G, the residual at G1 = (1-gamma)/gamma * G,
    and the schedule is 4/(mu*(t*K + k + 1)). With an idealized oracle
    both clips are no-ops on the client's own support, which the runtime
    audits verify.
  * ``ffgb_l_client``: the square-loss variant over Lipschitz functions.
    Each client interpolates its data once with a Lipschitz extension u
    and boosts an approximation of u; the per-step learners are
    t-independent, so they are computed once and reused across rounds.

Runtime invariant audits (residual norms, iterate norms, clip no-ops,
Lipschitz ratios) are recorded in the train log. Iterate-norm and
Lipschitz audits only apply from the first step where the shrink factor
1 - eta*mu is nonnegative: the 4/(...) schedule starts with eta*mu in
(1, 2], where the bounds provably need not hold yet. Residual and
learner-norm bounds do not involve eta and are audited at every step.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .functions import (
    Base,
    Clip,
    Ensemble,
    Scale,
    SupportTable,
    average,
    axpy_shrink,
)
from .losses import (
    CROSS_ENTROPY,
    SQUARE,
    CROSS_ENTROPY_GRAD_BOUND,
    ClientDataset,
    Objective,
    objective_value,
    pointwise_optimum,
    subgradient_table,
    train_accuracy,
)
from .measures import EmpiricalMeasure
from .oracles import OracleConfig, make_oracle

__all__ = [
    "FFGB",
    "FFGB_C",
    "FFGB_L",
    "FEDAVG",
    "ScheduleKind",
    "schedule_eta",
    "schedule_for",
    "RoundConfig",
    "ClientState",
    "RoundRecord",
    "TrainLog",
    "AuditSink",
    "LinearModel",
    "ffgb_client",
    "ffgb_c_client",
    "ffgb_l_client",
    "server_loop",
    "fedavg_baseline",
    "distance_to_table",
    "save_checkpoint",
    "load_checkpoint",
]

FFGB = "ffgb"
FFGB_C = "ffgb_c"
FFGB_L = "ffgb_l"
FEDAVG = "fedavg"
_BOOSTING = (FFGB, FFGB_C, FFGB_L)

AUDIT_TOL = 1e-9


# ---------------------------------------------------------------------------
# Step-size schedules
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class ScheduleKind:
    """Step-size family. ``ffgb`` is 2/(mu*(t*K+k+1)); ``ffgb_cl`` is
    4/(mu*(t*K+k+1)); ``constant`` is eta0; ``inverse_round`` is
    eta0/(K*t+k+1)."""

    family: str
    mu: float = 1.0
    eta0: float = 1.0

    def __post_init__(self):
        if self.family not in ("ffgb", "ffgb_cl", "constant", "inverse_round"):
            raise ValueError(f"unknown schedule family {self.family!r}")
        if self.family in ("ffgb", "ffgb_cl") and self.mu <= 0.0:
            raise ValueError("this schedule family needs mu > 0")


def schedule_eta(kind: ScheduleKind, t: int, k: int, K: int) -> float:
    if t < 0 or not (1 <= k <= K):
        raise ValueError("need t >= 0 and 1 <= k <= K")
    s = t * K + k + 1
    if kind.family == "ffgb":
        return 2.0 / (kind.mu * s)
    if kind.family == "ffgb_cl":
        return 4.0 / (kind.mu * s)
    if kind.family == "constant":
        return kind.eta0
    return kind.eta0 / s


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class RoundConfig:
    """One training run: algorithm, loop sizes, oracle, and constants.

    ``sample_size`` is the per-round client sample m (defaults to all).
    ``grad_bound`` G defaults to sqrt(2) for cross-entropy. For the
    clipped variant, ``value_bound`` B defaults to 2G/(mu*gamma), the
    smallest radius its analysis allows. ``lip_bound`` L is required for
    the Lipschitz variant. ``audit=None`` enables the invariant audits
    exactly when the oracle is idealized.
    """

    algorithm: str
    loss: str
    n_rounds: int
    local_steps: int
    sample_size: Optional[int] = None
    oracle: OracleConfig = OracleConfig()
    mu: float = 0.1
    grad_bound: Optional[float] = None
    value_bound: Optional[float] = None
    lip_bound: Optional[float] = None
    seed: int = 0
    residual_enabled: bool = True
    audit: Optional[bool] = None
    probe_grid_size: int = 12
    lip_probe_pairs: int = 128
    eta0: float = 5e-4
    fedavg_local_steps: int = 10
    compute_optimum: bool = True
    covering_radius: Optional[float] = None  # set by the server for audits

    def __post_init__(self):
        if self.algorithm not in _BOOSTING + (FEDAVG,):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.loss not in (CROSS_ENTROPY, SQUARE):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.n_rounds < 0 or self.local_steps < 1:
            raise ValueError("need n_rounds >= 0 and local_steps >= 1")
        if self.algorithm in (FFGB, FFGB_C) and self.mu <= 0.0:
            raise ValueError("this algorithm's schedule needs mu > 0")
        if self.algorithm == FFGB_L:
            if self.loss != SQUARE:
                raise ValueError("the Lipschitz variant requires the square loss")
            if self.lip_bound is None or self.lip_bound <= 0.0:
                raise ValueError("the Lipschitz variant needs lip_bound > 0")

    # -- derived constants ---------------------------------------------------
    def effective_grad_bound(self) -> Optional[float]:
        if self.grad_bound is not None:
            return self.grad_bound
        if self.loss == CROSS_ENTROPY:
            return CROSS_ENTROPY_GRAD_BOUND
        return None

    def clip_constants(self) -> tuple:
        """(G1, G2) = ((1-gamma)/gamma * G, (2-gamma)/gamma * G)."""
        G = self.effective_grad_bound()
        if G is None:
            raise ValueError("the clipped variant needs a gradient bound G")
        gamma = self.oracle.gamma
        return (1.0 - gamma) / gamma * G, (2.0 - gamma) / gamma * G

    def effective_value_bound(self) -> Optional[float]:
        if self.value_bound is not None:
            return self.value_bound
        if self.algorithm == FFGB_C:
            G = self.effective_grad_bound()
            return 2.0 * G / (self.mu * self.oracle.gamma)
        return None

    def audit_enabled(self) -> bool:
        if self.audit is not None:
            return self.audit
        return self.algorithm in _BOOSTING and self.oracle.kind == "idealized"


def schedule_for(cfg: RoundConfig) -> ScheduleKind:
    if cfg.algorithm == FFGB:
        return ScheduleKind("ffgb", mu=cfg.mu)
    if cfg.algorithm == FFGB_C:
        return ScheduleKind("ffgb_cl", mu=cfg.mu)
    if cfg.algorithm == FFGB_L:
        # the Lipschitz variant's update g - eta*(g - h) fixes mu = 1
        return ScheduleKind("ffgb_cl", mu=1.0)
    return ScheduleKind("constant", eta0=cfg.eta0)


def _iterate_audit_active(cfg: RoundConfig, t: int, k: int) -> bool:
    """Iterate-norm bounds hold once the shrink factor is a contraction."""
    s = t * cfg.local_steps + k + 1
    if cfg.algorithm == FFGB:
        return True
    return s >= 4


# ---------------------------------------------------------------------------
# Audits and logging
# ---------------------------------------------------------------------------
class AuditSink:
    """Collects invariant-audit outcomes; cheap when auditing is off."""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.checks = 0
        self.failures: list = []

    def check(self, ok: bool, message: str):
        if not self.enabled:
            return
        self.checks += 1
        if not ok:
            self.failures.append(message)

    def failures_since(self, mark: int) -> int:
        return len(self.failures) - mark


@dataclass
class RoundRecord:
    round: int
    dist2_opt: float
    objective: float
    accuracy: float
    models_exchanged: int
    audits_passed: bool


CSV_COLUMNS = ("round", "dist2_opt", "objective", "accuracy", "models_exchanged", "audits_passed")


@dataclass
class TrainLog:
    """Per-round metrics plus run-level constants and audit details."""

    records: list = field(default_factory=list)
    audit_failures: list = field(default_factory=list)
    audit_checks: int = 0
    constants: dict = field(default_factory=dict)

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(CSV_COLUMNS) + "\n")
        for r in self.records:
            buf.write(
                f"{r.round},{r.dist2_opt!r},{r.objective!r},{r.accuracy!r},"
                f"{r.models_exchanged},{r.audits_passed}\n"
            )
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv_text())

    @property
    def final(self) -> RoundRecord:
        return self.records[-1]


# ---------------------------------------------------------------------------
# Client state
# ---------------------------------------------------------------------------
class ClientState:
    """Mutable per-client state across rounds.

    The residual table is reset at every round start for the first two
    variants. The Lipschitz variant's extension u and per-step learners
    are t-independent, so they are built on first participation and then
    reused verbatim.
    """

    def __init__(self, dataset: ClientDataset, client_id: int = 0):
        self.dataset = dataset
        self.client_id = client_id
        self.g: Optional[Ensemble] = None
        self.residual: Optional[np.ndarray] = None
        self.u_extension = None
        self.u_values: Optional[np.ndarray] = None
        self.lip_steps: Optional[list] = None  # [(learner, values on support)]


def _oracle_call(oracle, table: SupportTable, state: ClientState, t, k: int):
    try:
        return oracle(table)
    except Exception as exc:
        raise RuntimeError(
            f"weak-learning oracle failed for client {state.client_id} "
            f"at round {t}, local step {k}: {exc}"
        ) from exc


# ---------------------------------------------------------------------------
# FFGB client
# ---------------------------------------------------------------------------
def ffgb_client(
    state: ClientState,
    f_t: Ensemble,
    t: int,
    cfg: RoundConfig,
    sink: Optional[AuditSink] = None,
) -> Ensemble:
    """K residual-corrected boosting steps from the shared iterate."""
    sink = sink or AuditSink(enabled=False)
    data = state.dataset
    support = data.measure
    sched = schedule_for(cfg)
    oracle = make_oracle(cfg.oracle)
    gamma = cfg.oracle.gamma
    G = cfg.effective_grad_bound()

    g = f_t
    g_vals = f_t.values_on(support)
    delta = np.zeros_like(g_vals)
    iterate_cap = None
    if G is not None:
        iterate_cap = 2.0 * G / (gamma * cfg.mu)
        w = support.weights
        start_norm = float(np.sqrt(np.dot(w, np.einsum("ij,ij->i", g_vals, g_vals))))
        if start_norm > iterate_cap + AUDIT_TOL:
            iterate_cap = None  # bound only guaranteed from a small start

    for k in range(1, cfg.local_steps + 1):
        grad = subgradient_table(cfg.loss, g_vals, data).values
        query = delta + grad
        h = _oracle_call(oracle, SupportTable(support, query), state, t, k)
        h_vals = support.cached_values(h)

        eta = schedule_eta(sched, t, k, cfg.local_steps)
        g = axpy_shrink(g, eta, cfg.mu, Base(h))
        g_vals = (1.0 - eta * cfg.mu) * g_vals - eta * h_vals
        if cfg.residual_enabled:
            delta = query - h_vals

        if sink.enabled:
            w = support.weights
            res_norm = float(np.sqrt(np.dot(w, np.einsum("ij,ij->i", delta, delta))))
            res_cap = (1.0 - gamma) / gamma * (G if G is not None else np.inf)
            sink.check(
                res_norm <= res_cap + AUDIT_TOL,
                f"client {state.client_id} round {t} step {k}: residual L2 "
                f"{res_norm:.6g} exceeds {(res_cap):.6g}",
            )
            if iterate_cap is not None:
                g_norm = float(np.sqrt(np.dot(w, np.einsum("ij,ij->i", g_vals, g_vals))))
                sink.check(
                    g_norm <= iterate_cap + AUDIT_TOL,
                    f"client {state.client_id} round {t} step {k}: iterate L2 "
                    f"{g_norm:.6g} exceeds {iterate_cap:.6g}",
                )

    state.g = g
    state.residual = delta
    return g


# ---------------------------------------------------------------------------
# FFGB.C client
# ---------------------------------------------------------------------------
def ffgb_c_client(
    state: ClientState,
    f_t: Ensemble,
    t: int,
    cfg: RoundConfig,
    sink: Optional[AuditSink] = None,
) -> Ensemble:
    """Clipped variant: learner clipped at G2 in the iterate, residual at G1."""
    sink = sink or AuditSink(enabled=False)
    data = state.dataset
    support = data.measure
    sched = schedule_for(cfg)
    oracle = make_oracle(cfg.oracle)
    gamma = cfg.oracle.gamma
    G1, G2 = cfg.clip_constants()
    B = cfg.effective_value_bound()
    G = cfg.effective_grad_bound()
    if B is not None and B < 2.0 * G / (cfg.mu * gamma) - 1e-12:
        raise ValueError("value_bound must satisfy B >= 2G/(mu*gamma)")

    g = f_t
    g_vals = f_t.values_on(support)
    delta = np.zeros_like(g_vals)

    for k in range(1, cfg.local_steps + 1):
        grad = subgradient_table(cfg.loss, g_vals, data).values
        query = delta + grad
        h = _oracle_call(oracle, SupportTable(support, query), state, t, k)
        h_vals = support.cached_values(h)
        h_clipped = np.clip(h_vals, -G2, G2)

        eta = schedule_eta(sched, t, k, cfg.local_steps)
        g = axpy_shrink(g, eta, cfg.mu, Clip(G2, Base(h)))
        g_vals = (1.0 - eta * cfg.mu) * g_vals - eta * h_clipped

        raw_residual = query - h_vals
        if cfg.residual_enabled:
            delta = np.clip(raw_residual, -G1, G1)

        if sink.enabled:
            sink.check(
                float(np.abs(np.clip(raw_residual, -G1, G1) - raw_residual).max()) <= AUDIT_TOL,
                f"client {state.client_id} round {t} step {k}: residual clip "
                f"changed on-support values",
            )
            sink.check(
                float(np.abs(h_clipped - h_vals).max()) <= AUDIT_TOL,
                f"client {state.client_id} round {t} step {k}: learner clip "
                f"activated on the support",
            )

    state.g = g
    state.residual = delta
    return g


# ---------------------------------------------------------------------------
# FFGB.L client
# ---------------------------------------------------------------------------
def _build_lip_cache(state: ClientState, cfg: RoundConfig, sink: AuditSink):
    from .data import check_lipschitz_compat  # local import avoids a cycle

    data = state.dataset
    support = data.measure
    L = cfg.lip_bound
    report = check_lipschitz_compat(data, L)
    if not report.ok:
        raise ValueError(
            f"client {state.client_id} data violates the Lipschitz "
            f"compatibility at pair {report.pair} (ratio {report.worst_ratio:.6g})"
        )
    from .measures import LipschitzExtension

    u_vals = data.atom_label_mean()
    state.u_extension = LipschitzExtension(support.points, u_vals, L)
    state.u_values = u_vals

    gamma = cfg.oracle.gamma
    B = cfg.effective_value_bound()
    oracle = make_oracle(cfg.oracle)
    delta = np.zeros_like(u_vals)
    steps = []
    for k in range(1, cfg.local_steps + 1):
        # the oracle approximates u (minus the accumulated error feedback)
        query = u_vals - delta
        h = _oracle_call(oracle, SupportTable(support, query), state, "setup", k)
        h_vals = support.cached_values(h)
        delta = delta - u_vals + h_vals
        steps.append((h, h_vals))
        if sink.enabled and B is not None:
            res_norm = float(np.linalg.norm(delta, axis=1).max())
            res_cap = (1.0 - gamma) / gamma * B
            sink.check(
                res_norm <= res_cap + AUDIT_TOL,
                f"client {state.client_id} lip step {k}: residual sup "
                f"{res_norm:.6g} exceeds {res_cap:.6g}",
            )
            h_norm = float(np.linalg.norm(h_vals, axis=1).max())
            sink.check(
                h_norm <= B / gamma + AUDIT_TOL,
                f"client {state.client_id} lip step {k}: learner sup "
                f"{h_norm:.6g} exceeds {B / gamma:.6g}",
            )
    state.lip_steps = steps
    state.residual = delta


def ffgb_l_client(
    state: ClientState,
    f_t: Ensemble,
    t: int,
    cfg: RoundConfig,
    sink: Optional[AuditSink] = None,
) -> Ensemble:
    """Square-loss variant boosting toward the client's interpolant."""
    sink = sink or AuditSink(enabled=False)
    if state.lip_steps is None:
        _build_lip_cache(state, cfg, sink)
    data = state.dataset
    support = data.measure
    sched = schedule_for(cfg)
    gamma = cfg.oracle.gamma
    B = cfg.effective_value_bound()

    g = f_t
    g_vals = f_t.values_on(support)
    # the aggregated start iterate is only (B + L*D)/gamma-bounded on this
    # client's support when feature marginals differ (D = covering radius)
    spread = cfg.lip_bound * (cfg.covering_radius or 0.0)
    for k in range(1, cfg.local_steps + 1):
        h, h_vals = state.lip_steps[k - 1]
        eta = schedule_eta(sched, t, k, cfg.local_steps)
        # g <- (1 - eta) g + eta h, realized as the shrink step with -h
        g = axpy_shrink(g, eta, 1.0, Scale(-1.0, Base(h)))
        g_vals = (1.0 - eta) * g_vals + eta * h_vals

        if sink.enabled and B is not None and _iterate_audit_active(cfg, t, k):
            cap = (B + spread) / gamma
            g_norm = float(np.linalg.norm(g_vals, axis=1).max())
            sink.check(
                g_norm <= cap + AUDIT_TOL,
                f"client {state.client_id} round {t} step {k}: iterate sup "
                f"{g_norm:.6g} exceeds {cap:.6g}",
            )

    state.g = g
    return g


_CLIENT_OPS: dict = {FFGB: ffgb_client, FFGB_C: ffgb_c_client, FFGB_L: ffgb_l_client}


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------
def distance_to_table(f, table: SupportTable) -> float:
    """Squared weighted-L2 distance between f and a tabulated target."""
    mu = table.support
    fv = f.values_on(mu) if hasattr(f, "values_on") else mu.cached_values(f)
    diff = fv - table.values
    return float(np.dot(mu.weights, np.einsum("ij,ij->i", diff, diff)))


def _metric_objective(cfg: RoundConfig, clients) -> Objective:
    # the Lipschitz variant's problem carries no explicit Tikhonov term
    mu = 0.0 if cfg.algorithm == FFGB_L else cfg.mu
    return Objective(cfg.loss, mu, tuple(clients))


class _ProbeAudits:
    """Round-level audits evaluated on a fixed probe cloud.

    For the clipped variant: sup-norm of the aggregated iterate over a
    grid spanning the data (bound 2G/(gamma*mu)). For the Lipschitz
    variant: difference ratios of the iterate over fixed probe pairs
    (bound L/gamma).
    """

    def __init__(self, cfg: RoundConfig, clients, rng):
        self.cfg = cfg
        self.kind = cfg.algorithm
        pts = np.concatenate([c.measure.points for c in clients])
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        span = np.maximum(hi - lo, 1e-6)
        d = pts.shape[1]
        if self.kind == FFGB_C:
            per_dim = max(2, int(round(cfg.probe_grid_size ** (2.0 / d)))) if d > 2 else cfg.probe_grid_size
            axes = [np.linspace(lo[j] - 0.25 * span[j], hi[j] + 0.25 * span[j], per_dim) for j in range(d)]
            mesh = np.meshgrid(*axes, indexing="ij")
            self.points = np.stack([m.ravel() for m in mesh], axis=1)
        else:
            n = max(16, cfg.lip_probe_pairs)
            self.points = lo + (hi - lo + 0.5 * span) * rng.random((n, d)) - 0.25 * span
        self.measure = EmpiricalMeasure.uniform(self.points)
        # the measure canonicalizes atom order; pair against its points
        self.points = self.measure.points
        if self.kind == FFGB_L:
            n = self.points.shape[0]
            self.pairs = rng.integers(0, n, size=(cfg.lip_probe_pairs, 2))
            gaps = np.linalg.norm(
                self.points[self.pairs[:, 0]] - self.points[self.pairs[:, 1]], axis=1
            )
            keep = gaps > 1e-9
            self.pairs = self.pairs[keep]
            self.gaps = gaps[keep]

    def check(self, f: Ensemble, t: int, sink: AuditSink):
        cfg = self.cfg
        vals = f.values_on(self.measure)
        if self.kind == FFGB_C:
            cap = 2.0 * cfg.effective_grad_bound() / (cfg.oracle.gamma * cfg.mu)
            sup = float(np.linalg.norm(vals, axis=1).max())
            sink.check(
                sup <= cap + AUDIT_TOL,
                f"round {t}: aggregated iterate sup {sup:.6g} exceeds {cap:.6g} on the probe grid",
            )
        else:
            cap = cfg.lip_bound / cfg.oracle.gamma
            num = np.linalg.norm(vals[self.pairs[:, 0]] - vals[self.pairs[:, 1]], axis=1)
            ratio = float((num / self.gaps).max()) if len(self.gaps) else 0.0
            sink.check(
                ratio <= cap + 1e-6,
                f"round {t}: aggregated iterate Lipschitz ratio {ratio:.6g} exceeds {cap:.6g}",
            )


# ---------------------------------------------------------------------------
# Server loop
# ---------------------------------------------------------------------------
def server_loop(cfg: RoundConfig, clients, f0: Optional[Ensemble] = None):
    """Run T rounds of sample / local boost / average; returns (f_T, log).

    Per round a uniform without-replacement sample of ``sample_size``
    clients runs the configured client procedure from the shared iterate;
    the new iterate is their pointwise average. The log records metrics
    for the initial function and after every round. The projection at the
    end is the identity for every feasible set used here.
    """
    if cfg.algorithm not in _BOOSTING:
        raise ValueError("server_loop drives the boosting variants; use fedavg_baseline")
    clients = list(clients)
    n = len(clients)
    m = cfg.sample_size if cfg.sample_size is not None else n
    if not (1 <= m <= n):
        raise ValueError("sample size must lie in [1, N]")
    if any(c.kind != cfg.loss for c in clients):
        raise ValueError("client datasets disagree with the configured loss")

    objective = _metric_objective(cfg, clients)
    out_dim = objective.num_classes() if cfg.loss == CROSS_ENTROPY else 1
    f = f0 if f0 is not None else Ensemble.zero(out_dim)
    if f.out_dim != out_dim:
        raise ValueError("initial function has the wrong output dimension")

    if cfg.algorithm == FFGB_L:
        if cfg.value_bound is None:
            b = max(float(np.abs(c.labels).max()) for c in clients)
            cfg = replace(cfg, value_bound=b)
        if cfg.covering_radius is None and n > 1:
            from .measures import support_covering_radius

            cfg = replace(cfg, covering_radius=support_covering_radius([c.measure for c in clients]))

    f_star = pointwise_optimum(objective) if cfg.compute_optimum else None
    states = [ClientState(c, i) for i, c in enumerate(clients)]
    rng = np.random.default_rng(cfg.seed)
    audit_on = cfg.audit_enabled()
    sink = AuditSink(enabled=audit_on)
    probes = None
    if audit_on and cfg.algorithm in (FFGB_C, FFGB_L):
        probes = _ProbeAudits(cfg, clients, np.random.default_rng((cfg.seed, 0x9E3779B9)))

    client_op = _CLIENT_OPS[cfg.algorithm]
    log = TrainLog(constants=_run_constants(cfg))

    def record(t: int, models: int, mark: int):
        dist2 = distance_to_table(f, f_star) if f_star is not None else float("nan")
        log.records.append(
            RoundRecord(
                round=t,
                dist2_opt=dist2,
                objective=objective_value(objective, f),
                accuracy=train_accuracy(objective, f),
                models_exchanged=models,
                audits_passed=sink.failures_since(mark) == 0,
            )
        )

    record(0, 0, 0)
    models = 0
    for t in range(cfg.n_rounds):
        mark = len(sink.failures)
        chosen = np.sort(rng.choice(n, size=m, replace=False))
        returns = []
        for i in chosen:
            try:
                returns.append(client_op(states[i], f, t, cfg, sink))
            except Exception as exc:
                raise RuntimeError(f"round {t}: client {i} failed: {exc}") from exc
        f = average(returns)
        # the probe bounds are established once the shrink factor is a
        # contraction, i.e. from schedule index t*K+K+1 >= 4 onward
        if probes is not None and (t * cfg.local_steps + cfg.local_steps + 1) >= 4:
            probes.check(f, t, sink)
        models += m * cfg.local_steps
        record(t + 1, models, mark)

    log.audit_checks = sink.checks
    log.audit_failures = list(sink.failures)
    return f, log


def _run_constants(cfg: RoundConfig) -> dict:
    out = {
        "algorithm": cfg.algorithm,
        "mu": cfg.mu,
        "gamma": cfg.oracle.gamma,
        "grad_bound": cfg.effective_grad_bound(),
        "value_bound": cfg.effective_value_bound(),
        "lip_bound": cfg.lip_bound,
    }
    if cfg.algorithm == FFGB_C:
        g1, g2 = cfg.clip_constants()
        out["clip_residual"] = g1
        out["clip_learner"] = g2
    return out


# ---------------------------------------------------------------------------
# FedAvg baseline
# ---------------------------------------------------------------------------
class LinearModel:
    """Linear predictor (logits or scalar output) used by the baseline."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)

    @classmethod
    def zeros(cls, out_dim: int, in_dim: int) -> "LinearModel":
        return cls(np.zeros((out_dim, in_dim)), np.zeros(out_dim))

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def values(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return X @ self.weight.T + self.bias

    def __call__(self, x):
        return self.values(np.asarray(x).reshape(1, -1))[0]

    def copy(self) -> "LinearModel":
        return LinearModel(self.weight.copy(), self.bias.copy())


def _linear_gradient(model: LinearModel, data: ClientDataset, loss: str, mu: float):
    X, y = data.features, data.labels
    n = X.shape[0]
    pred = model.values(X)
    if loss == CROSS_ENTROPY:
        z = pred - pred.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), y] -= 1.0
        gl = p / n
    else:
        gl = (pred[:, 0] - y).reshape(-1, 1) / n
    gw = gl.T @ X
    gb = gl.sum(axis=0)
    if mu > 0.0:
        atoms, w = data.measure.points, data.measure.weights
        pa = model.values(atoms) * w[:, None]
        gw += mu * (pa.T @ atoms)
        gb += mu * pa.sum(axis=0)
    return gw, gb


def fedavg_baseline(cfg: RoundConfig, clients, model: Optional[LinearModel] = None):
    """Parametric FedAvg with local full-batch gradient steps.

    Uses a linear-softmax (cross-entropy) or linear (square) model, the
    constant step size ``eta0``, and ``fedavg_local_steps`` local steps.
    Communication costs 2 models per sampled client per round. Aborts
    with a diagnostic if the objective exceeds 1e6.
    """
    clients = list(clients)
    n = len(clients)
    m = cfg.sample_size if cfg.sample_size is not None else n
    objective = Objective(cfg.loss, cfg.mu, tuple(clients))
    out_dim = objective.num_classes() if cfg.loss == CROSS_ENTROPY else 1
    in_dim = clients[0].features.shape[1]
    if model is None:
        model = LinearModel.zeros(out_dim, in_dim)

    f_star = pointwise_optimum(objective) if cfg.compute_optimum and (
        cfg.loss == SQUARE or cfg.mu > 0.0
    ) else None
    rng = np.random.default_rng(cfg.seed)
    log = TrainLog(constants={"algorithm": FEDAVG, "mu": cfg.mu, "eta0": cfg.eta0})

    def record(t, models):
        obj_val = objective_value(objective, model)
        if obj_val > 1e6:
            raise RuntimeError(
                f"FedAvg diverged at round {t}: objective {obj_val:.4g} > 1e6; "
                f"reduce eta0 (currently {cfg.eta0})"
            )
        dist2 = distance_to_table(model, f_star) if f_star is not None else float("nan")
        log.records.append(
            RoundRecord(t, dist2, obj_val, train_accuracy(objective, model), models, True)
        )

    record(0, 0)
    models = 0
    for t in range(cfg.n_rounds):
        chosen = np.sort(rng.choice(n, size=m, replace=False))
        weights, biases = [], []
        for i in chosen:
            local = model.copy()
            for _ in range(cfg.fedavg_local_steps):
                gw, gb = _linear_gradient(local, clients[i], cfg.loss, cfg.mu)
                local.weight -= cfg.eta0 * gw
                local.bias -= cfg.eta0 * gb
            weights.append(local.weight)
            biases.append(local.bias)
        model = LinearModel(np.mean(weights, axis=0), np.mean(biases, axis=0))
        models += 2 * m
        record(t + 1, models)
    return model, log


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
def save_checkpoint(path, round_index: int, ensemble: Ensemble, rng_state: dict):
    payload = {
        "round": round_index,
        "ensemble": ensemble.to_json(),
        "rng_state": _jsonable(rng_state),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    return payload["round"], Ensemble.from_json(payload["ensemble"]), payload["rng_state"]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.integer):
        return int(obj)
    return obj
