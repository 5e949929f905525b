"""Config-addressed experiment runner.

``funcboost run config.json [--out DIR] [--seed N] [--threads N]`` executes
one run per sweep cell (cartesian product of the sweep axes), writing one
metrics CSV per cell, a final checkpoint, and a summary JSON that also
reports the heterogeneity radii (TV and W1), the support covering radius,
and the derived clipping/regression constants.

``funcboost report DIR`` prints final metrics per cell, monotonicity
verdicts for K- and heterogeneity sweeps, and the invariant-audit table.
"""
from __future__ import annotations

import argparse
import itertools
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .data import (
    CsvSchema,
    PartitionSpec,
    SyntheticSpec,
    generate,
    load_csv,
    partition,
)
from .fedboost import (
    FEDAVG,
    FFGB_L,
    RoundConfig,
    fedavg_baseline,
    save_checkpoint,
    server_loop,
)
from .losses import CROSS_ENTROPY, SQUARE
from .measures import mixture, support_covering_radius, tv_distance, wasserstein
from .oracles import OracleConfig

SWEEP_AXES = ("K", "gamma", "s", "delta", "m")


# ---------------------------------------------------------------------------
# Config parsing and validation
# ---------------------------------------------------------------------------
def _validate(cfg: dict) -> list:
    """Collect every schema violation, not just the first."""
    errors = []
    if not isinstance(cfg, dict):
        return ["top-level config must be a JSON object"]

    data = cfg.get("data")
    if not isinstance(data, dict):
        errors.append("missing 'data' section")
    else:
        kind = data.get("kind")
        if kind == "synthetic":
            if data.get("mode") not in ("semi_het", "fully_het", "lipschitz_regression"):
                errors.append(f"data.mode {data.get('mode')!r} is not a synthetic mode")
        elif kind == "csv":
            if not data.get("path"):
                errors.append("data.path is required for csv data")
            if not data.get("feature_cols"):
                errors.append("data.feature_cols is required for csv data")
            if "label_col" not in data:
                errors.append("data.label_col is required for csv data")
            part = data.get("partition")
            if not isinstance(part, dict) or "n_clients" not in part:
                errors.append("data.partition.n_clients is required for csv data")
        else:
            errors.append(f"data.kind must be 'synthetic' or 'csv', got {kind!r}")

    run = cfg.get("run")
    if not isinstance(run, dict):
        errors.append("missing 'run' section")
        run = {}
    alg = run.get("algorithm")
    if alg not in ("ffgb", "ffgb_c", "ffgb_l", "fedavg"):
        errors.append(f"run.algorithm {alg!r} is not one of ffgb/ffgb_c/ffgb_l/fedavg")
    loss = run.get("loss")
    if loss not in (CROSS_ENTROPY, SQUARE):
        errors.append(f"run.loss {loss!r} is not cross_entropy/square")
    for key, low in (("T", 0), ("K", 1)):
        val = run.get(key)
        if not isinstance(val, int) or val < low:
            errors.append(f"run.{key} must be an integer >= {low}")
    if alg == "ffgb_l":
        if loss is not None and loss != SQUARE:
            errors.append("run.loss must be 'square' for ffgb_l")
        if not run.get("lip_bound"):
            errors.append("run.lip_bound is required for ffgb_l")
    oracle = run.get("oracle", {})
    if oracle and oracle.get("kind") not in ("idealized", "tree"):
        errors.append(f"run.oracle.kind {oracle.get('kind')!r} is not idealized/tree")
    gamma = oracle.get("gamma", 1.0) if isinstance(oracle, dict) else 1.0
    if not (isinstance(gamma, (int, float)) and 0.0 < gamma <= 1.0):
        errors.append("run.oracle.gamma must lie in (0, 1]")

    sweep = cfg.get("sweep", {})
    if not isinstance(sweep, dict):
        errors.append("'sweep' must be an object of axis lists")
        sweep = {}
    for axis, values in sweep.items():
        if axis not in SWEEP_AXES:
            errors.append(f"unknown sweep axis {axis!r} (allowed: {', '.join(SWEEP_AXES)})")
        elif not isinstance(values, list) or not values:
            errors.append(f"sweep.{axis} must be a nonempty list")
    if "s" in sweep and isinstance(data, dict) and data.get("kind") != "csv":
        errors.append("sweep.s requires csv data with a partition spec")
    if "delta" in sweep and isinstance(data, dict) and data.get("kind") != "synthetic":
        errors.append("sweep.delta requires synthetic data")

    if "output_dir" in cfg and not isinstance(cfg["output_dir"], str):
        errors.append("output_dir must be a string path")
    return errors


def _build_clients(data_cfg: dict, overrides: dict):
    if data_cfg["kind"] == "synthetic":
        spec = SyntheticSpec(
            mode=data_cfg["mode"],
            dim=int(data_cfg.get("dim", 2)),
            n_classes=int(data_cfg.get("n_classes", 3)),
            n_clients=int(data_cfg.get("n_clients", 4)),
            per_client=int(data_cfg.get("per_client", 40)),
            seed=int(data_cfg.get("seed", 0)),
            flip_rates=tuple(data_cfg["flip_rates"]) if data_cfg.get("flip_rates") else None,
            delta=float(overrides.get("delta", data_cfg.get("delta", 0.0))),
            lip_bound=float(data_cfg.get("lip_bound", 1.0)),
            value_bound=float(data_cfg.get("value_bound", 1.0)),
        )
        return generate(spec)
    schema = CsvSchema(
        feature_cols=tuple(data_cfg["feature_cols"]),
        label_col=int(data_cfg["label_col"]),
        label_kind=data_cfg.get("label_kind", CROSS_ENTROPY),
        has_header=bool(data_cfg.get("has_header", True)),
    )
    examples = load_csv(data_cfg["path"], schema)
    part = data_cfg["partition"]
    spec = PartitionSpec(
        n_clients=int(part["n_clients"]),
        iid_fraction=float(overrides.get("s", part.get("iid_fraction", 1.0))),
        seed=int(part.get("seed", 0)),
    )
    return partition(examples, spec, schema.label_kind)


def _build_round_config(cfg: dict, overrides: dict, seed_override=None) -> RoundConfig:
    run = cfg["run"]
    metrics = cfg.get("metrics", {})
    ocfg = run.get("oracle", {})
    oracle = OracleConfig(
        kind=ocfg.get("kind", "idealized"),
        gamma=float(overrides.get("gamma", ocfg.get("gamma", 1.0))),
        max_depth=int(ocfg.get("max_depth", 3)),
        min_leaf=int(ocfg.get("min_leaf", 1)),
        lip_slope=ocfg.get("lip_slope"),
        target_norm=ocfg.get("target_norm", "l2"),
    )
    seed = int(run.get("seed", 0)) if seed_override is None else int(seed_override)
    m = overrides.get("m", run.get("m"))
    return RoundConfig(
        algorithm=run["algorithm"],
        loss=run["loss"],
        n_rounds=int(run["T"]),
        local_steps=int(overrides.get("K", run["K"])),
        sample_size=None if m is None else int(m),
        oracle=oracle,
        mu=float(run.get("mu", 0.1)),
        grad_bound=run.get("grad_bound"),
        value_bound=run.get("value_bound"),
        lip_bound=run.get("lip_bound"),
        seed=seed,
        residual_enabled=bool(run.get("residual", True)),
        audit=run.get("audit"),
        probe_grid_size=int(metrics.get("probe_grid_size", 12)),
        lip_probe_pairs=int(metrics.get("lip_probe_pairs", 128)),
        eta0=float(run.get("eta0", 5e-4)),
        fedavg_local_steps=int(run.get("fedavg_local_steps", 10)),
        compute_optimum=bool(metrics.get("compute_optimum", True)),
    )


# ---------------------------------------------------------------------------
# Sweep cells
# ---------------------------------------------------------------------------
def _cells(sweep: dict):
    axes = [a for a in SWEEP_AXES if a in sweep]
    if not axes:
        return [("run", {})]
    out = []
    for combo in itertools.product(*(sweep[a] for a in axes)):
        overrides = dict(zip(axes, combo))
        name = "_".join(f"{a}{v:g}" if isinstance(v, float) else f"{a}{v}" for a, v in overrides.items())
        out.append((name, overrides))
    return out


def _heterogeneity_summary(clients, cfg: RoundConfig, want_transport: bool) -> dict:
    measures = [c.measure for c in clients]
    out = {}
    if len(measures) >= 2:
        mix = mixture(measures)
        out["omega_tv"] = float(np.mean([tv_distance(mix, m) for m in measures]))
        out["covering_radius"] = support_covering_radius(measures)
        if want_transport:
            out["omega_w1"] = float(
                np.mean([wasserstein(mix, m, p=1)[0] for m in measures])
            )
            if cfg.loss == SQUARE and cfg.lip_bound is not None:
                n = len(measures)
                b = cfg.effective_value_bound() or max(
                    float(np.abs(c.labels).max()) for c in clients
                )
                total = 0.0
                for mi in measures:
                    for mj in measures:
                        total += wasserstein(mi, mj, p=2)[0] ** 2
                out["regression_grad_sq"] = float(
                    2.0 * cfg.lip_bound**2 / n**2 * total + 2.0 * b**2
                )
    else:
        out["omega_tv"] = 0.0
        out["covering_radius"] = 0.0
        if want_transport:
            out["omega_w1"] = 0.0
    return out


def _run_cell(cfg: dict, name: str, overrides: dict, out_dir: Path, seed_override) -> dict:
    rcfg = _build_round_config(cfg, overrides, seed_override)
    clients = _build_clients(cfg["data"], overrides)
    if rcfg.algorithm == FEDAVG:
        _, log = fedavg_baseline(rcfg, clients)
        final_model = None
    else:
        final_model, log = server_loop(rcfg, clients)

    csv_path = out_dir / f"{name}.csv"
    log.write_csv(csv_path)
    if final_model is not None:
        save_checkpoint(
            out_dir / f"{name}_checkpoint.json",
            rcfg.n_rounds,
            final_model,
            {"seed": rcfg.seed, "rounds_completed": rcfg.n_rounds},
        )

    want_transport = bool(cfg.get("metrics", {}).get("transport_constants", True))
    cell = {
        "name": name,
        "params": overrides,
        "csv": csv_path.name,
        "final": {
            "round": log.final.round,
            "dist2_opt": log.final.dist2_opt,
            "objective": log.final.objective,
            "accuracy": log.final.accuracy,
            "models_exchanged": log.final.models_exchanged,
        },
        "constants": log.constants,
        "audit_checks": log.audit_checks,
        "audit_failures": log.audit_failures,
    }
    cell.update(_heterogeneity_summary(clients, rcfg, want_transport))
    return cell


def run(config_path, out=None, seed=None, threads: int = 1) -> int:
    """Execute a config; returns a process exit code."""
    try:
        with open(config_path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 1
    except json.JSONDecodeError as exc:
        print(f"error: config is not valid JSON: {exc}", file=sys.stderr)
        return 2

    errors = _validate(cfg)
    if errors:
        print(f"config has {len(errors)} problem(s):", file=sys.stderr)
        for e in errors:
            print(f"  - {e}", file=sys.stderr)
        return 2

    out_dir = Path(out) if out else Path(cfg.get("output_dir", "funcboost_out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = _cells(cfg.get("sweep", {}))

    def work(item):
        name, overrides = item
        return _run_cell(cfg, name, overrides, out_dir, seed)

    try:
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(work, cells))
        else:
            results = [work(c) for c in cells]
    except Exception as exc:
        print(f"error: run failed: {exc}", file=sys.stderr)
        return 1

    summary = {"config": cfg, "cells": results}
    with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    print(f"wrote {len(results)} cell(s) to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------
def _monotonicity(cells, axis: str, value_key: str, direction: str):
    rows = [c for c in cells if axis in c.get("params", {})]
    if len(rows) < 2:
        return None
    rows.sort(key=lambda c: c["params"][axis])
    vals = [c["final"]["dist2_opt"] for c in rows] if value_key == "dist2_opt" else None
    inversions = 0
    for a, b in zip(vals, vals[1:]):
        if direction == "non-increasing" and b > a:
            inversions += 1
        if direction == "non-decreasing" and b < a:
            inversions += 1
    verdict = "ok" if inversions == 0 else f"{inversions} adjacent inversion(s)"
    return axis, direction, inversions, verdict, [(c["params"][axis], v) for c, v in zip(rows, vals)]


def report(run_dir) -> int:
    """Summarize a finished run directory on stdout."""
    run_dir = Path(run_dir)
    summary_path = run_dir / "summary.json"
    if not summary_path.exists():
        print(f"error: {summary_path} not found", file=sys.stderr)
        return 1
    try:
        with open(summary_path, encoding="utf-8") as fh:
            summary = json.load(fh)
    except json.JSONDecodeError as exc:
        print(f"error: corrupt summary.json: {exc}", file=sys.stderr)
        return 1

    cells = summary.get("cells", [])
    bad = 0
    print(f"{'cell':24s} {'dist2_opt':>14s} {'objective':>12s} {'accuracy':>9s} {'models':>8s} {'audits':>7s}")
    for cell in sorted(cells, key=lambda c: c["name"]):
        csv_path = run_dir / cell.get("csv", "")
        if not csv_path.exists():
            print(f"error: cell {cell['name']}: missing CSV {csv_path.name}", file=sys.stderr)
            bad += 1
            continue
        fin = cell["final"]
        n_fail = len(cell.get("audit_failures", []))
        audits = "pass" if n_fail == 0 else f"{n_fail} FAIL"
        print(
            f"{cell['name']:24s} {fin['dist2_opt']:>14.6g} {fin['objective']:>12.6g} "
            f"{fin['accuracy']:>9.4f} {fin['models_exchanged']:>8d} {audits:>7s}"
        )

    for axis, direction in (("K", "non-increasing"), ("delta", "non-decreasing"), ("m", "non-increasing")):
        res = _monotonicity(cells, axis, "dist2_opt", direction)
        if res is not None:
            _, _, _, verdict, pairs = res
            series = ", ".join(f"{v[0]}:{v[1]:.4g}" for v in pairs)
            print(f"{axis}-sweep dist2_opt {direction}: {verdict}  [{series}]")

    failures = [(c["name"], f) for c in cells for f in c.get("audit_failures", [])]
    if failures:
        print("invariant-audit failures:")
        for name, msg in failures:
            print(f"  [{name}] {msg}")
    else:
        checks = sum(c.get("audit_checks", 0) for c in cells)
        print(f"invariant audits: all passed ({checks} checks)")
    return 1 if bad else 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="funcboost", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("config", help="path to the experiment JSON")
    p_run.add_argument("--out", default=None, help="output directory override")
    p_run.add_argument("--seed", type=int, default=None, help="seed override")
    p_run.add_argument("--threads", type=int, default=1, help="parallel sweep cells")
    p_rep = sub.add_parser("report", help="summarize a run directory")
    p_rep.add_argument("dir", help="directory produced by 'run'")
    args = parser.parse_args(argv)
    if args.command == "run":
        return run(args.config, out=args.out, seed=args.seed, threads=args.threads)
    return report(args.dir)


if __name__ == "__main__":
    sys.exit(main())
