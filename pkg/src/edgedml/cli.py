"""Experiment runner.

Subcommands:
  run <config>        execute every (strategy, seed) pair, write artifacts
  sweep <config>      grid over gate hyper-parameters (--alpha/--beta/...)
  gen-data            write a synthetic dataset as an IDX image/label pair

Config files are flat INI-style key/value text (see docs in README). Exit
codes: 0 success, 1 runtime failure, 2 invalid usage or config.
"""
from __future__ import annotations

import argparse
import configparser
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

from . import metrics
from .dataio import (
    Dataset,
    export_csv,
    gen_synthetic,
    load_idx,
    quantize_for_idx,
    split_train_test,
    write_idx,
)
from .errors import EdgedmlError
from .nnkernel import ModelArch
from .simcore import CLUSTER_PRESETS, Cluster, CommModel, WorkerProfile, iter_trace_lines
from .strategies import RunResult, StrategyConfig, Workload, run_strategy

ENV_OUT_DIR = "EDGEDML_OUT"

GATE_COLUMNS = ("strategy", "seed", "worker", "iter", "loss", "mu", "sigma", "z", "alpha", "decision")
ALLOC_COLUMNS = ("strategy", "seed", "round", "worker", "dss", "mbs", "predicted", "observed", "target")
AGG_COLUMNS = ("strategy", "seed", "sim_time", "worker", "loss_temp", "loss_before", "loss_after", "w1", "w2")
SWEEP_COLUMNS = (
    "alpha", "beta", "window", "lambda", "seed",
    "pushes", "iterations", "sim_time_s", "conv_acc", "api_calls_total", "converged",
)


class ConfigError(EdgedmlError):
    """Config problem; the message carries file/section/key context."""


@dataclass
class ExperimentConfig:
    workload: Workload
    cluster: Cluster
    strategies: list[StrategyConfig]
    seeds: list[int]
    out_dir: Path


def _get(cp, section, key, conv=str, default=None, required=False):
    if not cp.has_option(section, key):
        if required:
            raise ConfigError(f"[{section}] missing required key {key!r}")
        return default
    raw = cp.get(section, key)
    try:
        if conv is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return conv(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc


def _load_dataset(cp) -> tuple[Dataset, Dataset, int]:
    source = _get(cp, "data", "source", str, required=True)
    train_frac = _get(cp, "data", "train_frac", float, 0.85)
    split_seed = _get(cp, "data", "split_seed", int, 0)
    if source == "synthetic":
        ds = gen_synthetic(
            seed=_get(cp, "data", "seed", int, 0),
            n=_get(cp, "data", "n", int, required=True),
            num_classes=_get(cp, "data", "classes", int, 10),
            dim=_get(cp, "data", "dim", int, required=True),
            skew=_get(cp, "data", "skew", float, 0.0),
            class_sep=_get(cp, "data", "class_sep", float, 4.0),
        )
    elif source == "idx":
        ds = load_idx(
            _get(cp, "data", "images", str, required=True),
            _get(cp, "data", "labels", str, required=True),
            num_classes=_get(cp, "data", "classes", int, 10),
        )
    else:
        raise ConfigError(f"[data] source must be synthetic or idx, got {source!r}")
    train, test = split_train_test(ds, train_frac, split_seed)
    return train, test, ds.num_classes


def _load_cluster(cp, feature_dim: int) -> Cluster:
    comm = CommModel(
        latency_s=_get(cp, "comm", "latency_s", float, 0.005),
        bandwidth_Bps=_get(cp, "comm", "bandwidth_bps", float, 10e6),
        bytes_per_scalar=2 if _get(cp, "comm", "compress", bool, False) else 4,
        sample_bytes=_get(cp, "comm", "sample_bytes", int, feature_dim * 4 + 1),
    )
    inline = sorted(k for k in cp.options("cluster") if k.startswith("worker.")) if cp.has_section("cluster") else []
    if inline:
        workers = []
        for key in inline:
            raw = cp.get("cluster", key)
            parts = [p.strip() for p in raw.split(",")]
            if len(parts) != 4:
                raise ConfigError(f"[cluster] {key}: expected 'K,jitter_cv,drift,mem_capacity'")
            workers.append(
                WorkerProfile(
                    worker_id=int(key.split(".", 1)[1]),
                    K=float(parts[0]),
                    jitter_cv=float(parts[1]),
                    drift_per_round=float(parts[2]),
                    mem_capacity=int(parts[3]),
                )
            )
        return Cluster(workers=workers, comm=comm)
    preset = _get(cp, "cluster", "preset", str, required=True)
    if preset not in CLUSTER_PRESETS:
        raise ConfigError(f"[cluster] unknown preset {preset!r}; known: {sorted(CLUSTER_PRESETS)}")
    return CLUSTER_PRESETS[preset](
        k_unit=_get(cp, "cluster", "k_unit", float, 0.005),
        jitter_cv=_get(cp, "cluster", "jitter_cv", float, 0.05),
        drift_per_round=_get(cp, "cluster", "drift_per_round", float, 0.0),
        mem_samples_per_gb=_get(cp, "cluster", "mem_samples_per_gb", int, 400),
        comm=comm,
    )


def _strategy_sections(cp) -> list[tuple[str, str]]:
    found = [(s, s.split(":", 1)[1]) for s in cp.sections() if s.startswith("strategy:")]
    if not found:
        raise ConfigError("config defines no [strategy:<kind>] section")
    return found


def _build_strategy(cp, section: str, kind: str, base: dict) -> StrategyConfig:
    params = dict(base)
    params["kind"] = kind
    overrides = {
        "s": ("staleness", float),
        "staleness": ("staleness", float),
        "alpha": ("alpha", float),
        "beta": ("beta", float),
        "lambda": ("lam", int),
        "window": ("window", int),
        "alpha_reset_on_push": ("alpha_reset_on_push", bool),
        "worker_g_reset": ("worker_g_reset", str),
        "eta": ("eta", float),
        "epochs": ("epochs", int),
        "initial_dss": ("initial_dss", int),
        "initial_mbs": ("initial_mbs", int),
    }
    for key in cp.options(section):
        if key not in overrides:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        field, conv = overrides[key]
        params[field] = _get(cp, section, key, conv)
    try:
        return StrategyConfig(**params)
    except EdgedmlError as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def parse_experiment(path, out_override: str | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cp.read_file(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    try:
        train, test, num_classes = _load_dataset(cp)
    except EdgedmlError as exc:
        raise ConfigError(str(exc)) from exc
    arch = ModelArch(
        input_dim=train.dim,
        hidden_dim=_get(cp, "model", "hidden_dim", int, 32),
        num_classes=num_classes,
    )
    workload = Workload(train=train, test=test, arch=arch)
    cluster = _load_cluster(cp, train.dim)

    base = {
        "eta": _get(cp, "run", "eta", float, 0.1),
        "epochs": _get(cp, "run", "epochs", int, 1),
        "initial_dss": _get(cp, "run", "initial_dss", int, 600),
        "initial_mbs": _get(cp, "run", "initial_mbs", int, 16),
        "target_accuracy": _get(cp, "run", "target_accuracy", float, 0.95),
        "max_iters": _get(cp, "run", "max_iters", int, 100_000),
        "patience": _get(cp, "run", "patience", int, 25),
        "eval_cost_ratio": _get(cp, "run", "eval_cost_ratio", float, 0.33),
        "prefetch": _get(cp, "run", "prefetch", bool, True),
    }
    max_sim_time = _get(cp, "run", "max_sim_time", float, None)
    if max_sim_time is not None:
        base["max_sim_time"] = max_sim_time
    strategies = [
        _build_strategy(cp, section, kind, base) for section, kind in _strategy_sections(cp)
    ]

    seeds_raw = _get(cp, "run", "seeds", str, "1")
    try:
        seeds = [int(s.strip()) for s in seeds_raw.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"[run] seeds = {seeds_raw!r}: {exc}") from exc
    if not seeds or any(s < 0 for s in seeds):
        raise ConfigError("[run] seeds must be a comma list of non-negative integers")

    out_dir = out_override or os.environ.get(ENV_OUT_DIR) or _get(cp, "run", "out_dir", str, "out")
    return ExperimentConfig(
        workload=workload,
        cluster=cluster,
        strategies=strategies,
        seeds=seeds,
        out_dir=Path(out_dir),
    )


def _labelled(rows: list[dict], result: RunResult) -> list[dict]:
    return [{"strategy": result.strategy, "seed": result.seed, **row} for row in rows]


def _write_artifacts(results: list[RunResult], out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics.emit_summary_csv(metrics.summarize(results), out_dir / "results.csv")

    trace_lines = []
    gate_rows, alloc_rows, agg_rows, ledger_rows = [], [], [], []
    for r in results:
        label = f"{r.strategy}-{r.seed}"
        trace_lines.extend(iter_trace_lines(r.trace, run_label=label))
        gate_rows.extend(_labelled(r.gate_rows, r))
        alloc_rows.extend(_labelled(r.alloc_rows, r))
        agg_rows.extend(_labelled(r.agg_rows, r))
        for worker, kinds in r.ledger.per_worker().items():
            ledger_rows.append(
                {"strategy": r.strategy, "seed": r.seed, "worker": worker,
                 **kinds, "total": sum(kinds.values())}
            )
    tmp = out_dir / "trace.jsonl.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for line in trace_lines:
            fh.write(line + "\n")
    os.replace(tmp, out_dir / "trace.jsonl")
    metrics.emit_csv(gate_rows, out_dir / "gate_trace.csv", columns=GATE_COLUMNS)
    metrics.emit_csv(alloc_rows, out_dir / "alloc_history.csv", columns=ALLOC_COLUMNS)
    metrics.emit_csv(agg_rows, out_dir / "agg_log.csv", columns=AGG_COLUMNS)
    ledger_columns = ["strategy", "seed", "worker", "req_dataset", "push_gradients",
                      "req_global_model", "send_loss", "control", "total"]
    metrics.emit_csv(ledger_rows, out_dir / "api_ledger.csv", columns=ledger_columns)


def cmd_run(config_path, out_override: str | None = None) -> int:
    try:
        exp = parse_experiment(config_path, out_override)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    results = []
    for scfg in exp.strategies:
        for seed in exp.seeds:
            results.append(run_strategy(scfg, exp.cluster, exp.workload, seed))
    _write_artifacts(results, exp.out_dir)
    for row in metrics.summarize(results):
        speedup = f"{row.speedup_vs_bsp:.2f}x" if row.speedup_vs_bsp else "-"
        print(
            f"{row.strategy:<8} seed={row.seed} iters={row.iterations} "
            f"time={row.sim_time_s:.2f}s wi={row.wi_avg:.2f} acc={row.conv_acc:.4f} "
            f"api={row.api_calls_total} speedup={speedup}"
        )
    return 0


def cmd_sweep(config_path, alphas, betas, windows, lams, out_override: str | None = None) -> int:
    try:
        exp = parse_experiment(config_path, out_override)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    hermes = [s for s in exp.strategies if s.kind == "hermes"]
    if not hermes:
        print("config error: sweep needs a [strategy:hermes] section", file=sys.stderr)
        return 2
    base = hermes[0]
    alphas = alphas or [base.alpha]
    betas = betas or [base.beta]
    windows = windows or [base.window]
    lams = lams or [base.lam]
    rows = []
    for alpha in alphas:
        for beta in betas:
            for window in windows:
                for lam in lams:
                    try:
                        cfg = replace(base, alpha=alpha, beta=beta, window=window, lam=lam)
                    except EdgedmlError as exc:
                        print(f"config error: sweep point invalid: {exc}", file=sys.stderr)
                        return 2
                    for seed in exp.seeds:
                        res = run_strategy(cfg, exp.cluster, exp.workload, seed)
                        rows.append(
                            {
                                "alpha": alpha,
                                "beta": beta,
                                "window": window,
                                "lambda": lam,
                                "seed": seed,
                                "pushes": res.pushes_total,
                                "iterations": res.total_iterations,
                                "sim_time_s": res.wall_sim_time_s,
                                "conv_acc": res.final_accuracy,
                                "api_calls_total": res.api_calls_total,
                                "converged": res.converged,
                            }
                        )
    exp.out_dir.mkdir(parents=True, exist_ok=True)
    metrics.emit_csv(rows, exp.out_dir / "sweep.csv", columns=SWEEP_COLUMNS)
    print(f"wrote {len(rows)} sweep rows to {exp.out_dir / 'sweep.csv'}")
    return 0


def cmd_gen_data(out_dir, n, classes, dim, skew, class_sep, seed, prefix, with_csv) -> int:
    if n < 1 or classes < 2 or dim < 1:
        print("gen-data: n must be >= 1, classes >= 2, dim >= 1", file=sys.stderr)
        return 2
    if n < classes:
        print("gen-data: n must be at least num_classes", file=sys.stderr)
        return 2
    try:
        ds = quantize_for_idx(gen_synthetic(seed, n, classes, dim, skew, class_sep))
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        images = out / f"{prefix}-images.idx"
        labels = out / f"{prefix}-labels.idx"
        write_idx(ds, images, labels)
        if with_csv:
            export_csv(ds, out / f"{prefix}.csv")
    except (EdgedmlError, OSError) as exc:
        print(f"gen-data failed: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {images} and {labels} ({n} samples, {classes} classes, dim {dim})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edgedml",
        description="Deterministic parameter-server training simulator for heterogeneous edge clusters.",
        epilog=f"Set {ENV_OUT_DIR} to override the configured output directory.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run every (strategy, seed) pair from a config file")
    p_run.add_argument("config", help="experiment config file (INI key-value format)")
    p_run.add_argument("--out", help="output directory override")

    p_sweep = sub.add_parser("sweep", help="grid-sweep gate hyper-parameters for hermes")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--alpha", nargs="+", type=float, help="gate thresholds (negative)")
    p_sweep.add_argument("--beta", nargs="+", type=float, help="alpha decay factors in (0,1)")
    p_sweep.add_argument("--window", nargs="+", type=int, help="loss window lengths")
    p_sweep.add_argument("--lambda", dest="lam", nargs="+", type=int, help="decay patience values")
    p_sweep.add_argument("--out", help="output directory override")

    p_gen = sub.add_parser("gen-data", help="write a synthetic dataset as IDX files")
    p_gen.add_argument("--out", default="data", help="output directory")
    p_gen.add_argument("--n", type=int, required=True, help="number of samples")
    p_gen.add_argument("--classes", type=int, default=10)
    p_gen.add_argument("--dim", type=int, default=784)
    p_gen.add_argument("--skew", type=float, default=0.0, help="0 = balanced, up to 1 = geometric imbalance")
    p_gen.add_argument("--class-sep", type=float, default=4.0)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--prefix", default="synthetic")
    p_gen.add_argument("--csv", action="store_true", help="also write a CSV export")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args.config, args.out)
        if args.command == "sweep":
            return cmd_sweep(args.config, args.alpha, args.beta, args.window, args.lam, args.out)
        if args.command == "gen-data":
            return cmd_gen_data(
                args.out, args.n, args.classes, args.dim,
                args.skew, args.class_sep, args.seed, args.prefix, args.csv,
            )
        return 2
    except (EdgedmlError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
