"""Command-line pipeline: gen-data, train, synth-metric, run, verify, report.

Artifacts flow out_dir/dataset -> out_dir/model.bin -> out_dir/metric.bin
-> out_dir/runs/<scenario>/<variant>/<seed>/, and `report` condenses the
runs tree into the comparison CSVs downstream plotting consumes.  Every
command takes `--config FILE` (JSON, defaults apply per key) and `--out
DIR`; the DAMPC_OUT_ROOT environment variable overrides the configured
output root when set.

Exit codes: 0 success, 2 bad config or arguments, 3 missing input
artifact (the message names the file and the command that produces it),
4 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import basisnet, config, disturbances, harness, metric
from .errors import ArtifactError, ConfigError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_VERIFY = 4

MODEL_FILE = "model.bin"
METRIC_FILE = "metric.bin"


class MissingArtifact(Exception):
    def __init__(self, path, producer: str):
        super().__init__(f"missing artifact {path}; produce it with `dampc {producer}`")


def _load_run_config(args) -> config.RunConfig:
    cfg = config.load_config(args.config) if args.config else config.default_config()
    if args.out is not None:
        cfg.out_dir = args.out
    return cfg


def _model_path(cfg) -> Path:
    return cfg.out_root() / MODEL_FILE


def _metric_path(cfg) -> Path:
    return cfg.out_root() / METRIC_FILE


def _load_model(cfg):
    path = _model_path(cfg)
    if not path.exists():
        raise MissingArtifact(path, "train")
    return basisnet.load_model(path)


def _load_metric(cfg, recheck: bool = False):
    path = _metric_path(cfg)
    if not path.exists():
        raise MissingArtifact(path, "synth-metric")
    return metric.MetricField.load(path, recheck=recheck)


# -- commands --------------------------------------------------------------

def cmd_gen_data(cfg: config.RunConfig, args) -> int:
    out = cfg.out_root() / "dataset"
    t0 = time.time()
    datasets = disturbances.generate_meta_dataset(cfg.dataset, cfg.vehicle)
    manifest = disturbances.save_dataset(datasets, out, cfg.dataset)
    print(f"gen-data: {len(datasets)} conditions, "
          f"{sum(len(d) for d in datasets)} samples -> {out} "
          f"({time.time() - t0:.0f}s)")
    print(f"manifest hash {manifest['hash']}")
    return EXIT_OK


def cmd_train(cfg: config.RunConfig, args) -> int:
    data_dir = cfg.out_root() / "dataset"
    if not (Path(data_dir) / "manifest.json").exists():
        raise MissingArtifact(Path(data_dir) / "manifest.json", "gen-data")
    datasets = disturbances.load_dataset(data_dir)
    manifest = json.loads((Path(data_dir) / "manifest.json").read_text())
    t0 = time.time()
    model, coeffs, report = basisnet.train_meta(
        datasets, cfg.basis, cfg.train, dataset_hash=manifest["hash"])
    path = _model_path(cfg)
    basisnet.save_model(path, model, coeffs, report)
    val = report.val_loss[-1] if len(report.val_loss) else float("nan")
    print(f"train: {cfg.train.epochs} epochs in {time.time() - t0:.0f}s, "
          f"loss {report.train_loss[-1]:.4f} (val {val:.4f}) -> {path}")
    print(f"spectral norms {np.round(report.spectral, 3)}")
    return EXIT_OK


def cmd_synth_metric(cfg: config.RunConfig, args) -> int:
    t0 = time.time()
    grid = cfg.metric
    n_nodes = grid.phi_points * grid.theta_points * grid.fu_points

    def progress(msg):
        print(f"  {msg}", flush=True)

    field = metric.build_metric_field(cfg.vehicle, grid, progress=progress)
    path = _metric_path(cfg)
    field.save(path)
    print(f"synth-metric: {n_nodes} nodes in {time.time() - t0:.0f}s, "
          f"alpha {field.alpha:.3f}, condition bound "
          f"{field.omega_chi:.2f} -> {path}")
    return EXIT_OK


def _seed_list(cfg, args):
    return [args.seed] if args.seed is not None else list(cfg.seeds)


def _variant_list(cfg, args):
    if getattr(args, "all_variants", False):
        return list(harness.VARIANTS)
    if args.variant is not None:
        return [args.variant]
    return list(cfg.variants)


def cmd_run(cfg: config.RunConfig, args) -> int:
    if args.scenario is not None:
        cfg.scenario.kind = {"fig8": "figure8"}.get(args.scenario, args.scenario)
    field = _load_metric(cfg)
    variants = _variant_list(cfg, args)
    model = None
    if any(v != "nominal-mpc" for v in variants):
        model, _, _ = _load_model(cfg)

    opts = cfg.run
    rows = []
    for variant in variants:
        for seed in _seed_list(cfg, args):
            scenario = cfg.build_scenario(variant, seed)
            log = harness.run(scenario, field, model=model,
                              params=cfg.vehicle, mpc_cfg=cfg.mpc,
                              options=opts,
                              out_root=cfg.out_root() / "runs")
            s = log.summary
            rows.append((scenario.name, variant, seed, s))
            print(f"run {scenario.name}/{variant}/{seed}: "
                  f"rmse {s['rmse']:.4f} m, terminal {s['terminal_error']:.4f} m, "
                  f"mpc failures {s['mpc_failures']}, "
                  f"median mpc {s['timing']['median_mpc_wall_ms']:.0f} ms")
    if len(rows) > 1:
        print(f"\n{'scenario':<10} {'variant':<16} {'seed':>4} "
              f"{'rmse':>8} {'terminal':>9} {'touchdown':>9}")
        for name, variant, seed, s in rows:
            td = "-" if s.get("touchdown") is None else str(bool(s["touchdown"]))
            print(f"{name:<10} {variant:<16} {seed:>4} "
                  f"{s['rmse']:>8.4f} {s['terminal_error']:>9.4f} {td:>9}")
    return EXIT_OK


def _verify_certificates(cfg) -> list[str]:
    failures = []
    field = _load_metric(cfg, recheck=False)
    report = field.verify(field.params_from_meta())
    if not report["ok"]:
        failures.append(
            f"metric certificate: {report['failures']}/{report['nodes']} nodes "
            f"fail, worst margin {report['worst_margin']:.3e}")
    else:
        print(f"certificates: {report['nodes']} nodes, worst margin "
              f"{report['worst_margin']:.3e}, alpha {field.alpha:.3f}")
    return failures


def _verify_model(cfg) -> list[str]:
    failures = []
    model, meta, extras = _load_model(cfg)
    budget = model.layer_budget()
    norms = model.spectral_norms(50)
    if np.any(norms > budget * (1.0 + 1e-9)):
        failures.append(f"spectral norms {norms} exceed per-layer budget {budget:.4f}")
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(64):
        x1 = rng.uniform(-1.5, 1.5, size=9)
        x2 = x1 + rng.uniform(-0.5, 0.5, size=9)
        xr = rng.uniform(-1.0, 1.0, size=9)
        num = np.linalg.norm(model.phi(x1, xr) - model.phi(x2, xr))
        den = np.linalg.norm(x1 - x2)
        if den > 1e-12:
            worst = max(worst, num / den)
    if worst > model.gamma * (1.0 + 1e-9):
        failures.append(f"Lipschitz estimate {worst:.3f} exceeds gamma {model.gamma}")
    if not failures:
        print(f"model: spectral norms {np.round(norms, 3)} within {budget:.3f}, "
              f"Lipschitz estimate {worst:.3f} <= {model.gamma}")
    return failures


def _verify_runs(cfg) -> list[str]:
    runs_root = cfg.out_root() / "runs"
    paths = sorted(runs_root.glob("*/*/*/summary.json"))
    if not paths:
        raise MissingArtifact(runs_root, "run")
    failures = []
    # Timing is a host measurement and the abort note quotes exception
    # text; neither is a function of the records.
    skip = {"timing", "aborted"}
    for sp in paths:
        log = harness.RunLog.load(sp.parent)
        recomputed = log.recompute_summary()
        stored = {k: v for k, v in log.summary.items() if k not in skip}
        if recomputed != stored:
            diff = {k for k in set(stored) | set(recomputed)
                    if stored.get(k) != recomputed.get(k)}
            failures.append(f"{sp.parent}: summary drifts from records on {sorted(diff)}")
    if not failures:
        print(f"runs: {len(paths)} summaries recomputed bit-identically")
    return failures


def cmd_verify(cfg: config.RunConfig, args) -> int:
    suites = {
        "certificates": _verify_certificates,
        "model": _verify_model,
        "runs": _verify_runs,
    }
    names = list(suites) if args.suite == "all" else [args.suite]
    failures = []
    for name in names:
        failures.extend(suites[name](cfg))
    for f in failures:
        print(f"FAIL {f}", file=sys.stderr)
    return EXIT_VERIFY if failures else EXIT_OK


def cmd_report(cfg: config.RunConfig, args) -> int:
    runs_root = cfg.out_root() / "runs"
    paths = sorted(runs_root.glob("*/*/*/summary.json"))
    if not paths:
        raise MissingArtifact(runs_root, "run")
    out = cfg.out_root() / "report"
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for sp in paths:
        s = json.loads(sp.read_text())["summary"]
        rel = sp.parent.relative_to(runs_root)
        scenario, variant, seed = rel.parts
        rows.append({
            "scenario": scenario, "variant": variant, "seed": seed,
            "rmse": s["rmse"], "terminal_error": s["terminal_error"],
            "max_error_norm": s["max_error_norm"],
            "bound_violation_fraction": s["bound_violation_fraction"],
            "mpc_failures": s["mpc_failures"],
            "touchdown": s.get("touchdown"),
            "touchdown_speed": s.get("touchdown_speed"),
            "median_mpc_wall_ms": s["timing"]["median_mpc_wall_ms"],
            "median_cbac_wall_ms": s["timing"]["median_cbac_wall_ms"],
            "run_dir": str(sp.parent),
        })
    table = out / "summary.csv"
    with open(table, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    print(f"report: {len(rows)} runs -> {table}")
    return EXIT_OK


# -- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dampc",
        description="Disturbance-aware planning/control pipeline")
    parser.add_argument("--config", help="JSON config file (defaults per key)")
    parser.add_argument("--out", help="output root (overrides config; "
                        f"env {config.OUT_ROOT_ENV} overrides both)")
    parser.add_argument("--dump-config", metavar="PATH",
                        help="write the fully defaulted config and exit")
    sub = parser.add_subparsers(dest="command")

    sub.add_parser("gen-data", help="simulate the training conditions")
    sub.add_parser("train", help="meta-train the residual basis")
    sub.add_parser("synth-metric", help="synthesize the tracking metric grid")

    p_run = sub.add_parser("run", help="fly scenarios and persist logs")
    p_run.add_argument("--scenario", choices=["fig8", "figure8", "landing", "hover"])
    p_run.add_argument("--variant", choices=list(harness.VARIANTS))
    p_run.add_argument("--all-variants", action="store_true")
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--horizon", type=int, help="override mpc.N")
    p_run.add_argument("--mpc-rate", type=float,
                       help="replans per second (overrides run.replan_period)")

    p_verify = sub.add_parser("verify", help="re-check stored artifacts")
    p_verify.add_argument("--suite", default="all",
                          choices=["certificates", "model", "runs", "all"])

    sub.add_parser("report", help="condense run summaries into CSV")
    return parser


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "synth-metric": cmd_synth_metric,
    "run": cmd_run,
    "verify": cmd_verify,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_run_config(args)
        if args.dump_config:
            config.save_config(cfg, args.dump_config)
            print(f"wrote {args.dump_config}")
            return EXIT_OK
        if args.command is None:
            parser.print_help()
            return EXIT_CONFIG
        if getattr(args, "horizon", None) is not None:
            if args.horizon < 2:
                raise ConfigError("--horizon must be at least 2")
            cfg.mpc.N = args.horizon
        if getattr(args, "mpc_rate", None) is not None:
            if args.mpc_rate <= 0:
                raise ConfigError("--mpc-rate must be positive")
            cfg.run.replan_period = 1.0 / args.mpc_rate
        return _COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_MISSING
    except ArtifactError as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
