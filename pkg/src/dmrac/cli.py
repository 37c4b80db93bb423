"""Command-line front end: run one scenario, run a campaign, export
features, or re-derive metrics from an existing trajectory log.

Exit codes: 0 on success, 2 on configuration errors, 3 when a run crashed
and --fail-on-crash was given.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import harness
from . import link as link_mod
from .controllers import NetFeatures


def _add_common(sub):
    sub.add_argument("--config", required=True, help="scenario config JSON")
    sub.add_argument("--seed", type=int, default=None, help="override config seed")
    sub.add_argument("--out-dir", default=None, help="directory for CSV/JSON outputs")
    sub.add_argument("--controller", default=None, choices=harness.CONTROLLERS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dmrac", description="fast/slow adaptive-control scenario runner"
    )
    subs = parser.add_subparsers(dest="command", required=True)

    run = subs.add_parser("run", help="run one scenario")
    _add_common(run)
    run.add_argument("--mode", default="sim", choices=("sim", "socket"))
    run.add_argument(
        "--fail-on-crash",
        action="store_true",
        help="exit with status 3 if the run crashes",
    )

    camp = subs.add_parser("campaign", help="run a seeded batch of scenarios")
    _add_common(camp)
    camp.add_argument("--runs", type=int, default=8)
    camp.add_argument("--seed-base", type=int, default=0)

    exp = subs.add_parser(
        "export-features", help="sample features across labeled scenario runs"
    )
    exp.add_argument("--config", required=True, help="export spec JSON")
    exp.add_argument("--out-dir", required=True)

    rep = subs.add_parser("replay", help="re-derive metrics from a trajectory CSV")
    rep.add_argument("--log", required=True)
    rep.add_argument("--out", default=None, help="metrics JSON path (default stdout)")
    return parser


def _load_scenario(args) -> harness.ScenarioConfig:
    cfg = harness.load_config(args.config)
    if args.seed is not None:
        cfg = harness.scenario_from_dict({**cfg.to_dict(), "seed": args.seed})
    if args.controller is not None:
        cfg = harness.scenario_from_dict(
            {**cfg.to_dict(), "controller": args.controller}
        )
    return cfg


def _cmd_run(args) -> int:
    cfg = _load_scenario(args)
    result = harness.run_scenario(cfg, out_dir=args.out_dir, mode=args.mode)
    m = result.metrics
    status = "CRASHED at %.3f s" % m.crash_time if m.crashed else "completed"
    print(
        f"{cfg.controller} run {status}: ticks={m.ticks} "
        f"rmse={m.rmse_enorm:.6g} final={m.rmse_enorm_final:.6g} "
        f"peak={m.peak_enorm:.6g} publishes={m.publishes} swaps={m.swap_count}"
    )
    if m.crashed and args.fail_on_crash:
        return 3
    return 0


def _cmd_campaign(args) -> int:
    cfg = _load_scenario(args)
    aggregate, _ = harness.run_campaign(
        cfg, n_runs=args.runs, seed_base=args.seed_base, out_dir=args.out_dir
    )
    print(
        f"{cfg.controller} campaign: {aggregate['crash_count']}/{args.runs} crashed, "
        f"mean final rmse {aggregate['rmse_final_mean']:.6g}"
    )
    return 0


_EXPORT_KEYS = ("snapshot", "stride", "pca_dim", "runs")


def _cmd_export(args) -> int:
    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise harness.ConfigError(f"cannot read export config: {exc}") from exc
    if not isinstance(raw, dict):
        raise harness.ConfigError("export config must be a JSON object")
    harness._check_keys(raw, _EXPORT_KEYS, "export config")
    if "snapshot" not in raw or "runs" not in raw:
        raise harness.ConfigError("export config needs 'snapshot' and 'runs'")
    params = harness.load_snapshot(raw["snapshot"])
    stack = NetFeatures(weights=params.weights[:-1], biases=params.biases[:-1])
    labeled = []
    for i, entry in enumerate(raw["runs"]):
        if not isinstance(entry, dict) or "label" not in entry or "scenario" not in entry:
            raise harness.ConfigError(f"runs[{i}] needs 'label' and 'scenario'")
        labeled.append((str(entry["label"]), harness.scenario_from_dict(entry["scenario"])))
    export = harness.export_features(
        labeled,
        stack,
        stride=int(raw.get("stride", 50)),
        d=int(raw.get("pca_dim", 3)),
        out_dir=args.out_dir,
    )
    ratios = ", ".join(f"{v:.3f}" for v in export.pca.ratios)
    print(
        f"exported {export.features.shape[0]} feature rows "
        f"({len(set(export.labels))} regimes), PCA ratios [{ratios}]"
    )
    return 0


def _cmd_replay(args) -> int:
    try:
        log = harness.read_trajectory_csv(args.log)
    except OSError as exc:
        raise harness.ConfigError(f"cannot read log {args.log}: {exc}") from exc
    metrics = harness.metrics_from_log(log)
    out = metrics.to_dict()
    # Counters are not recoverable from a trajectory log alone.
    for key in (
        "swap_count",
        "stale_count",
        "buffer_admissions",
        "publishes",
        "telemetry_sent",
        "telemetry_dropped",
        "updates_dropped",
        "decode_errors",
        "crashed",
        "crash_time",
        "p99_tick_ms",
    ):
        out.pop(key, None)
    text = json.dumps(out, indent=2, sort_keys=True) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "campaign":
            return _cmd_campaign(args)
        if args.command == "export-features":
            return _cmd_export(args)
        return _cmd_replay(args)
    except (harness.ConfigError, harness.ShapeMismatch) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
