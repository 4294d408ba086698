"""Command-line surface: generate / train / evaluate / compare.

Every command takes a scenario TOML via --config and writes its outputs
under --out, echoing the resolved configuration for provenance. Outputs
meant to be reproducible (traces, eval and compare CSVs, checkpoints,
learning curves) contain no wall-clock values; dispatch timings go to
separate timing CSVs and the console tables.

Exit codes: 0 ok, 2 configuration error, 3 runtime fault.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import engine, trainer
from .config import (
    AppConfig,
    ConfigError,
    load_config,
    write_orders_csv,
    write_stations_csv,
)
from .neural import load_checkpoint
from .policies import DispatchPolicy, HrlPolicy, make_policy


def _parse_seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s != ""]
    except ValueError as e:
        raise ConfigError(f"--seed: expected N[,N...], got {text!r}") from e


def _resolve_policy(app: AppConfig, spec: str) -> DispatchPolicy:
    name, _, ckpt = spec.partition(":")
    if name == "hrl4ag":
        if not ckpt:
            raise ConfigError("--policy hrl4ag requires a checkpoint: hrl4ag:PATH")
        if not Path(ckpt).exists():
            raise FileNotFoundError(f"checkpoint not found: {ckpt}")
        params = load_checkpoint(ckpt, app.scenario.arch())
        return HrlPolicy(params)
    if ckpt:
        raise ConfigError(f"policy {name!r} takes no checkpoint")
    return make_policy(name)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


# ----------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------


def cmd_generate(app: AppConfig, seed: int, out: Path) -> int:
    """Materialize a synthetic scenario as its CSV files."""
    sc = app.scenario
    out.mkdir(parents=True, exist_ok=True)
    state = sc.build_world(seed)
    state.net.to_csv(out / "nodes.csv", out / "edges.csv")
    write_orders_csv(state.orders, out / "orders.csv")
    write_stations_csv(state.stations, out / "stations.csv")
    sc.echo(out)
    print(
        f"generated scenario '{sc.name}': {len(state.net.node_ids)} nodes, "
        f"{len(state.orders)} orders, {len(state.stations)} stations -> {out}"
    )
    return 0


def cmd_train(app: AppConfig, seed: int, out: Path, args) -> int:
    tcfg_table = dict(app.train)
    if args.episodes is not None:
        tcfg_table["episodes"] = args.episodes
    try:
        tcfg = trainer.TrainConfig(**tcfg_table)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"train: {e}") from e
    if args.no_hierarchy:
        tcfg.hierarchy = False
        tcfg.intrinsic = False
    if args.no_intrinsic:
        tcfg.intrinsic = False
    if args.no_shaping:
        tcfg.shaping = False
    out.mkdir(parents=True, exist_ok=True)
    app.scenario.echo(out)
    result = trainer.train(app.scenario, tcfg, app.reward, seed, out)
    last = result.curves[-1] if result.curves else {}
    print(
        f"trained {tcfg.episodes} episodes -> {result.checkpoint_path} "
        f"(final pn={last.get('pn', 0)} dn={last.get('dn', 0)})"
    )
    return 0


def _evaluate_policy(app: AppConfig, policy: DispatchPolicy, seeds: list[int], out: Path, tag: str):
    rows = []
    for s in seeds:
        trace_path = out / f"trace_{tag}_seed{s}.jsonl"
        metrics = engine.run_episode(app.scenario, policy, s, trace_path)
        rows.append(
            {
                "seed": s,
                "pn": metrics.pn,
                "dn": metrics.dn,
                "dn_uav": metrics.per_mode_dn[0],
                "dn_carrier": metrics.per_mode_dn[1],
                "mean_et": metrics.mean_et,
            }
        )
    return rows


def _summary(rows: list[dict], key: str) -> tuple[float, float]:
    vals = np.array([r[key] for r in rows], dtype=np.float64)
    return float(vals.mean()), float(vals.std())


def cmd_evaluate(app: AppConfig, policy_spec: str, seeds: list[int], out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    app.scenario.echo(out)
    policy = _resolve_policy(app, policy_spec)
    rows = _evaluate_policy(app, policy, seeds, out, policy.name)

    with open(out / "eval.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["row", "seed", "pn", "dn", "dn_uav", "dn_carrier", "pn_std", "dn_std"])
        for r in rows:
            w.writerow(["seed", r["seed"], r["pn"], r["dn"], r["dn_uav"], r["dn_carrier"], "", ""])
        pn_m, pn_s = _summary(rows, "pn")
        dn_m, dn_s = _summary(rows, "dn")
        du_m, _ = _summary(rows, "dn_uav")
        dc_m, _ = _summary(rows, "dn_carrier")
        w.writerow(["summary", "", _fmt(pn_m), _fmt(dn_m), _fmt(du_m), _fmt(dc_m), _fmt(pn_s), _fmt(dn_s)])

    with open(out / "timing.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seed", "mean_et_s"])
        for r in rows:
            w.writerow([r["seed"], repr(r["mean_et"])])

    et_m, et_s = _summary(rows, "mean_et")
    print(f"policy {policy.name} over seeds {seeds}:")
    print(f"  PN  {pn_m:.2f} +/- {pn_s:.2f}")
    print(f"  DN  {dn_m:.2f} +/- {dn_s:.2f}  (uav {du_m:.2f}, carrier {dc_m:.2f})")
    print(f"  ET  {et_m * 1e3:.3f} +/- {et_s * 1e3:.3f} ms/epoch")
    return 0


def cmd_compare(app: AppConfig, policy_specs: list[str], seeds: list[int], out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    app.scenario.echo(out)
    table = []
    for spec in policy_specs:
        policy = _resolve_policy(app, spec)
        rows = _evaluate_policy(app, policy, seeds, out, policy.name)
        pn_m, pn_s = _summary(rows, "pn")
        dn_m, dn_s = _summary(rows, "dn")
        du_m, _ = _summary(rows, "dn_uav")
        dc_m, _ = _summary(rows, "dn_carrier")
        et_m, et_s = _summary(rows, "mean_et")
        table.append(
            {
                "policy": policy.name,
                "pn_mean": pn_m,
                "pn_std": pn_s,
                "dn_mean": dn_m,
                "dn_std": dn_s,
                "dn_uav_mean": du_m,
                "dn_carrier_mean": dc_m,
                "et_mean": et_m,
                "et_std": et_s,
            }
        )

    with open(out / "compare.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["policy", "pn_mean", "pn_std", "dn_mean", "dn_std", "dn_uav_mean", "dn_carrier_mean"])
        for row in table:
            w.writerow(
                [
                    row["policy"],
                    _fmt(row["pn_mean"]),
                    _fmt(row["pn_std"]),
                    _fmt(row["dn_mean"]),
                    _fmt(row["dn_std"]),
                    _fmt(row["dn_uav_mean"]),
                    _fmt(row["dn_carrier_mean"]),
                ]
            )
    with open(out / "compare_timing.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["policy", "et_mean_s", "et_std_s"])
        for row in table:
            w.writerow([row["policy"], repr(row["et_mean"]), repr(row["et_std"])])

    print(f"{'policy':<12} {'PN':>14} {'DN':>14} {'ET (ms)':>16}")
    for row in table:
        print(
            f"{row['policy']:<12} "
            f"{row['pn_mean']:>7.2f}+/-{row['pn_std']:<5.2f} "
            f"{row['dn_mean']:>7.2f}+/-{row['dn_std']:<5.2f} "
            f"{row['et_mean'] * 1e3:>8.3f}+/-{row['et_std'] * 1e3:<6.3f}"
        )
    return 0


# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="airground",
        description="Cooperative UAV / ground-carrier delivery: simulate, train, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="scenario TOML file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--mode", choices=["mixed", "uav_only", "carrier_only"], default=None)

    g = sub.add_parser("generate", help="write synthetic scenario CSV files")
    common(g)
    g.add_argument("--seed", default="0", help="generation seed")

    t = sub.add_parser("train", help="train the dispatch policy")
    common(t)
    t.add_argument("--seed", default="0", help="training seed")
    t.add_argument("--episodes", type=int, default=None, help="override [train].episodes")
    t.add_argument("--no-hierarchy", action="store_true", help="flat scorer, no manager")
    t.add_argument("--no-intrinsic", action="store_true", help="disable the intrinsic reward")
    t.add_argument("--no-shaping", action="store_true", help="delivery-count reward only")

    e = sub.add_parser("evaluate", help="run one policy over seeds")
    common(e)
    e.add_argument("--seed", default="0", help="comma-separated seeds")
    e.add_argument("--policy", required=True, help="greedy|exact|random|hrl4ag:CKPT")

    c = sub.add_parser("compare", help="side-by-side policy table")
    common(c)
    c.add_argument("--seed", default="0", help="comma-separated seeds")
    c.add_argument("--policy", action="append", required=True, help="repeatable")

    return parser


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    app = load_config(args.config)
    if args.mode is not None:
        app.scenario.mode = args.mode
        app.scenario.validate()
    out = Path(args.out)

    if args.command == "generate":
        seeds = _parse_seeds(args.seed)
        return cmd_generate(app, seeds[0], out)
    if args.command == "train":
        seeds = _parse_seeds(args.seed)
        return cmd_train(app, seeds[0], out, args)
    if args.command == "evaluate":
        return cmd_evaluate(app, args.policy, _parse_seeds(args.seed), out)
    if args.command == "compare":
        return cmd_compare(app, args.policy, _parse_seeds(args.seed), out)
    raise ConfigError(f"unknown command {args.command}")


def main() -> None:
    try:
        sys.exit(run())
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        sys.exit(2)
    except Exception as e:  # runtime fault
        print(f"error: {e}", file=sys.stderr)
        sys.exit(3)


if __name__ == "__main__":
    main()
