"""Command-line front end: single runs, parameter sweeps, and comparisons.

    cpmsim run --config desk_low.toml --seed 1 [--out runs/]
    cpmsim sweep --config desk_low.toml --axis policy=etsi,accuracy:1,accuracy:3 \
                 --axis density=60,120 --seeds 1,2,3
    cpmsim compare <dirA> <dirB>

A shipped profile name (desk_low, desk_high, paper_low, paper_high) can be
used in place of a config path.  Every run writes its artifacts into a
fresh directory named <timestamp>-<confighash> under the output root
(--out, $CPMSIM_OUT_ROOT, or ./runs); the effective configuration is echoed
into summary.json so a run is reproducible from its artifacts alone.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import os
import sys
import time
from pathlib import Path

from . import config as config_mod
from . import engine, metrics
from .mobility import ConfigError
from .policy import PolicyMode


def _load(config_arg: str, overrides: argparse.Namespace) -> engine.SimConfig:
    path = Path(config_arg)
    if path.exists():
        cfg = config_mod.load_config(path)
    else:
        try:
            cfg = config_mod.load_profile(config_arg)
        except FileNotFoundError:
            raise FileNotFoundError(
                f"config file not found: {config_arg} "
                f"(and no shipped profile has that name)") from None
    if getattr(overrides, "seed", None) is not None:
        cfg.seed = overrides.seed
    if getattr(overrides, "duration", None) is not None:
        cfg.duration = overrides.duration
    if getattr(overrides, "policy", None) is not None:
        cfg.policy.mode = PolicyMode(overrides.policy)
    if getattr(overrides, "gamma", None) is not None:
        cfg.policy.gamma = overrides.gamma
    if getattr(overrides, "density", None) is not None:
        cfg.scenario.target_density = overrides.density
    cfg.validate()
    return cfg


def _out_root(args) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(os.environ.get("CPMSIM_OUT_ROOT", "runs"))


def _run_one(cfg: engine.SimConfig, out_root: Path, label: dict | None = None,
             quiet: bool = False) -> tuple[Path, metrics.RunSummary]:
    echo = config_mod.config_to_dict(cfg)
    sim = engine.build_simulation(cfg)
    t0 = time.perf_counter()
    artifacts = engine.run(sim, config_echo=echo)
    elapsed = time.perf_counter() - t0
    run_dir = out_root / f"{time.strftime('%Y%m%d-%H%M%S')}-{config_mod.config_hash(cfg)}"
    n = 1
    while run_dir.exists():
        n += 1
        run_dir = out_root / f"{run_dir.name.rsplit('_', 1)[0]}_{n}"
    metrics.export(artifacts.summary, artifacts.ote, artifacts.cbr, run_dir)
    if not quiet:
        s = artifacts.summary
        c = s.counters
        print(f"run {run_dir}")
        print(f"  wall time        {elapsed:8.1f} s   ({cfg.duration:.0f} s simulated)")
        print(f"  mean CBR         {s.cbr['mean']:8.4f}" if s.cbr else "  mean CBR            (no samples)")
        print(f"  mean OTE         {s.ote['mean']:8.3f} m" if s.ote else "  mean OTE            (no samples)")
        print(f"  frames sent      {c['sent']:8d}")
        print(f"  frames collided  {c['collided']:8d}   (per-receiver losses)")
        print(f"  frames replaced  {c['replaced']:8d}")
    return run_dir, artifacts.summary


def cmd_run(args) -> int:
    try:
        cfg = _load(args.config, args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    try:
        _run_one(cfg, _out_root(args))
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


def _parse_axis(text: str) -> tuple[str, list[str]]:
    if "=" not in text:
        raise ConfigError(f"sweep axis {text!r}: expected name=v1,v2,...")
    name, values = text.split("=", 1)
    name = name.strip()
    if name not in ("policy", "density", "gamma", "seed"):
        raise ConfigError(f"sweep axis {name!r}: must be one of policy, density, gamma, seed")
    return name, [v.strip() for v in values.split(",") if v.strip()]


def _cells(axes: list[tuple[str, list[str]]]) -> list[dict]:
    cells = [{}]
    for name, values in axes:
        cells = [dict(c, **{name: v}) for c in cells for v in values]
    return cells


def _apply_cell(cfg: engine.SimConfig, cell: dict) -> dict:
    label = {"policy": cfg.policy.mode.value, "gamma": cfg.policy.gamma,
             "density": cfg.scenario.target_density, "seed": cfg.seed}
    for name, v in cell.items():
        if name == "policy":
            if v.startswith("accuracy"):
                cfg.policy.mode = PolicyMode.ACCURACY
                if ":" in v:
                    cfg.policy.gamma = float(v.split(":", 1)[1])
            elif v == "etsi":
                cfg.policy.mode = PolicyMode.ETSI
            else:
                raise ConfigError(f"sweep policy value {v!r}: use etsi or accuracy[:gamma]")
            label["policy"] = cfg.policy.mode.value
            label["gamma"] = cfg.policy.gamma
        elif name == "density":
            cfg.scenario.target_density = float(v)
            label["density"] = cfg.scenario.target_density
        elif name == "gamma":
            cfg.policy.gamma = float(v)
            label["gamma"] = cfg.policy.gamma
        elif name == "seed":
            cfg.seed = int(v)
            label["seed"] = cfg.seed
    return label


def _sweep_cell(base_config: str, cell: dict, out_root: str) -> tuple[dict, str, str]:
    """Run one sweep cell in a worker process; returns (label, dir, error)."""
    ns = argparse.Namespace()
    cfg = _load(base_config, ns)
    label = _apply_cell(cfg, cell)
    try:
        run_dir, _ = _run_one(cfg, Path(out_root), quiet=True)
        return label, str(run_dir), ""
    except Exception as e:   # record the failed cell, keep sweeping
        return label, "", f"{type(e).__name__}: {e}"


def cmd_sweep(args) -> int:
    try:
        axes = [_parse_axis(a) for a in args.axis]
        if args.seeds:
            axes.append(("seed", [s.strip() for s in args.seeds.split(",")]))
        if not axes:
            raise ConfigError("sweep: at least one --axis is required")
        _load(args.config, argparse.Namespace())   # validate base config early
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    out_root = _out_root(args)
    cells = _cells(axes)
    print(f"sweep: {len(cells)} cells -> {out_root}")
    results = []
    if args.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(_sweep_cell, args.config, c, str(out_root))
                       for c in cells]
            results = [f.result() for f in futures]
    else:
        results = [_sweep_cell(args.config, c, str(out_root)) for c in cells]

    rows = []
    failed = 0
    for label, run_dir, err in results:
        if err:
            failed += 1
            print(f"  FAILED {label}: {err}", file=sys.stderr)
            continue
        summary = _read_summary(Path(run_dir))
        rows.extend(metrics.compare_rows([(label, summary)]))
        print(f"  done {label} -> {run_dir}")
    path = metrics.write_compare_csv(rows, out_root / "compare.csv")
    print(f"compare table -> {path}")
    return 0 if failed == 0 else 1


def _read_summary(run_dir: Path) -> metrics.RunSummary:
    data = json.loads((run_dir / "summary.json").read_text())
    return metrics.RunSummary(
        cbr=data["cbr"], ote=data["ote"], ote_by_distance=data["ote_by_distance"],
        counters=data["counters"], cbr_count=data["cbr_count"],
        ote_count=data["ote_count"], config=data.get("config", {}))


def cmd_compare(args) -> int:
    try:
        sa = _read_summary(Path(args.dir_a))
        sb = _read_summary(Path(args.dir_b))
    except (OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    rows = metrics.relative_change_rows(sa, sb)
    print(f"{'metric':8s} {'statistic':12s} {'A':>12s} {'B':>12s} {'(A-B)/B':>10s}")
    for metric, stat, va, vb, rel in rows:
        print(f"{metric:8s} {stat:12s} {va:>12s} {vb:>12s} {rel:>10s}")
    out = Path(args.out) if args.out else Path(args.dir_a) / "compare.csv"
    with out.open("w", newline="") as f:
        import csv
        w = csv.writer(f)
        w.writerow(["metric", "statistic", "a", "b", "rel_change"])
        w.writerows(rows)
    print(f"-> {out}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cpmsim",
                                description="V2X collective perception simulator")
    sub = p.add_subparsers(dest="command", required=True)

    pr = sub.add_parser("run", help="run a single simulation")
    pr.add_argument("--config", required=True, help="TOML config path or profile name")
    pr.add_argument("--seed", type=int)
    pr.add_argument("--duration", type=float)
    pr.add_argument("--policy", choices=["etsi", "accuracy"])
    pr.add_argument("--gamma", type=float)
    pr.add_argument("--density", type=float)
    pr.add_argument("--out", help="output root (default $CPMSIM_OUT_ROOT or ./runs)")
    pr.set_defaults(func=cmd_run)

    ps = sub.add_parser("sweep", help="run a parameter grid")
    ps.add_argument("--config", required=True)
    ps.add_argument("--axis", action="append", default=[],
                    help="e.g. policy=etsi,accuracy:1,accuracy:3 or density=60,120")
    ps.add_argument("--seeds", help="comma-separated seeds (extra sweep axis)")
    ps.add_argument("--jobs", type=int, default=1, help="parallel runs")
    ps.add_argument("--out")
    ps.set_defaults(func=cmd_sweep)

    pc = sub.add_parser("compare", help="compare two run directories")
    pc.add_argument("dir_a")
    pc.add_argument("dir_b")
    pc.add_argument("--out")
    pc.set_defaults(func=cmd_compare)
    return p


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
