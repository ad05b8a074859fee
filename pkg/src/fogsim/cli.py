"""Command-line entry point: ``fogsim run | gen-trace | gen-topology | sweep | report``."""

from __future__ import annotations

import argparse
import csv
import json
import os
import subprocess
import sys
from typing import List, Optional

from .application import ApplicationError
from .geo import MELBOURNE_CBD, BoundingBox, Location
from .infrastructure import CapacityError, TopologyError, build_topology
from .mobility import (MobilityKind, MobilityModelParams, generate_directional_trace, generate_random_trace,
                       write_traces)
from .scenarios import (CDC_FEATURES, MOBILITY_POLICIES, ConfigError, ScenarioConfig, builtin, generate_topology,
                        run_scenario, write_outputs)
from .simulation import PLACEMENT_POLICIES, InvariantViolation


def _norm(name: Optional[str]) -> Optional[str]:
    if name is None:
        return None
    n = name.strip().lower().replace("_", "-")
    return {"intra-inter-cluster": "intra-inter", "intrainter": "intra-inter", "intrainterCluster": "intra-inter",
            "cloudcentric": "cloud-centric", "nonhierarchical": "non-hierarchical",
            "smp": "smp-clustering"}.get(n, n)


def _seed(arg_seed: Optional[int], cfg_seed: int) -> int:
    if arg_seed is not None:
        return arg_seed
    env = os.environ.get("FOGSIM_SEED")
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"FOGSIM_SEED must be an integer, got {env!r}")
    return cfg_seed


def load_config(args) -> ScenarioConfig:
    policy = _norm(args.policy)
    mobility = args.mobility.lower().replace("-", "_") if args.mobility else None
    if args.config:
        cfg = ScenarioConfig.load(args.config)
        d = cfg.to_dict()
        if policy:
            key = "placement_policy" if policy in PLACEMENT_POLICIES else "mobility_policy"
            d[key] = policy
            if policy == "intra-inter":
                d["clustering"]["enabled"] = True
        if mobility:
            d["mobility_model"]["kind"] = mobility
        if args.users is not None:
            d["devices"]["count"] = args.users
        cfg = ScenarioConfig.from_dict(d)
    else:
        if not args.scenario:
            raise ConfigError("give --scenario or --config")
        if policy and policy not in PLACEMENT_POLICIES and policy not in MOBILITY_POLICIES:
            raise ConfigError(f"unknown policy {args.policy!r}; placement: {', '.join(PLACEMENT_POLICIES)}; "
                              f"mobility: {', '.join(MOBILITY_POLICIES)}")
        cfg = builtin(args.scenario, args.scale, 0, policy, mobility, args.users, args.features)
    cfg.seed = _seed(args.seed, cfg.seed)
    cfg.validate()
    return cfg


def cmd_run(args) -> int:
    cfg = load_config(args)
    if args.dump_config:
        sys.stdout.write(cfg.to_json())
        return 0
    result = run_scenario(cfg)
    out = args.out or cfg.output or os.path.join("runs", f"{cfg.name}-seed{cfg.seed}")
    paths = write_outputs(result, out)
    rep = result.report
    loops = ", ".join(f"{k}: {v['mean_ms']:.1f} ms" for k, v in sorted(rep.loop_delays.items())) or "none"
    print(f"{cfg.name} seed={cfg.seed} placement={cfg.placement_policy} mobility={cfg.mobility_policy}")
    print(f"  location events: {int(rep.counters.get('location_events', 0))}  "
          f"migrations: {rep.migration_summary['count']} (mean {rep.migration_summary['mean_ms']:.1f} ms)")
    print(f"  loop delay: {loops}")
    print(f"  energy: {rep.energy['total']:.1f} J  network: {rep.network_usage['total_mb']:.2f} MB")
    print(f"  wall clock {result.footprint['wall_clock_s']:.2f} s, peak RSS {result.footprint['peak_rss_mb']:.0f} MB")
    print(f"  wrote {', '.join(sorted(paths))} to {out}")
    return 0


def cmd_gen_trace(args) -> int:
    roi = BoundingBox.from_list(args.roi)
    kind = MobilityKind(args.model.lower().replace("-", "_"))
    speed = tuple(args.speed) if len(args.speed) == 2 else args.speed[0]
    params = MobilityModelParams(kind, speed, args.interval * 1000.0, args.duration * 1000.0, roi,
                                 pause=args.pause * 1000.0, seed=args.seed)
    traces = []
    for e in range(args.entities):
        if kind is MobilityKind.DIRECTIONAL:
            start = Location(*args.start) if args.start else roi.center
            traces.append(generate_directional_trace(start, args.heading, params, entity=e))
        else:
            start = Location(*args.start) if args.start else None
            traces.append(generate_random_trace(params, entity=e, start=start))
    if args.out == "-":
        write_traces(traces, sys.stdout)
    else:
        with open(args.out, "w", newline="") as fh:
            write_traces(traces, fh)
        print(f"wrote {sum(len(t) for t in traces)} samples for {len(traces)} entities to {args.out}")
    return 0


def cmd_gen_topology(args) -> int:
    roi = BoundingBox.from_list(args.roi)
    gws = [args.gateways_per_block] * args.blocks if args.gateways is None else args.gateways
    spec = generate_topology(args.blocks, gws, roi, args.seed)
    topo = build_topology(spec)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "topology.json"), "w") as fh:
        json.dump(spec, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(args.out, "nodes.csv"), "w") as fh:
        fh.write(topo.node_csv())
    print(f"{len(topo.tier_nodes(1))} proxies, {len(topo.tier_nodes(2))} gateways written to {args.out}")
    return 0


def cmd_sweep(args) -> int:
    """Run a grid of seeds and policies, one OS process each."""
    policies = [_norm(p) for p in args.policies] if args.policies else [None]
    jobs = []
    for seed in range(args.seed_start, args.seed_start + args.seeds):
        for pol in policies:
            out = os.path.join(args.out, f"{args.scenario}-{pol or 'default'}-seed{seed}")
            cmd = [sys.executable, "-m", "fogsim", "run", "--scenario", args.scenario, "--scale", args.scale,
                   "--seed", str(seed), "--out", out]
            if pol:
                cmd += ["--policy", pol]
            if args.mobility:
                cmd += ["--mobility", args.mobility]
            jobs.append(cmd)
    failed = 0
    running: List[subprocess.Popen] = []
    for cmd in jobs:
        running.append(subprocess.Popen(cmd, stdout=subprocess.DEVNULL))
        if len(running) >= args.jobs:
            failed += running.pop(0).wait() != 0
    for p in running:
        failed += p.wait() != 0
    print(f"{len(jobs) - failed}/{len(jobs)} runs succeeded under {args.out}")
    return 1 if failed else 0


def cmd_report(args) -> int:
    """Summarise one or more report.csv files side by side."""
    tables = []
    for path in args.csv:
        with open(path, newline="") as fh:
            rows = {r["metric"]: r["value"] for r in csv.DictReader(fh)}
        tables.append((path, rows))
    wanted = args.metrics or sorted({k for _, rows in tables for k in rows
                                     if k.startswith(("energy.total", "network_usage.total_mb",
                                                      "migration_summary.mean_ms", "loop_delays."))
                                     and not k.endswith("max_ms")})
    width = max([len(m) for m in wanted] + [6])
    print("metric".ljust(width) + "".join(f"  {os.path.basename(os.path.dirname(p)) or p:>20}" for p, _ in tables))
    for m in wanted:
        vals = []
        for _, rows in tables:
            v = rows.get(m)
            vals.append(f"{float(v):>20.4f}" if v not in (None, "") else f"{'-':>20}")
        print(m.ljust(width) + "".join(f"  {v}" for v in vals))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fogsim", description="Hierarchical fog/edge simulator with mobility, "
                                "clustering and microservice placement.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a built-in scenario or a JSON config")
    r.add_argument("--scenario", choices=["ats", "chm", "cdc"])
    r.add_argument("--config", help="scenario JSON file")
    r.add_argument("--policy", help="placement policy (edgeward, smp-no-clustering, smp-clustering) or mobility "
                   "policy (cloud-centric, non-hierarchical, intra-inter, none)")
    r.add_argument("--mobility", help="mobility model: directional, random (waypoint), random-walk")
    r.add_argument("--features", choices=CDC_FEATURES, help="CDC feature combination")
    r.add_argument("--scale", choices=["small", "full"], default="small")
    r.add_argument("--users", type=int, help="number of mobile users / devices")
    r.add_argument("--seed", type=int, help="overrides FOGSIM_SEED and the config seed")
    r.add_argument("--out", help="output directory (default runs/<scenario>-seed<seed>)")
    r.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
    r.set_defaults(func=cmd_run)

    t = sub.add_parser("gen-trace", help="generate a mobility trace CSV")
    t.add_argument("--model", default="directional", help="directional, random_waypoint or random_walk")
    t.add_argument("--speed", type=float, nargs="+", default=[1.5], help="m/s, or LO HI for random models")
    t.add_argument("--interval", type=float, default=10.0, help="seconds between samples")
    t.add_argument("--duration", type=float, default=500.0, help="seconds")
    t.add_argument("--pause", type=float, default=0.0, help="seconds of dwell at waypoints")
    t.add_argument("--heading", type=float, default=90.0, help="degrees clockwise from north (directional)")
    t.add_argument("--start", type=float, nargs=2, metavar=("LAT", "LON"))
    t.add_argument("--roi", type=float, nargs=4, default=MELBOURNE_CBD.to_list(),
                   metavar=("LAT_MIN", "LAT_MAX", "LON_MIN", "LON_MAX"))
    t.add_argument("--entities", type=int, default=1)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", default="-", help="CSV path, or - for stdout")
    t.set_defaults(func=cmd_gen_trace)

    g = sub.add_parser("gen-topology", help="generate a block/gateway topology")
    g.add_argument("--blocks", type=int, required=True)
    g.add_argument("--gateways-per-block", type=int, default=10)
    g.add_argument("--gateways", type=int, help="total gateways spread over the blocks (overrides per-block)")
    g.add_argument("--roi", type=float, nargs=4, default=MELBOURNE_CBD.to_list(),
                   metavar=("LAT_MIN", "LAT_MAX", "LON_MIN", "LON_MAX"))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default=".")
    g.set_defaults(func=cmd_gen_topology)

    s = sub.add_parser("sweep", help="run a scenario over seeds and policies in parallel processes")
    s.add_argument("--scenario", choices=["ats", "chm", "cdc"], required=True)
    s.add_argument("--policies", nargs="*")
    s.add_argument("--mobility")
    s.add_argument("--scale", choices=["small", "full"], default="small")
    s.add_argument("--seeds", type=int, default=10)
    s.add_argument("--seed-start", type=int, default=0)
    s.add_argument("--jobs", type=int, default=max(1, os.cpu_count() or 1))
    s.add_argument("--out", default="sweep")
    s.set_defaults(func=cmd_sweep)

    rp = sub.add_parser("report", help="summarise report.csv files as a table")
    rp.add_argument("csv", nargs="+")
    rp.add_argument("--metrics", nargs="*")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, TopologyError, ApplicationError, CapacityError, InvariantViolation, ValueError,
            FileNotFoundError) as exc:
        print(f"fogsim: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
