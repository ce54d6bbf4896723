"""Command-line entry points. All outputs go to stdout as CSV or key: value."""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import harness, pipesim, rng, service, sizing
from .server import DecisionPlaneServer
from .service import VARIANTS, EngineConfig, load_config


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="engine config file (key = value lines); "
                                    "falls back to $SIMPLE_CONFIG")
    p.add_argument("--seed", type=int, help="override the engine seed")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key")


def _config_from_args(args) -> EngineConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise SystemExit(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    return load_config(args.config, overrides)


def cmd_serve(args) -> int:
    cfg = _config_from_args(args)
    cfg = service.apply_config_overrides(cfg, {"logits_source": service.SOURCE_EXTERNAL})
    server = DecisionPlaneServer(cfg)
    host, port = server.address
    print(f"listening: {host}:{port}", flush=True)
    server.serve_until_shutdown()
    return 0


def cmd_bench(args) -> int:
    cfg = _config_from_args(args)
    variants = [args.variant] if args.variant != "all" else list(VARIANTS)
    print(harness.BenchReport.csv_header())
    for variant in variants:
        rep = harness.run_ablation_bench(cfg, variant, args.duration)
        print(rep.csv_row(), flush=True)
    return 0


def cmd_validate_tvd(args) -> int:
    report = harness.run_tvd_validation(
        vocab_size=args.vocab,
        steps=args.steps,
        draws_per_step=args.draws,
        hot_size=args.hot_size,
        seed=args.seed or 0,
        analytic=args.analytic,
    )
    sys.stdout.write(report.summary())
    if args.csv:
        sys.stdout.write(report.csv())
    return 0


def cmd_fit_sizing(args) -> int:
    lo, hi, step = (int(x) for x in args.grid.split(":"))
    grid = list(range(lo, hi + 1, step))
    overrides = {"seed": str(args.seed or 0)}
    if args.vocab:
        overrides["vocab_size"] = str(args.vocab)
    cfg = load_config(args.config, overrides)
    if args.trace:
        from .shvs import build_hot_vocab, load_hot_vocab_trace

        trace = load_hot_vocab_trace(args.trace)
        hot_order = build_hot_vocab(trace, cfg.vocab_size, cfg.vocab_size).hot_ids
    else:
        hot_order = service.SyntheticSource(cfg).hot_ordering()
    rows = [
        harness.subset_softmax(service.SyntheticSource(cfg).column(i, 0), 1.0)
        for i in range(args.rows)
    ]
    curve_grid = sorted(set(grid + [1, cfg.vocab_size]))
    curve = sizing.estimate_hit_ratio_curve(rows, hot_order, curve_grid)
    cost_points = harness.measure_hot_path_cost(cfg, grid)
    c0, c, residual = sizing.fit_affine_cost(cost_points)
    model = sizing.SizingModel(c0=max(c0, 0.0), c=max(c, 1e-12), curve=curve, vocab_size=cfg.vocab_size)
    best = sizing.optimal_hot_size(model, cycle_budget=args.cycle_budget)
    sys.stdout.write(sizing.sizing_report(model, best, cycle_budget=args.cycle_budget))
    sys.stdout.write(f"fit_residual: {residual!r}\n")
    return 0


def cmd_simulate_pipeline(args) -> int:
    stages = [float(x) for x in args.stages.split(",")]
    placement = (
        pipesim.PLACEMENT_LAST_STAGE if args.placement == "last" else pipesim.PLACEMENT_OFFLOADED
    )
    spec = pipesim.PipelineSpec(
        stage_times=stages,
        sampling_time=args.sampling,
        placement=placement,
        overlap_efficiency=args.eta,
    )
    print(f"cycle_time: {pipesim.cycle_time(spec)!r}")
    print(f"bubble_fraction: {pipesim.bubble_fraction(spec)!r}")
    if args.rates:
        print("rate,throughput,p50,p95,p99,bubble")
        for rate in (float(r) for r in args.rates.split(",")):
            rep = pipesim.simulate_serving(spec, rate, args.horizon, seed=args.seed or 0)
            print(rep.csv_row(), flush=True)
    return 0


def cmd_record_trace(args) -> int:
    cfg = _config_from_args(args)
    decisions = service.record_trace(cfg, args.iterations, args.out)
    print(f"iterations: {len(decisions)}")
    print(f"trace: {args.out}")
    return 0


def cmd_replay(args) -> int:
    cfg = _config_from_args(args)
    cfg = service.apply_config_overrides(
        cfg, {"logits_source": service.SOURCE_TRACE, "trace_path": args.trace}
    )
    decisions = service.run_engine(cfg, args.iterations)
    if args.emit_tokens:
        print("iteration,seq_id,token_id,accepted_hot")
        for batch in decisions:
            for d in batch:
                print(f"{d.iteration_id},{d.seq_id},{d.token_id},{int(d.accepted_hot)}")
    else:
        print(f"iterations: {len(decisions)}")
    return 0


def cmd_probes(args) -> int:
    probes = [(args.seed or 0, it, seq, idx) for it in range(4) for seq in range(4) for idx in range(4)]
    for p in probes:
        print(rng.format_probe_line(*p))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="decplane", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the socket service (external logits)")
    _add_config_args(p)
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("bench", help="ablation ladder per-sampler throughput")
    _add_config_args(p)
    p.add_argument("--variant", default="all", choices=list(VARIANTS) + ["all"])
    p.add_argument("--duration", type=float, default=5.0, help="busy seconds per variant")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("validate-tvd", help="distributional exactness check")
    p.add_argument("--vocab", type=int, default=1024)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--draws", type=int, default=10000)
    p.add_argument("--hot-size", type=int, default=None)
    p.add_argument("--analytic", action="store_true")
    p.add_argument("--csv", action="store_true", help="emit the per-step series")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_validate_tvd)

    p = sub.add_parser("fit-sizing", help="fit cost constants and pick the hot size")
    p.add_argument("--trace", help="hot-vocab frequency trace file")
    p.add_argument("--grid", required=True, metavar="LO:HI:STEP")
    p.add_argument("--vocab", type=int, default=None)
    p.add_argument("--rows", type=int, default=64, help="probability rows for the hit curve")
    p.add_argument("--cycle-budget", type=float, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_fit_sizing)

    p = sub.add_parser("simulate-pipeline", help="cycle/bubble analytics and serving sim")
    p.add_argument("--stages", required=True, help="comma-separated stage times")
    p.add_argument("--sampling", type=float, required=True)
    p.add_argument("--placement", choices=["last", "offload"], default="last")
    p.add_argument("--eta", type=float, default=pipesim.DEFAULT_OVERLAP_EFFICIENCY)
    p.add_argument("--rates", help="comma-separated arrival rates to simulate")
    p.add_argument("--horizon", type=float, default=20.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_simulate_pipeline)

    p = sub.add_parser("record-trace", help="record scheduling+shard frames to a file")
    _add_config_args(p)
    p.add_argument("--iterations", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_record_trace)

    p = sub.add_parser("replay", help="re-run the engine from a recorded trace")
    _add_config_args(p)
    p.add_argument("--trace", required=True)
    p.add_argument("--iterations", type=int, required=True)
    p.add_argument("--emit-tokens", action="store_true")
    p.set_defaults(fn=cmd_replay)

    p = sub.add_parser("rng-probes", help="print deterministic RNG probe lines")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_probes)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
