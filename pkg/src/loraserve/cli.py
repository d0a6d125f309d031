"""Command-line entry point: simulations, perf-model fitting and the split-prefill demo.

Exit codes: 0 ok, 2 bad configuration or input, 3 runtime/environment failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import core_math as cm
from .cpu_assist import OverlapTiming, ServingMode, overlap_ttft, plan_parallelization, split_prefill
from .errors import FitError, ProtocolError, WorkerFault
from .perf_model import fit, instrumented_profile, read_profile_csv, sample_batches, write_profile_csv
from .scheduler import Policy
from .simulator import (FleetConfig, Simulation, WorkloadSpec, default_scheduler_config,
                        generate_workload, read_trace, write_trace)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
POLICIES = [p.value for p in Policy]
MODES = ["cached", "ondmd", "caraserve", "cpu-assisted"]
R2_WARN = 0.9


class ConfigError(Exception):
    pass


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create output directory {out}: {e}") from None
    return out


def _existing(path, what) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} file not found: {p}")
    return p


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- simulate ----------------------------------------------------------------------

def _fleet_from_args(args) -> FleetConfig:
    d = {}
    if args.fleet:
        try:
            d = json.loads(_existing(args.fleet, "fleet").read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"fleet file is not valid JSON: {e}") from None
    fleet = FleetConfig.from_dict(d, base_dir=Path(args.fleet).parent if args.fleet else None)
    overrides = {"servers": args.servers, "mode": args.mode, "cache_slots": args.cache_slots}
    if args.kernel is not None and args.kernel != fleet.kernel:
        # switching kernels also switches the default latency models
        overrides.update(kernel=args.kernel, decode_model=None, prefill_model=None)
    d = fleet.to_dict()
    d.update({k: v for k, v in overrides.items() if v is not None})
    return FleetConfig.from_dict(d)


def _policies(names):
    if not names:
        return [Policy.RANK_AWARE]
    if "all" in names:
        return list(Policy)
    return [Policy(n) for n in dict.fromkeys(names)]


def cmd_simulate(args) -> int:
    fleet = _fleet_from_args(args)
    if args.trace:
        trace = read_trace(_existing(args.trace, "trace"))
    else:
        rps = args.rps if args.rps is not None else 5.0 * fleet.servers
        trace = generate_workload(WorkloadSpec(kind=args.workload, aggregate_rps=rps,
                                               num_adapters=args.adapters, skew=args.skew,
                                               seed=args.seed, duration_s=args.duration))
    if not trace:
        raise ConfigError("workload contains no requests")
    out = _out_dir(args.out)
    _write_json(out / "fleet.json", fleet.to_dict())
    rows = []
    for policy in _policies(args.policy):
        sched = default_scheduler_config(fleet, args.slo_ms, policy)
        sim = Simulation(fleet, trace, sched, args.seed)
        m = sim.run(args.until_ms)
        m.write(out / f"metrics_{policy.value}.json", out / f"requests_{policy.value}.csv")
        sim.scheduler.write_log(out / f"decisions_{policy.value}.csv")
        rows.append([policy.value, m.generated, m.completed, m.dropped, f"{m.slo_attainment:.6f}",
                     f"{m.mean_ttft_ms:.3f}", f"{m.mean_tpt_ms:.3f}", f"{m.cold_start_share:.6f}"])
        print(f"{policy.value:<10} attainment={m.slo_attainment:.4f} mean_tpt={m.mean_tpt_ms:.2f}ms "
              f"mean_ttft={m.mean_ttft_ms:.1f}ms cold_share={m.cold_start_share:.4f} "
              f"completed={m.completed}/{m.generated} dropped={m.dropped}")
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "generated", "completed", "dropped", "slo_attainment",
                    "mean_ttft_ms", "mean_tpt_ms", "cold_start_share"])
        w.writerows(rows)
    return EXIT_OK


def cmd_gen_trace(args) -> int:
    spec = WorkloadSpec(kind=args.workload, aggregate_rps=args.rps, num_adapters=args.adapters,
                        skew=args.skew, seed=args.seed, duration_s=args.duration)
    reqs = generate_workload(spec)
    path = _out_dir(args.out) / "trace.csv"
    write_trace(path, reqs)
    print(f"wrote {len(reqs)} requests to {path}")
    return EXIT_OK


# -- perf models ---------------------------------------------------------------------

def cmd_profile_kernels(args) -> int:
    out = _out_dir(args.out)
    batches = sample_batches(args.batches, max_batch=args.max_batch, seed=args.seed)
    for kind in args.kernel:
        points = instrumented_profile(kind, batches, seed=args.seed)
        write_profile_csv(out / f"profile_{kind}.csv", points, kind)
        print(f"{kind}: {len(points)} profile points -> {out / f'profile_{kind}.csv'}")
    return EXIT_OK


def cmd_fit_perf(args) -> int:
    points = read_profile_csv(_existing(args.profile, "profile"), args.kernel)
    model = fit(points, args.kernel)
    out = _out_dir(args.out)
    model.save(out / f"perf_{model.kind}.json")
    print(f"{model.kind}: alpha={model.alpha:.9g} beta={model.beta:.9g} r2={model.r_squared:.6f} "
          f"({len(points)} points) -> {out / f'perf_{model.kind}.json'}")
    if model.r_squared < R2_WARN:
        print(f"warning: R^2 {model.r_squared:.3f} < {R2_WARN}; latency is poorly explained "
              f"by the {model.kind} feature", file=sys.stderr)
    return EXIT_OK


# -- split prefill demo ----------------------------------------------------------------

def cmd_demo_split_prefill(args) -> int:
    if args.tokens < 1 or args.cap < 1 or args.layers < 1 or args.hidden < 1 or args.rank < 1:
        raise ConfigError("tokens, cap, layers, hidden and rank must all be >= 1")
    cfg = cm.ToyModelConfig(hidden_size=args.hidden, intermediate_size=2 * args.hidden,
                            num_layers=args.layers)
    layers = cm.init_weights(cfg, args.seed)
    adapter = cm.init_adapter(args.hidden, args.rank, seed=args.seed + 1)
    prompt = cm.random_tokens(args.tokens, args.hidden, args.seed + 2)
    plan = plan_parallelization(args.tokens, args.cap, args.cores)
    launch = "inline" if args.inline else args.launch
    want, _ = cm.prefill(prompt, layers, adapter)
    res = split_prefill(prompt, layers, adapter, plan, launch=launch,
                        fail_worker=args.fail_worker, fail_at_layer=args.fail_at_layer)
    diff = float(np.max(np.abs(res.output - want)))
    timing = OverlapTiming(args.load_ms, args.cpu_rate, args.gpu_rate, args.decode_ms)
    ttft = {m.value: overlap_ttft(args.tokens, timing, m) for m in ServingMode}

    print(f"workers={plan.num_workers} slices={[n for _, n in plan.slices]} launch={launch}")
    print(f"max_abs_diff={diff:.3e} worker_layers={res.worker_layers}/{args.layers} "
          f"degraded={res.degraded}")
    if res.fault:
        print(f"fault: {res.fault}")
    print(f"{'mode':<14}{'ttft_ms':>10}")
    for mode, v in ttft.items():
        print(f"{mode:<14}{v:>10.3f}")

    out = _out_dir(args.out)
    with open(out / "ttft.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "tokens", "load_ms", "ttft_ms"])
        for mode, v in ttft.items():
            w.writerow([mode, args.tokens, args.load_ms, f"{v:.6f}"])
    _write_json(out / "split_prefill.json", {
        "workers": plan.num_workers, "slices": [list(s) for s in plan.slices],
        "max_abs_diff": diff, "degraded": res.degraded, "worker_layers": res.worker_layers})
    if not diff <= args.tol * max(1.0, float(np.max(np.abs(want)))):
        print(f"error: split prefill deviates from the monolithic result by {diff:.3e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------------

def _workload_flags(p, rps_default):
    p.add_argument("--rps", type=float, default=rps_default,
                   help="aggregate arrival rate (default: 5 per server)" if rps_default is None else None)
    p.add_argument("--adapters", type=int, default=1000)
    p.add_argument("--duration", type=float, default=60.0, help="seconds of arrivals")
    p.add_argument("--workload", choices=["skewed", "poisson"], default="skewed")
    p.add_argument("--skew", type=float, default=1.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loraserve", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=out_default, help="output directory")

    p = sub.add_parser("simulate", help="run the fleet simulator")
    common(p, "results")
    p.add_argument("--fleet", help="fleet config JSON")
    p.add_argument("--trace", help="trace CSV; generated from the workload flags if omitted")
    p.add_argument("--policy", nargs="+", choices=POLICIES + ["all"], default=None)
    p.add_argument("--kernel", choices=["bgmv", "mbgmv"], default=None)
    p.add_argument("--mode", choices=MODES, default=None)
    p.add_argument("--servers", type=int, default=None)
    p.add_argument("--cache-slots", type=int, default=None)
    p.add_argument("--slo-ms", type=float, default=40.0)
    p.add_argument("--until-ms", type=float, default=None, help="stop the clock early")
    _workload_flags(p, None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("gen-trace", help="write a synthetic trace CSV")
    common(p, "results")
    _workload_flags(p, 10.0)
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("profile-kernels", help="profile the instrumented kernels to CSV")
    common(p, "results")
    p.add_argument("--kernel", nargs="+", choices=["bgmv", "mbgmv"], default=["bgmv", "mbgmv"])
    p.add_argument("--batches", type=int, default=200)
    p.add_argument("--max-batch", type=int, default=16)
    p.set_defaults(func=cmd_profile_kernels)

    p = sub.add_parser("fit-perf", help="fit a linear latency model to a profile CSV")
    common(p, "results")
    p.add_argument("--profile", required=True)
    p.add_argument("--kernel", choices=["bgmv", "mbgmv"], default="bgmv")
    p.set_defaults(func=cmd_fit_perf)

    p = sub.add_parser("demo-split-prefill", help="CPU-worker prefill vs the in-process oracle")
    common(p, "results")
    p.add_argument("--tokens", type=int, default=16)
    p.add_argument("--cap", type=int, default=4, help="tokens per core per layer")
    p.add_argument("--cores", type=int, default=None, help="cap on the number of workers")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--inline", action="store_true", help="run workers in-process (no shared memory)")
    p.add_argument("--launch", choices=["fork", "exec"], default="fork")
    p.add_argument("--fail-worker", type=int, default=None)
    p.add_argument("--fail-at-layer", type=int, default=None)
    p.add_argument("--load-ms", type=float, default=50.0)
    p.add_argument("--cpu-rate", type=float, default=1.0, help="tokens/ms")
    p.add_argument("--gpu-rate", type=float, default=10.0, help="tokens/ms")
    p.add_argument("--decode-ms", type=float, default=5.0)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_demo_split_prefill)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FitError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (WorkerFault, ProtocolError, OSError, RuntimeError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
