"""Print the cost breakdown for routing one rank-64 request to two busy instances.

Instance 1 runs 24 rank-32 requests, instance 2 runs 16 rank-64 requests; the
latency models are fit to their measured decode latencies under each kernel.
"""
import argparse

from loraserve.kernels import AdapterBatch
from loraserve.perf_model import ProfilePoint, fit
from loraserve.scheduler import RouteRequest, SchedulerConfig, ServerSnapshot, calc_cost, schedule

INSTANCES = {1: AdapterBatch((32,) * 24), 2: AdapterBatch((64,) * 16)}
MEASURED = {"bgmv": (34.8, 35.8), "mbgmv": (35.3, 35.9)}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--slo-ms", type=float, default=36.0)
    p.add_argument("--rank", type=int, default=64)
    args = p.parse_args()

    req = RouteRequest(0, "new", args.rank, prompt_len=16)
    snaps = [ServerSnapshot(i, b) for i, b in INSTANCES.items()]
    for kind, lat in MEASURED.items():
        model = fit([ProfilePoint.from_batch(b, l) for b, l in zip(INSTANCES.values(), lat)], kind)
        cfg = SchedulerConfig(decode_model=model, prefill_model=model, slo_ms=args.slo_ms)
        print(f"{kind}: alpha={model.alpha:.8f} beta={model.beta:.4f}")
        for s in snaps:
            after = model.predict(s.running_batch.with_rank(args.rank))
            cost = calc_cost(req, s, cfg)
            print(f"  instance {s.server_id}: decode after admit {after:.3f} ms, "
                  f"cost {cost:.4f}, total {cost * s.num_requests:.2f}")
        print(f"  -> instance {schedule(req, snaps, cfg)}")


if __name__ == "__main__":
    main()
