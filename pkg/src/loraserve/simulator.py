"""Discrete-event simulation of a LoRA serving fleet under continuous batching.

Each server alternates prefill and decode iterations. Whenever requests are
waiting, the next iteration is a prefill over (up to ``max_prefill_batch``
of) them, which delays every in-flight decode; otherwise one decode step
advances the whole running batch by a token and finished requests leave
immediately. Adapter loads on prefill follow the serving mode:

* cached        -- every adapter is resident, no load
* ondmd         -- misses in the LRU adapter cache are loaded before prefill
* cpu-assisted  -- the load overlaps with CPU-side prefill of the adapter term

Time is kept in integer microsecond ticks; simultaneous events fire in
insertion order.
"""
from __future__ import annotations

import csv
import heapq
import itertools
import json
from collections import OrderedDict, deque
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .cpu_assist import ServingMode, load_latency_ms, overlapped_prefill_end
from .errors import RoutingError
from .kernels import AdapterBatch
from .perf_model import PerfModel
from .scheduler import Policy, Scheduler, SchedulerConfig, ServerSnapshot

US_PER_MS = 1000


def to_ticks(ms: float) -> int:
    return int(round(ms * US_PER_MS))


# -- requests and workloads ----------------------------------------------------------

@dataclass
class Request:
    id: int
    adapter_id: int
    rank: int
    prompt_len: int
    output_len: int
    arrival_us: int
    sched_us: int | None = None
    prefill_start_us: int | None = None
    first_token_us: int | None = None
    done_us: int | None = None
    server: int | None = None
    tokens_out: int = 0
    cold_ms: float = 0.0
    retries: int = 0
    dropped: bool = False

    @property
    def arrival(self) -> float:
        return self.arrival_us / US_PER_MS

    @property
    def ttft(self) -> float | None:
        if self.first_token_us is None:
            return None
        return (self.first_token_us - self.arrival_us) / US_PER_MS

    @property
    def latency(self) -> float | None:
        if self.done_us is None:
            return None
        return (self.done_us - self.arrival_us) / US_PER_MS

    @property
    def time_per_token(self) -> float | None:
        if self.done_us is None:
            return None
        if self.output_len <= 1:
            return 0.0
        return (self.done_us - self.first_token_us) / US_PER_MS / (self.output_len - 1)

    @property
    def kv_tokens(self) -> int:
        return self.prompt_len + self.output_len


@dataclass(frozen=True)
class LengthDist:
    """Exponential lengths with the given mean, rounded and clipped to [low, high]."""
    mean: float
    low: int
    high: int

    def sample(self, rng, n) -> np.ndarray:
        return np.clip(np.rint(rng.exponential(self.mean, n)), self.low, self.high).astype(int)


@dataclass(frozen=True)
class WorkloadSpec:
    kind: str = "skewed"                 # "poisson" (uniform adapters) or "skewed"
    aggregate_rps: float = 10.0
    num_adapters: int = 100
    ranks: tuple = (8, 16, 32, 64)
    rank_weights: tuple | None = None
    skew: float = 1.0                    # popularity ~ 1 / (i + 1) ** skew
    prompt_len: LengthDist = LengthDist(64, 4, 512)
    output_len: LengthDist = LengthDist(64, 2, 512)
    seed: int = 0
    duration_s: float = 60.0

    def __post_init__(self):
        if self.kind not in ("poisson", "skewed"):
            raise ValueError(f"unknown workload kind {self.kind!r}")
        if self.aggregate_rps <= 0 or self.duration_s <= 0 or self.num_adapters < 1:
            raise ValueError("need rps > 0, duration > 0 and at least one adapter")

    def popularity(self) -> np.ndarray:
        if self.kind == "poisson" or self.skew == 0:
            return np.full(self.num_adapters, 1.0 / self.num_adapters)
        w = 1.0 / np.arange(1, self.num_adapters + 1) ** self.skew
        return w / w.sum()

    def adapter_ranks(self) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 1])
        p = None
        if self.rank_weights is not None:
            p = np.asarray(self.rank_weights, float) / sum(self.rank_weights)
        return rng.choice(np.asarray(self.ranks), self.num_adapters, p=p)


def generate_workload(spec: WorkloadSpec) -> list:
    """Seeded Poisson arrivals; adapters drawn from the popularity law."""
    rng = np.random.default_rng(spec.seed)
    horizon = spec.duration_s * 1000.0
    mean_gap = 1000.0 / spec.aggregate_rps
    expected = int(horizon / mean_gap * 1.2) + 16
    arrivals = np.cumsum(rng.exponential(mean_gap, expected))
    while arrivals[-1] < horizon:
        arrivals = np.concatenate([arrivals, arrivals[-1] + np.cumsum(rng.exponential(mean_gap, expected))])
    arrivals = arrivals[arrivals < horizon]
    n = len(arrivals)
    adapters = rng.choice(spec.num_adapters, n, p=spec.popularity())
    prompts = spec.prompt_len.sample(rng, n)
    outputs = spec.output_len.sample(rng, n)
    ranks = spec.adapter_ranks()
    return [Request(i, int(adapters[i]), int(ranks[adapters[i]]), int(prompts[i]), int(outputs[i]),
                    to_ticks(arrivals[i])) for i in range(n)]


TRACE_HEADER = ["arrival_ms", "adapter_id", "rank", "prompt_len", "output_len"]


def write_trace(path, requests) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for r in requests:
            w.writerow([f"{r.arrival_us / US_PER_MS:.3f}", r.adapter_id, r.rank, r.prompt_len, r.output_len])


def read_trace(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != TRACE_HEADER:
            raise ValueError(f"trace header must be {','.join(TRACE_HEADER)}")
        rows = [Request(i, int(row["adapter_id"]), int(row["rank"]), int(row["prompt_len"]),
                        int(row["output_len"]), to_ticks(float(row["arrival_ms"])))
                for i, row in enumerate(reader)]
    rows.sort(key=lambda r: (r.arrival_us, r.id))
    return rows


# -- fleet configuration -----------------------------------------------------------

DEFAULT_DECODE = {"bgmv": PerfModel("bgmv", 1 / 256, 31.8), "mbgmv": PerfModel("mbgmv", 0.6 / 256, 33.5)}


@dataclass
class FleetConfig:
    servers: int = 1
    mode: ServingMode = ServingMode.CACHED
    kernel: str = "bgmv"
    cache_slots: int = 8
    prefill_base_ms: float = 0.0          # p0
    prefill_ms_per_token: float = 0.1     # p1
    decode_base_ms: float = 0.0           # d0
    decode_ms_per_request: float = 0.02   # d1
    decode_model: PerfModel | None = None
    prefill_model: PerfModel | None = None
    load_bandwidth_gbps: float = 8.0
    load_setup_ms: float = 1.0
    cpu_prefill_rate: float = 4.0         # tokens / ms across the planned CPU cores
    model_hidden: int = 4096
    model_layers: int = 32
    bytes_per_param: int = 2
    kv_capacity_tokens: int = 20000
    max_prefill_batch: int | None = None
    retry_ms: float = 50.0
    max_retries: int = 200

    def __post_init__(self):
        self.mode = ServingMode.parse(self.mode)
        self.kernel = self.kernel.lower()
        if self.servers < 1:
            raise ValueError("fleet needs at least one server")
        if self.cache_slots < 1:
            raise ValueError("cache_slots must be >= 1")
        if self.decode_model is None:
            self.decode_model = DEFAULT_DECODE[self.kernel]
        if self.prefill_model is None:
            self.prefill_model = PerfModel(self.kernel, self.decode_model.alpha, 0.0)

    def adapter_bytes(self, rank: int) -> int:
        return self.model_layers * 3 * 2 * self.model_hidden * rank * self.bytes_per_param

    def load_ms(self, rank: int) -> float:
        return load_latency_ms(self.adapter_bytes(rank), self.load_bandwidth_gbps, self.load_setup_ms)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        d["decode_model"] = asdict(self.decode_model)
        d["prefill_model"] = asdict(self.prefill_model)
        return d

    @classmethod
    def from_dict(cls, d, base_dir=None) -> "FleetConfig":
        d = dict(d)
        base = d.pop("base_terms", None) or {}
        for k_src, k_dst in (("p0", "prefill_base_ms"), ("p1", "prefill_ms_per_token"),
                             ("d0", "decode_base_ms"), ("d1", "decode_ms_per_request")):
            if k_src in base:
                d[k_dst] = base[k_src]
        for key in ("decode_model", "prefill_model"):
            if isinstance(d.get(key), dict):
                d[key] = PerfModel(**d[key])
        for key, dst in (("perf_model_file", "decode_model"), ("prefill_model_file", "prefill_model")):
            path = d.pop(key, None)
            if path:
                p = Path(path)
                if base_dir is not None and not p.is_absolute():
                    p = Path(base_dir) / p
                d[dst] = PerfModel.load(p)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown fleet config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "FleetConfig":
        p = Path(path)
        return cls.from_dict(json.loads(p.read_text()), base_dir=p.parent)


# -- servers -------------------------------------------------------------------------

@dataclass(order=True)
class SimEvent:
    time_us: int
    seq: int
    kind: str = field(compare=False)          # "arrival", "retry" or "iteration_done"
    server: int | None = field(default=None, compare=False)
    payload: object = field(default=None, compare=False)


@dataclass
class Iteration:
    phase: str                 # "prefill" or "decode"
    requests: list
    start_us: int
    duration_us: int
    cold_ms: float = 0.0
    loaded: tuple = ()


class SimServer:
    def __init__(self, server_id: int, fleet: FleetConfig):
        self.id = server_id
        self.fleet = fleet
        self.queue = deque()
        self.running = []
        self.resident = OrderedDict()          # adapter id -> None, LRU order
        self.current: Iteration | None = None
        self.reserved_tokens = 0
        self.iterations = {"prefill": 0, "decode": 0}
        self.loads = 0
        self._snap = None                      # cleared whenever queue/running change

    @property
    def busy(self) -> bool:
        return self.current is not None

    @property
    def has_work(self) -> bool:
        return bool(self.queue or self.running)

    @property
    def free_memory_tokens(self) -> int:
        return self.fleet.kv_capacity_tokens - self.reserved_tokens

    def admit(self, req: Request, now_us: int) -> None:
        req.server, req.sched_us = self.id, now_us
        self.queue.append(req)
        self.reserved_tokens += req.kv_tokens
        self._snap = None

    def snapshot(self) -> ServerSnapshot:
        if self._snap is None:
            self._snap = self._build_snapshot()
        return self._snap

    def _build_snapshot(self) -> ServerSnapshot:
        waiting = list(self.queue)
        if self.current is not None and self.current.phase == "prefill":
            waiting = self.current.requests + waiting
        return ServerSnapshot(self.id, AdapterBatch(tuple(r.rank for r in self.running)),
                              AdapterBatch(tuple(r.rank for r in waiting)),
                              None, self.free_memory_tokens)

    def _touch_adapters(self, adapter_ids):
        """Update LRU residency; return the adapters that had to be loaded."""
        missing = []
        for aid in adapter_ids:
            if aid in self.resident:
                self.resident.move_to_end(aid)
            else:
                missing.append(aid)
                self.resident[aid] = None
                while len(self.resident) > self.fleet.cache_slots:
                    self.resident.popitem(last=False)
        return missing

    def prefill_duration(self, batch: list):
        """(iteration ms, exposed cold-start ms, loaded adapter ids) for a prefill batch."""
        f = self.fleet
        tokens = sum(r.prompt_len for r in batch)
        gpu_ms = (f.prefill_base_ms + f.prefill_ms_per_token * tokens
                  + f.prefill_model.predict(AdapterBatch(tuple(r.rank for r in batch))))
        if f.mode is ServingMode.CACHED:
            return gpu_ms, 0.0, ()
        ranks = {}
        for r in batch:
            ranks.setdefault(r.adapter_id, r.rank)
        missing = self._touch_adapters(ranks)
        load = sum(f.load_ms(ranks[a]) for a in missing)
        if load == 0.0:
            return gpu_ms, 0.0, tuple(missing)
        if f.mode is ServingMode.ON_DEMAND:
            return load + gpu_ms, load, tuple(missing)
        gpu_rate = tokens / gpu_ms
        end = overlapped_prefill_end(tokens, load, min(f.cpu_prefill_rate, gpu_rate), gpu_rate)
        return end, max(0.0, end - gpu_ms), tuple(missing)

    def decode_duration(self) -> float:
        f = self.fleet
        return (f.decode_base_ms + f.decode_ms_per_request * len(self.running)
                + f.decode_model.predict(AdapterBatch(tuple(r.rank for r in self.running))))

    def step(self, now_us: int, seq) -> list:
        """Start the next iteration if idle; return the completion event to schedule."""
        if self.current is not None or not self.has_work:
            return []
        self._snap = None
        if self.queue:
            limit = self.fleet.max_prefill_batch or len(self.queue)
            batch = [self.queue.popleft() for _ in range(min(limit, len(self.queue)))]
            for r in batch:
                r.prefill_start_us = now_us
            ms, cold, loaded = self.prefill_duration(batch)
            self.loads += len(loaded)
            it = Iteration("prefill", batch, now_us, max(1, to_ticks(ms)), cold, loaded)
            if cold > 0:
                for r in itertools.chain(self.running, self.queue, batch):
                    r.cold_ms += cold
        else:
            it = Iteration("decode", list(self.running), now_us, max(1, to_ticks(self.decode_duration())))
        self.iterations[it.phase] += 1
        self.current = it
        return [SimEvent(now_us + it.duration_us, next(seq), "iteration_done", self.id, it)]

    def complete(self, now_us: int) -> list:
        """Finish the current iteration; return requests that completed."""
        it, self.current = self.current, None
        self._snap = None
        finished = []
        if it.phase == "prefill":
            for r in it.requests:
                r.first_token_us = now_us
                r.tokens_out = 1
                if r.tokens_out >= r.output_len:
                    r.done_us = now_us
                    finished.append(r)
                else:
                    self.running.append(r)
        else:
            still = []
            for r in self.running:
                r.tokens_out += 1
                if r.tokens_out >= r.output_len:
                    r.done_us = now_us
                    finished.append(r)
                else:
                    still.append(r)
            self.running = still
        for r in finished:
            self.reserved_tokens -= r.kv_tokens
        return finished


def step_server(server: SimServer, now_us: int, seq=None) -> list:
    return server.step(now_us, seq if seq is not None else itertools.count())


# -- metrics -------------------------------------------------------------------------

@dataclass
class SimMetrics:
    slo_ms: float
    generated: int
    completed: int
    in_flight: int
    queued: int
    dropped: int
    slo_attainment: float
    mean_ttft_ms: float
    mean_tpt_ms: float
    p99_tpt_ms: float
    mean_latency_ms: float
    cold_start_share: float
    prefill_iterations: int
    decode_iterations: int
    adapter_loads: int
    requests: list = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("requests")
        return d

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)

    def write(self, json_path, csv_path) -> None:
        Path(json_path).write_text(self.to_json() + "\n")
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "ttft_ms", "tpt_ms", "latency_ms", "slo_met"])
            for r in self.requests:
                fmt = lambda v: "" if v is None else f"{v:.3f}"
                w.writerow([r.id, fmt(r.ttft), fmt(r.time_per_token), fmt(r.latency),
                            int(_slo_met(r, self.slo_ms))])


def _slo_met(r: Request, slo_ms: float) -> bool:
    tpt = r.time_per_token
    return tpt is not None and not r.dropped and tpt <= slo_ms


def _mean(xs):
    return float(np.mean(xs)) if len(xs) else 0.0


def summarize(requests, servers, slo_ms) -> SimMetrics:
    done = [r for r in requests if r.done_us is not None]
    dropped = sum(r.dropped for r in requests)
    in_flight = sum(1 for r in requests if r.done_us is None and r.first_token_us is not None)
    queued = len(requests) - len(done) - dropped - in_flight
    tpts = [r.time_per_token for r in done]
    shares = [min(1.0, r.cold_ms / r.latency) for r in done if r.latency > 0]
    return SimMetrics(
        slo_ms=slo_ms,
        generated=len(requests), completed=len(done), in_flight=in_flight, queued=queued,
        dropped=dropped,
        slo_attainment=sum(_slo_met(r, slo_ms) for r in requests) / len(requests) if requests else 1.0,
        mean_ttft_ms=_mean([r.ttft for r in done]),
        mean_tpt_ms=_mean(tpts),
        p99_tpt_ms=float(np.percentile(tpts, 99)) if tpts else 0.0,
        mean_latency_ms=_mean([r.latency for r in done]),
        cold_start_share=_mean(shares),
        prefill_iterations=sum(s.iterations["prefill"] for s in servers),
        decode_iterations=sum(s.iterations["decode"] for s in servers),
        adapter_loads=sum(s.loads for s in servers),
        requests=list(requests),
    )


# -- event loop -----------------------------------------------------------------------

class Simulation:
    def __init__(self, fleet: FleetConfig, requests, sched: SchedulerConfig, seed: int = 0):
        self.fleet = fleet
        self.requests = [replace(r) for r in requests]
        self.sched_cfg = sched
        self.scheduler = Scheduler(sched, seed)
        self.servers = [SimServer(i, fleet) for i in range(fleet.servers)]
        self.now_us = 0
        self._seq = itertools.count()
        self._events = []
        for r in self.requests:
            self._push(SimEvent(r.arrival_us, next(self._seq), "arrival", None, r))

    def _push(self, ev):
        heapq.heappush(self._events, ev)

    def _route(self, req: Request):
        snaps = [s.snapshot() for s in self.servers]
        try:
            sid = self.scheduler.schedule(req, snaps)
        except RoutingError:
            req.retries += 1
            if req.retries > self.fleet.max_retries:
                req.dropped = True
            else:
                self._push(SimEvent(self.now_us + to_ticks(self.fleet.retry_ms), next(self._seq),
                                    "retry", None, req))
            return
        server = self.servers[sid]
        server.admit(req, self.now_us)
        for ev in server.step(self.now_us, self._seq):
            self._push(ev)

    def run(self, until_ms: float | None = None) -> SimMetrics:
        horizon = None if until_ms is None else to_ticks(until_ms)
        while self._events:
            if horizon is not None and self._events[0].time_us > horizon:
                break
            ev = heapq.heappop(self._events)
            self.now_us = ev.time_us
            if ev.kind in ("arrival", "retry"):
                self._route(ev.payload)
            else:
                server = self.servers[ev.server]
                server.complete(self.now_us)
                for nxt in server.step(self.now_us, self._seq):
                    self._push(nxt)
        return summarize(self.requests, self.servers, self.sched_cfg.slo_ms)


def default_scheduler_config(fleet: FleetConfig, slo_ms: float, policy=Policy.RANK_AWARE,
                             **kw) -> SchedulerConfig:
    return SchedulerConfig(decode_model=fleet.decode_model, prefill_model=fleet.prefill_model,
                           slo_ms=slo_ms, policy=policy, **kw)


def run_simulation(fleet: FleetConfig, workload, sched: SchedulerConfig, seed: int = 0,
                   until_ms: float | None = None) -> SimMetrics:
    """``workload`` is a WorkloadSpec or an explicit list of Requests."""
    requests = generate_workload(workload) if isinstance(workload, WorkloadSpec) else workload
    return Simulation(fleet, requests, sched, seed).run(until_ms)
