"""Rank-aware request routing and the baseline placement policies."""
from __future__ import annotations

import csv
import enum
import json
import random
from dataclasses import dataclass, field

from .errors import RoutingError
from .kernels import AdapterBatch
from .perf_model import PerfModel


class Policy(str, enum.Enum):
    RANK_AWARE = "rank-aware"
    MOST_IDLE = "most-idle"
    FIRST_FIT = "first-fit"
    RANDOM = "random"


@dataclass(frozen=True)
class ServerSnapshot:
    server_id: int
    running_batch: AdapterBatch = AdapterBatch()
    queue: AdapterBatch = AdapterBatch()
    hosted_adapter_ids: frozenset | None = None  # None: hosts every adapter
    free_memory_tokens: int = 1 << 30

    def hosts(self, adapter_id) -> bool:
        return self.hosted_adapter_ids is None or adapter_id in self.hosted_adapter_ids

    @property
    def num_requests(self) -> int:
        return self.running_batch.size + self.queue.size

    def to_dict(self) -> dict:
        def members(b):
            ids = b.ids or (None,) * b.size
            return [{"adapter_id": i, "rank": r} for i, r in zip(ids, b.ranks)]
        d = {"server_id": self.server_id, "running": members(self.running_batch),
             "queued": members(self.queue), "free_memory_tokens": self.free_memory_tokens}
        if self.hosted_adapter_ids is not None:
            d["hosted_adapter_ids"] = sorted(self.hosted_adapter_ids)
        return d

    @classmethod
    def from_dict(cls, d) -> "ServerSnapshot":
        def batch(items):
            return AdapterBatch(tuple(m["rank"] for m in items), tuple(m.get("adapter_id") for m in items))
        hosted = d.get("hosted_adapter_ids")
        return cls(int(d["server_id"]), batch(d.get("running", [])), batch(d.get("queued", [])),
                   None if hosted is None else frozenset(hosted), int(d["free_memory_tokens"]))


def snapshots_to_json(snaps) -> str:
    return json.dumps([s.to_dict() for s in snaps], indent=2)


def snapshots_from_json(text) -> list:
    return [ServerSnapshot.from_dict(d) for d in json.loads(text)]


@dataclass
class SchedulerConfig:
    decode_model: PerfModel
    prefill_model: PerfModel
    slo_ms: float
    avg_resp_len: int = 256
    penalty_score: float = 1000.0
    policy: Policy = Policy.RANK_AWARE

    def __post_init__(self):
        self.policy = Policy(self.policy)
        if self.slo_ms <= 0 or self.avg_resp_len < 1 or self.penalty_score <= 0:
            raise ValueError("need slo_ms > 0, avg_resp_len >= 1, penalty_score > 0")


@dataclass(frozen=True)
class RouteRequest:
    """Minimal view of a request; simulator requests satisfy the same attributes."""
    id: int
    adapter_id: object
    rank: int
    prompt_len: int = 1


def calc_cost(req, snap: ServerSnapshot, config: SchedulerConfig) -> float:
    """Marginal per-token latency the request adds to ``snap``'s server, in ms."""
    if not snap.hosts(req.adapter_id):
        raise RoutingError(f"server {snap.server_id} does not host adapter {req.adapter_id!r}")
    pre, dec = config.prefill_model, config.decode_model
    exists = snap.running_batch + snap.queue
    d_prefill = pre.predict(snap.queue.with_rank(req.rank)) - pre.predict(snap.queue)
    dec_after = dec.predict(exists.with_rank(req.rank))
    d_decode = dec_after - dec.predict(exists)
    cost = d_prefill / config.avg_resp_len + d_decode
    if dec_after > config.slo_ms:
        cost += config.penalty_score
    return cost


def candidates(req, snaps) -> list:
    return [s for s in snaps if s.hosts(req.adapter_id) and s.free_memory_tokens >= req.prompt_len]


@dataclass
class Decision:
    request_id: object
    server_id: int
    cost_score: float
    policy: str


@dataclass
class Scheduler:
    """Serializes routing decisions; holds the RNG for the random policy and a decision log."""

    config: SchedulerConfig
    seed: int = 0
    log: list = field(default_factory=list)

    def __post_init__(self):
        self._rng = random.Random(self.seed)

    def schedule(self, req, snaps) -> int:
        cands = candidates(req, snaps)
        if not cands:
            raise RoutingError(f"no server can take request {req.id}")
        policy = self.config.policy
        if policy is Policy.RANK_AWARE:
            scored = [(calc_cost(req, s, self.config) * s.num_requests, s.server_id, s) for s in cands]
            score, _, best = min(scored, key=lambda t: (t[0], t[1]))
        elif policy is Policy.MOST_IDLE:
            best = min(cands, key=lambda s: (s.num_requests, s.server_id))
            score = float(best.num_requests)
        elif policy is Policy.FIRST_FIT:
            best = min(cands, key=lambda s: s.server_id)
            score = 0.0
        else:
            best = self._rng.choice(sorted(cands, key=lambda s: s.server_id))
            score = 0.0
        self.log.append(Decision(req.id, best.server_id, score, policy.value))
        return best.server_id

    def write_log(self, path) -> None:
        write_decision_log(path, self.log)


def schedule(req, snaps, config: SchedulerConfig, seed=0) -> int:
    return Scheduler(config, seed).schedule(req, snaps)


def write_decision_log(path, decisions) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["request_id", "server_id", "cost_score", "policy"])
        for d in decisions:
            w.writerow([d.request_id, d.server_id, f"{d.cost_score:.6f}", d.policy])


@dataclass
class AdapterInfo:
    rank: int
    byte_size: int
    hosts: set = field(default_factory=set)


class AdapterRegistry(dict):
    """adapter id -> AdapterInfo."""

    def add(self, adapter_id, rank, byte_size, hosts=()):
        self[adapter_id] = AdapterInfo(rank, byte_size, set(hosts))
        return self[adapter_id]

    def hosted_on(self, server_id) -> frozenset:
        return frozenset(a for a, info in self.items() if server_id in info.hosts)

    def save(self, path) -> None:
        data = {str(k): {"rank": v.rank, "byte_size": v.byte_size, "hosts": sorted(v.hosts)}
                for k, v in self.items()}
        with open(path, "w") as fh:
            json.dump(data, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "AdapterRegistry":
        reg = cls()
        with open(path) as fh:
            for k, v in json.load(fh).items():
                reg.add(k, v["rank"], v["byte_size"], v["hosts"])
        return reg
