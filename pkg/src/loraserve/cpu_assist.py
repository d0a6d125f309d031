"""CPU-assisted prefill: a coordinator runs the base projections while worker
processes compute the adapter term ``x A B`` over shared memory.

Segment layout (little-endian, regions 64-byte aligned)::

    0   u32 magic | u32 layer_index | u32 token_count | u32 hidden
    16  u64 input_seq | u64 output_seq                       (32-byte header)
    64  input  : token_count x hidden float32
    ..  output : n_blocks x token_count x hidden float32     (one block per adapter target)
    ..  acks   : n_workers x u64                             (last sequence each worker finished)

The coordinator is the only writer of the header. Publishing a layer copies
``x`` and then bumps ``input_seq``; that single store is the signal. A worker
handles sequence ``k`` by writing its output rows, storing ``k`` into its ack
slot, and, if every ack has reached ``k``, storing ``k`` into ``output_seq``.
The coordinator also promotes ``output_seq`` itself when it sees all acks, so
a lost race between two finishing workers cannot stall a layer. Correctness
relies on aligned 8-byte stores being single-copy atomic and on stores not
being reordered with earlier stores (true on x86-64).
"""
from __future__ import annotations

import argparse
import enum
import multiprocessing as mp
import os
import struct
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field
from multiprocessing import resource_tracker, shared_memory
from pathlib import Path

import numpy as np

from . import core_math as cm
from .errors import ProtocolError, WorkerFault

MAGIC = 0x4C524131  # "LRA1"
HEADER = struct.Struct("<IIIIQQ")
ALIGN = 64
STOP_LAYER = 0xFFFFFFFF
POLL_S = 20e-6


def _align(n):
    return (n + ALIGN - 1) // ALIGN * ALIGN


@dataclass(frozen=True)
class SegmentLayout:
    token_count: int
    hidden: int
    n_blocks: int = 1
    n_workers: int = 1

    @property
    def input_offset(self):
        return _align(HEADER.size)

    @property
    def matrix_bytes(self):
        return self.token_count * self.hidden * 4

    @property
    def output_offset(self):
        return _align(self.input_offset + self.matrix_bytes)

    @property
    def ack_offset(self):
        return _align(self.output_offset + self.n_blocks * self.matrix_bytes)

    @property
    def total_bytes(self):
        return self.ack_offset + 8 * self.n_workers


class ShmSegment:
    """Typed views over a shared buffer (a SharedMemory block or, inline, a bytearray)."""

    def __init__(self, buf, layout: SegmentLayout, shm=None, owner=False):
        self.layout = layout
        self._shm = shm
        self._owner = owner
        self._buf = buf
        self._u32 = np.ndarray((4,), np.uint32, buf, 0)
        self._seq = np.ndarray((2,), np.uint64, buf, 16)
        lt = layout
        self.input = np.ndarray((lt.token_count, lt.hidden), np.float32, buf, lt.input_offset)
        self.output = np.ndarray((lt.n_blocks, lt.token_count, lt.hidden), np.float32, buf,
                                 lt.output_offset)
        self.acks = np.ndarray((lt.n_workers,), np.uint64, buf, lt.ack_offset)

    @classmethod
    def create(cls, token_count, hidden, n_blocks=1, n_workers=1, inline=False):
        layout = SegmentLayout(token_count, hidden, n_blocks, n_workers)
        if inline:
            seg = cls(bytearray(layout.total_bytes), layout)
        else:
            shm = shared_memory.SharedMemory(create=True, size=layout.total_bytes)
            seg = cls(shm.buf, layout, shm, owner=True)
        seg._buf[:HEADER.size] = HEADER.pack(MAGIC, 0, token_count, hidden, 0, 0)
        return seg

    @classmethod
    def attach(cls, name, n_blocks=1, n_workers=1, untrack=False):
        """Map an existing segment.

        ``untrack`` drops the attach-time resource-tracker registration; a
        freshly exec'd process must do this or its own tracker unlinks the
        segment (and warns) when the process exits.
        """
        shm = shared_memory.SharedMemory(name=name)
        if untrack:
            resource_tracker.unregister(shm._name, "shared_memory")
        magic, _, tokens, hidden, _, _ = HEADER.unpack_from(shm.buf, 0)
        if magic != MAGIC:
            shm.close()
            raise ProtocolError(f"segment {name!r} has bad magic {magic:#x}")
        return cls(shm.buf, SegmentLayout(tokens, hidden, n_blocks, n_workers), shm)

    @property
    def name(self):
        return self._shm.name if self._shm is not None else None

    @property
    def magic(self):
        return int(self._u32[0])

    @property
    def layer_index(self):
        return int(self._u32[1])

    @property
    def input_seq(self):
        return int(self._seq[0])

    @property
    def output_seq(self):
        return int(self._seq[1])

    def header_bytes(self) -> bytes:
        return bytes(self._buf[:HEADER.size])

    def set_output_seq(self, seq):
        self._seq[1] = seq

    def all_acked(self, seq) -> bool:
        return bool((self.acks >= seq).all())

    def close(self):
        # drop numpy views before releasing the mapping
        self._u32 = self._seq = self.input = self.output = self.acks = None
        self._buf = None
        if self._shm is not None:
            self._shm.close()
            if self._owner:
                try:
                    self._shm.unlink()
                except FileNotFoundError:
                    pass
            self._shm = None


def publish_layer_input(seg: ShmSegment, layer: int, x) -> int:
    """Copy ``x`` into the input region, then signal by bumping ``input_seq``.

    Returns the new sequence number. Never waits on workers.
    """
    if seg.output_seq != seg.input_seq:
        raise ProtocolError(
            f"input {seg.input_seq} not yet consumed (output_seq={seg.output_seq})")
    x = np.asarray(x, dtype=np.float32)
    if x.shape != seg.input.shape:
        raise ProtocolError(f"payload shape {x.shape} != segment shape {seg.input.shape}")
    seg._u32[1] = layer
    seg.input[...] = x
    seq = seg.input_seq + 1
    seg._seq[0] = seq
    return seq


def publish_stop(seg: ShmSegment) -> None:
    seg._u32[1] = STOP_LAYER
    seg._seq[0] = seg.input_seq + 1


@dataclass(frozen=True)
class ParallelPlan:
    per_core_capacity: int
    starts: tuple
    lengths: tuple

    @property
    def slices(self) -> tuple:
        """(start, length) per worker."""
        return tuple(zip(self.starts, self.lengths))

    @property
    def num_workers(self):
        return len(self.lengths)

    @property
    def tokens(self):
        return sum(self.lengths)


def plan_parallelization(tokens: int, capacity: int, max_cores: int | None = None) -> ParallelPlan:
    """ceil(tokens / capacity) slices of at most ``capacity`` tokens each.

    With ``max_cores``, the capacity is raised until the plan fits that many cores.
    """
    if tokens < 1 or capacity < 1:
        raise ValueError("tokens and per-core capacity must be >= 1")
    if max_cores is not None:
        if max_cores < 1:
            raise ValueError("max_cores must be >= 1")
        capacity = max(capacity, -(-tokens // max_cores))
    full, rest = divmod(tokens, capacity)
    lengths = (capacity,) * full + ((rest,) if rest else ())
    return ParallelPlan(capacity, tuple(range(0, tokens, capacity)), lengths)


def worker_compute(seg: ShmSegment, start: int, length: int, adapter: cm.LoraAdapter,
                   worker_index: int = 0, last_seq: int | None = None) -> int:
    """Handle the currently published input for rows ``[start, start+length)``.

    Returns the sequence number handled.
    """
    if adapter is None or not adapter.weights:
        raise WorkerFault(f"worker {worker_index}: adapter weights missing")
    seq = seg.input_seq
    if last_seq is not None and seq <= last_seq:
        raise ProtocolError(f"worker {worker_index}: nothing new to handle (seq {seq})")
    x = seg.input[start:start + length]
    for b, t in enumerate(adapter.targets):
        a, bm = adapter.weights[t]
        seg.output[b, start:start + length] = (x @ a) @ bm
    seg.acks[worker_index] = seq
    if seg.all_acked(seq):
        seg.set_output_seq(seq)
    return seq


# -- adapter files -----------------------------------------------------------

def save_adapter(path, adapter: cm.LoraAdapter) -> None:
    arrays = {"rank": np.array(adapter.rank), "id": np.array(str(adapter.id))}
    for t, (a, b) in adapter.weights.items():
        arrays[f"A_{t}"], arrays[f"B_{t}"] = a, b
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_adapter(path) -> cm.LoraAdapter:
    with np.load(path) as z:
        weights = {t: (z[f"A_{t}"].astype(np.float32), z[f"B_{t}"].astype(np.float32))
                   for t in cm.TARGETS if f"A_{t}" in z}
        return cm.LoraAdapter(str(z["id"]), int(z["rank"]), weights)


# -- worker process ------------------------------------------------------------

def worker_argv(segment, start, length, adapter_path, worker_index, n_workers, n_blocks,
                fail_at_layer=None, cpu=None) -> list:
    argv = ["--segment", segment, "--start", str(start), "--len", str(length),
            "--adapter", str(adapter_path), "--worker-index", str(worker_index),
            "--num-workers", str(n_workers), "--num-blocks", str(n_blocks)]
    if fail_at_layer is not None:
        argv += ["--fail-at-layer", str(fail_at_layer)]
    if cpu is not None:
        argv += ["--cpu", str(cpu)]
    return argv


def worker_main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="loraserve-cpu-worker")
    p.add_argument("--segment", required=True)
    p.add_argument("--start", type=int, required=True)
    p.add_argument("--len", type=int, required=True, dest="length")
    p.add_argument("--adapter", required=True)
    p.add_argument("--worker-index", type=int, default=0)
    p.add_argument("--num-workers", type=int, default=1)
    p.add_argument("--num-blocks", type=int, default=1)
    p.add_argument("--fail-at-layer", type=int, default=None)
    p.add_argument("--cpu", type=int, default=None)
    p.add_argument("--forked", action="store_true", help=argparse.SUPPRESS)
    args = p.parse_args(argv)
    if args.cpu is not None and hasattr(os, "sched_setaffinity"):
        try:
            os.sched_setaffinity(0, {args.cpu % os.cpu_count()})
        except OSError:
            pass
    adapter = load_adapter(args.adapter)
    seg = ShmSegment.attach(args.segment, args.num_blocks, args.num_workers, untrack=not args.forked)
    last = 0
    try:
        while True:
            seq = seg.input_seq
            if seq == last:
                time.sleep(POLL_S)
                continue
            layer = seg.layer_index
            if layer == STOP_LAYER:
                return 0
            if args.fail_at_layer is not None and layer == args.fail_at_layer:
                os._exit(17)
            last = worker_compute(seg, args.start, args.length, adapter, args.worker_index, last)
    finally:
        seg.close()


def _fork_entry(argv):
    # a forked child shares the coordinator's resource tracker
    code = worker_main([*argv, "--forked"])
    sys.exit(code)


# -- coordinator -----------------------------------------------------------------

@dataclass
class SplitPrefillResult:
    output: np.ndarray
    cache: cm.KvCache
    degraded: bool = False
    worker_layers: int = 0
    num_workers: int = 0
    fault: str | None = None


class _InlineWorker:
    def __init__(self, start, length, adapter, index, fail_at_layer=None):
        self.start, self.length, self.adapter, self.index = start, length, adapter, index
        self.fail_at_layer = fail_at_layer

    def run(self, seg):
        if self.fail_at_layer is not None and seg.layer_index == self.fail_at_layer:
            raise WorkerFault(f"inline worker {self.index} failed at layer {seg.layer_index}")
        worker_compute(seg, self.start, self.length, self.adapter, self.index)


@dataclass
class WorkerGroup:
    """Launches and tears down the CPU workers for one prefill."""

    seg: ShmSegment
    plan: ParallelPlan
    adapter: cm.LoraAdapter
    launch: str = "fork"            # "fork", "exec" or "inline"
    fail_worker: int | None = None
    fail_at_layer: int | None = None
    procs: list = field(default_factory=list)
    inline: list = field(default_factory=list)
    _tmp: object = None

    def start(self):
        n = self.plan.num_workers
        fail = lambda i: self.fail_at_layer if i == self.fail_worker else None
        if self.launch == "inline":
            self.inline = [_InlineWorker(s, ln, self.adapter, i, fail(i))
                           for i, (s, ln) in enumerate(self.plan.slices)]
            return
        self._tmp = tempfile.TemporaryDirectory(prefix="loraserve-")
        path = Path(self._tmp.name) / "adapter.npz"
        save_adapter(path, self.adapter)
        n_blocks = len(self.adapter.targets)
        ctx = mp.get_context("fork") if self.launch == "fork" else None
        for i, (s, ln) in enumerate(self.plan.slices):
            argv = worker_argv(self.seg.name, s, ln, path, i, n, n_blocks, fail(i), cpu=i)
            if ctx is not None:
                proc = ctx.Process(target=_fork_entry, args=(argv,), daemon=True)
                proc.start()
            else:
                proc = subprocess.Popen([sys.executable, "-m", "loraserve.cpu_assist", *argv])
            self.procs.append(proc)

    def dead_worker(self):
        for i, p in enumerate(self.procs):
            code = p.exitcode if hasattr(p, "exitcode") else p.poll()
            if code is not None:
                return i, code
        return None

    def wait_layer(self, seq, timeout):
        """Block until every worker finished ``seq``; raise WorkerFault otherwise."""
        seg = self.seg
        if self.inline:
            for w in self.inline:
                w.run(seg)
        deadline = time.monotonic() + timeout
        while seg.output_seq < seq:
            if seg.all_acked(seq):
                seg.set_output_seq(seq)
                break
            dead = self.dead_worker()
            if dead is not None:
                raise WorkerFault(f"worker {dead[0]} exited with code {dead[1]}")
            if time.monotonic() > deadline:
                raise WorkerFault(f"timed out waiting for sequence {seq}")
            time.sleep(POLL_S)

    def stop(self):
        if self.procs:
            self.seg.set_output_seq(self.seg.input_seq)
            publish_stop(self.seg)
            for p in self.procs:
                if hasattr(p, "join"):
                    p.join(timeout=5)
                    if p.exitcode is None:
                        p.kill()
                        p.join()
                else:
                    try:
                        p.wait(timeout=5)
                    except subprocess.TimeoutExpired:
                        p.kill()
                        p.wait()
        if self._tmp is not None:
            self._tmp.cleanup()


def split_prefill(prompt, layers, adapter: cm.LoraAdapter, plan: ParallelPlan, *,
                  launch="fork", head_count=1, fail_worker=None, fail_at_layer=None,
                  timeout=10.0) -> SplitPrefillResult:
    """Prefill ``prompt`` through ``layers`` with the adapter term computed by CPU workers.

    On a worker fault the remaining layers' adaptation is computed in-process
    and the result is flagged ``degraded``.
    """
    x = cm.as_matrix(prompt, "prompt")
    if plan.tokens != x.shape[0]:
        raise ValueError(f"plan covers {plan.tokens} tokens, prompt has {x.shape[0]}")
    targets = adapter.targets
    seg = ShmSegment.create(x.shape[0], x.shape[1], max(1, len(targets)), plan.num_workers,
                            inline=(launch == "inline"))
    group = WorkerGroup(seg, plan, adapter, launch, fail_worker, fail_at_layer)
    result = SplitPrefillResult(x, None, num_workers=plan.num_workers)
    caches = []
    try:
        group.start()
        for i, w in enumerate(layers):
            seq = None
            if not result.degraded and targets:
                seq = publish_layer_input(seg, i, x)
            base = {t: x @ w.projection(t) for t in cm.TARGETS}
            deltas = {}
            if seq is not None:
                try:
                    group.wait_layer(seq, timeout)
                    deltas = {t: seg.output[b].copy() for b, t in enumerate(targets)}
                    result.worker_layers += 1
                except WorkerFault as e:
                    result.degraded, result.fault = True, str(e)
            if not deltas:
                for t in targets:
                    a, b = adapter.weights[t]
                    deltas[t] = (x @ a) @ b
            proj = {t: base[t] + deltas[t] if t in deltas else base[t] for t in cm.TARGETS}
            x, c = cm.finish_prefill_layer(x, proj["q"], proj["k"], proj["v"], w, i, head_count)
            caches.append(c)
    finally:
        group.stop()
        seg.close()
    result.output = x
    result.cache = cm.KvCache(tuple(caches))
    return result


# -- cold-start overlap accounting ------------------------------------------------

class ServingMode(str, enum.Enum):
    CACHED = "cached"
    ON_DEMAND = "ondmd"
    CPU_ASSISTED = "cpu-assisted"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        v = str(value).lower()
        return cls.CPU_ASSISTED if v in ("caraserve", "cpu-assist") else cls(v)


@dataclass(frozen=True)
class OverlapTiming:
    load_latency: float         # ms
    cpu_prefill_rate: float     # tokens / ms
    gpu_prefill_rate: float     # tokens / ms
    decode_step_time: float     # ms

    def __post_init__(self):
        if self.load_latency < 0:
            raise ValueError("load_latency must be >= 0")
        if self.cpu_prefill_rate <= 0 or self.gpu_prefill_rate <= 0:
            raise ValueError("prefill rates must be > 0")


def overlapped_prefill_end(tokens, load_latency, cpu_rate, gpu_rate) -> float:
    """Time the prefill finishes when the CPU works on it during the adapter load.

    Decoding can only start once the load is done, so a CPU that finishes
    early still waits for ``load_latency``.
    """
    done = min(tokens, cpu_rate * load_latency)
    if done >= tokens:
        return max(load_latency, tokens / cpu_rate)
    # load + (tokens - done) / gpu, arranged so rounding can never put the
    # result below tokens / gpu or above load + tokens / gpu when cpu <= gpu
    return tokens / gpu_rate + load_latency * (1.0 - cpu_rate / gpu_rate)


def overlap_ttft(tokens: int, t: OverlapTiming, mode) -> float:
    if tokens < 1:
        raise ValueError("tokens must be >= 1")
    mode = ServingMode.parse(mode)
    gpu = tokens / t.gpu_prefill_rate
    if mode is ServingMode.CACHED:
        return gpu + t.decode_step_time
    if mode is ServingMode.ON_DEMAND:
        return t.load_latency + gpu + t.decode_step_time
    end = overlapped_prefill_end(tokens, t.load_latency, t.cpu_prefill_rate, t.gpu_prefill_rate)
    return end + t.decode_step_time


def load_latency_ms(byte_size: int, bandwidth_gbps: float = 8.0, setup_ms: float = 0.0) -> float:
    """Host-to-device copy time for ``byte_size`` bytes at ``bandwidth_gbps`` GB/s."""
    return setup_ms + byte_size / (bandwidth_gbps * 1e9) * 1e3


if __name__ == "__main__":
    sys.exit(worker_main())
