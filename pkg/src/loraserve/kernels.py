"""CPU reference semantics of the batched multi-rank LoRA kernels.

``bgmv`` pads every request to the largest rank in the batch before the
gathered matmul; ``mbgmv`` runs each request at its own rank. Both return the
same numbers. They differ in ``work_units`` (one multiply-accumulate each),
which follows the kernels' cost laws exactly:

    bgmv:  |S| * max_rank * 2H      mbgmv: sum_rank * 2H

per token. Weights and activations are stored as float32 and accumulated
in float64, so each output is the exact product rounded once.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_math import DTYPE, TARGETS, LoraAdapter
from .errors import AdapterLookupError, ShapeError

ACC = np.float64


class AdapterPool:
    """All registered adapters' (A, B) slabs in one contiguous float32 buffer."""

    def __init__(self, hidden_size: int):
        self.hidden_size = hidden_size
        self._buf = np.zeros(0, dtype=DTYPE)
        self._index = {}  # id -> (offset, rank, targets)

    def __contains__(self, adapter_id):
        return adapter_id in self._index

    def __len__(self):
        return len(self._index)

    def register(self, adapter: LoraAdapter) -> None:
        if adapter.id in self._index:
            raise ValueError(f"adapter {adapter.id!r} already registered")
        if adapter.hidden_size != self.hidden_size:
            raise ShapeError(
                f"adapter hidden size {adapter.hidden_size} != pool hidden size {self.hidden_size}")
        parts = []
        for t in adapter.targets:
            a, b = adapter.weights[t]
            parts += [np.asarray(a, DTYPE).ravel(), np.asarray(b, DTYPE).ravel()]
        self._index[adapter.id] = (self._buf.size, adapter.rank, adapter.targets)
        self._buf = np.concatenate([self._buf, *parts])

    def rank(self, adapter_id) -> int:
        return self._entry(adapter_id)[1]

    def offset(self, adapter_id) -> int:
        return self._entry(adapter_id)[0]

    def gather(self, adapter_id, target="q"):
        """Views (no copy) of the adapter's A (H x r) and B (r x H) for ``target``."""
        off, r, targets = self._entry(adapter_id)
        if target not in targets:
            raise AdapterLookupError(f"adapter {adapter_id!r} has no {target!r} target")
        slab = 2 * self.hidden_size * r
        start = off + targets.index(target) * slab
        h = self.hidden_size
        a = self._buf[start:start + h * r].reshape(h, r)
        b = self._buf[start + h * r:start + slab].reshape(r, h)
        return a, b

    def _entry(self, adapter_id):
        try:
            return self._index[adapter_id]
        except KeyError:
            raise AdapterLookupError(f"adapter {adapter_id!r} is not registered") from None


@dataclass(frozen=True)
class AdapterBatch:
    """Ranks (and, for kernels, adapter ids) of the requests in one batch.

    An empty batch is representable so that schedulers can describe idle
    queues; kernels and ``perf_model.feature`` reject it.
    """

    ranks: tuple = ()
    ids: tuple | None = None

    def __post_init__(self):
        ranks = tuple(int(r) for r in self.ranks)
        object.__setattr__(self, "ranks", ranks)
        if self.ids is not None:
            object.__setattr__(self, "ids", tuple(self.ids))
            if len(self.ids) != len(ranks):
                raise ValueError("ids and ranks differ in length")
        if ranks and min(ranks) < 0:
            raise ValueError("ranks must be >= 0")
        self._set_stats(max(ranks, default=0), sum(ranks), sum(1 for r in ranks if r > 0))

    def _set_stats(self, max_rank, sum_rank, nonzero):
        object.__setattr__(self, "_max", max_rank)
        object.__setattr__(self, "_sum", sum_rank)
        object.__setattr__(self, "_nonzero", nonzero)

    @classmethod
    def _trusted(cls, ranks, ids, max_rank, sum_rank, nonzero):
        # skips validation; callers combine already-validated batches
        b = object.__new__(cls)
        object.__setattr__(b, "ranks", ranks)
        object.__setattr__(b, "ids", ids)
        b._set_stats(max_rank, sum_rank, nonzero)
        return b

    @classmethod
    def from_pool(cls, ids, pool: AdapterPool) -> "AdapterBatch":
        ids = tuple(ids)
        return cls(tuple(pool.rank(i) for i in ids), ids)

    @property
    def size(self) -> int:
        return len(self.ranks)

    def __len__(self):
        return len(self.ranks)

    @property
    def max_rank(self) -> int:
        return self._max

    @property
    def sum_rank(self) -> int:
        return self._sum

    @property
    def nonzero(self) -> int:
        """Requests that carry an adapter (rank > 0)."""
        return self._nonzero

    def __add__(self, other: "AdapterBatch") -> "AdapterBatch":
        ids = None
        if self.ids is not None and other.ids is not None:
            ids = self.ids + other.ids
        return AdapterBatch._trusted(self.ranks + other.ranks, ids, max(self._max, other._max),
                                     self._sum + other._sum, self._nonzero + other._nonzero)

    def with_rank(self, rank: int) -> "AdapterBatch":
        rank = int(rank)
        if rank < 0:
            raise ValueError("ranks must be >= 0")
        return AdapterBatch._trusted(self.ranks + (rank,), None, max(self._max, rank),
                                     self._sum + rank, self._nonzero + (rank > 0))


@dataclass
class KernelOutput:
    outputs: list
    work_units: int


def _check(xs, batch: AdapterBatch, pool: AdapterPool, rows_per_request=None):
    if batch.size < 1:
        raise ShapeError("batch must contain at least one request")
    if batch.ids is None:
        raise ValueError("kernel batches need adapter ids")
    if len(xs) != batch.size:
        raise ShapeError(f"{len(xs)} inputs for a batch of {batch.size}")
    for i, x in enumerate(xs):
        if x.ndim != 2 or x.shape[1] != pool.hidden_size:
            raise ShapeError(f"input {i} must have {pool.hidden_size} cols, got shape {x.shape}")
        if rows_per_request is not None and x.shape[0] != rows_per_request:
            raise ShapeError(f"input {i} must be {rows_per_request}x{pool.hidden_size}")
        if x.shape[0] < 1:
            raise ShapeError(f"input {i} has no tokens")
    for aid in batch.ids:
        pool.rank(aid)


def _as_rows(xs):
    if isinstance(xs, np.ndarray) and xs.ndim == 2:
        return [xs[i:i + 1].astype(DTYPE, copy=False) for i in range(xs.shape[0])]
    return [np.atleast_2d(np.asarray(x, dtype=DTYPE)) for x in xs]


def bgmv(xs, batch: AdapterBatch, pool: AdapterPool, target="q") -> KernelOutput:
    """Padded gather: every request's A/B is zero-padded to ``batch.max_rank``."""
    xs = _as_rows(xs)
    _check(xs, batch, pool, rows_per_request=1)
    h, rmax = pool.hidden_size, batch.max_rank
    n = batch.size
    a_pad = np.zeros((n, h, rmax), dtype=DTYPE)
    b_pad = np.zeros((n, rmax, h), dtype=DTYPE)
    for i, aid in enumerate(batch.ids):
        a, b = pool.gather(aid, target)
        r = a.shape[1]
        a_pad[i, :, :r] = a
        b_pad[i, :r, :] = b
    x = np.stack([row[0] for row in xs]).astype(ACC)          # n x H
    shrink = np.einsum("nh,nhr->nr", x, a_pad.astype(ACC))
    expand = np.einsum("nr,nrh->nh", shrink, b_pad.astype(ACC)).astype(DTYPE)
    return KernelOutput([expand[i:i + 1] for i in range(n)], n * rmax * 2 * h)


def mbgmv(xs, batch: AdapterBatch, pool: AdapterPool, target="q") -> KernelOutput:
    """Padding-free gather: each request runs at its own rank."""
    xs = _as_rows(xs)
    _check(xs, batch, pool, rows_per_request=1)
    outputs = []
    for x, aid in zip(xs, batch.ids):
        a, b = pool.gather(aid, target)
        outputs.append(((x.astype(ACC) @ a) @ b).astype(DTYPE))
    return KernelOutput(outputs, batch.sum_rank * 2 * pool.hidden_size)


def batch_prefill_adapt(xs, batch: AdapterBatch, pool: AdapterPool, target="q",
                        kernel="mbgmv") -> KernelOutput:
    """Multi-token variant: request i contributes ``len(xs[i])`` rows.

    ``kernel`` picks the charging rule (padded to max rank or not).
    """
    xs = [np.asarray(x, dtype=DTYPE) for x in xs]
    _check(xs, batch, pool)
    if kernel not in ("bgmv", "mbgmv"):
        raise ValueError(f"unknown kernel {kernel!r}")
    outputs, work = [], 0
    h = pool.hidden_size
    for x, aid in zip(xs, batch.ids):
        a, b = pool.gather(aid, target)
        outputs.append(((x.astype(ACC) @ a) @ b).astype(DTYPE))
        charged = batch.max_rank if kernel == "bgmv" else a.shape[1]
        work += x.shape[0] * charged * 2 * h
    return KernelOutput(outputs, work)


def pool_from_adapters(adapters) -> AdapterPool:
    adapters = list(adapters)
    pool = AdapterPool(adapters[0].hidden_size)
    for ad in adapters:
        pool.register(ad)
    return pool


__all__ = ["AdapterPool", "AdapterBatch", "KernelOutput", "bgmv", "mbgmv",
           "batch_prefill_adapt", "pool_from_adapters", "TARGETS"]
