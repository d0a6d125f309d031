"""Linear latency models for heterogeneous-rank batches.

    BGMV:  latency = alpha * |S| * max_rank + beta
    MBGMV: latency = alpha * sum_rank       + beta

Profiles come either from the instrumented kernels (work units scaled by a
ms-per-unit constant) or from a CSV of real measurements.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import core_math as cm
from .errors import FitError, ShapeError
from .kernels import AdapterBatch, bgmv, mbgmv, pool_from_adapters

KINDS = ("bgmv", "mbgmv")
CSV_HEADER = ["kernel", "batch_size", "max_rank", "sum_rank", "latency_ms"]


def _check_kind(kind):
    kind = kind.lower()
    if kind not in KINDS:
        raise ValueError(f"unknown kernel kind {kind!r}; expected one of {KINDS}")
    return kind


@dataclass(frozen=True)
class ProfilePoint:
    batch_size: int
    max_rank: int
    sum_rank: int
    latency_ms: float

    def __post_init__(self):
        if not self.latency_ms > 0:
            raise ValueError("latency_ms must be > 0")
        if not self.max_rank <= self.sum_rank <= self.batch_size * self.max_rank:
            raise ValueError(f"inconsistent rank stats: {self}")

    @classmethod
    def from_batch(cls, batch: AdapterBatch, latency_ms: float) -> "ProfilePoint":
        return cls(batch.size, batch.max_rank, batch.sum_rank, latency_ms)

    def feature(self, kind) -> int:
        return self.batch_size * self.max_rank if _check_kind(kind) == "bgmv" else self.sum_rank


def _feature(kind, batch: AdapterBatch) -> int:
    # rank-0 (base-model-only) requests are not charged by either kernel
    if kind == "bgmv":
        return batch.nonzero * batch.max_rank
    return batch.sum_rank


def feature(kind, batch: AdapterBatch) -> int:
    if batch.size < 1:
        raise ShapeError("feature of an empty batch")
    return _feature(_check_kind(kind), batch)


@dataclass(frozen=True)
class PerfModel:
    kind: str
    alpha: float
    beta: float
    r_squared: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", _check_kind(self.kind))
        if not 0.0 <= self.r_squared <= 1.0:
            raise ValueError("r_squared must lie in [0, 1]")

    def predict(self, batch: AdapterBatch) -> float:
        """Latency in ms; an empty batch costs ``beta``."""
        return self.alpha * _feature(self.kind, batch) + self.beta

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PerfModel":
        d = json.loads(text)
        return cls(d["kind"], float(d["alpha"]), float(d["beta"]), float(d.get("r_squared", 1.0)))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "PerfModel":
        return cls.from_json(Path(path).read_text())


def predict(model: PerfModel, batch: AdapterBatch) -> float:
    return model.predict(batch)


def fit(points, kind) -> PerfModel:
    """Ordinary least squares of latency on the kernel's batch feature."""
    kind = _check_kind(kind)
    points = list(points)
    if len(points) < 2:
        raise FitError(f"need at least 2 profile points, got {len(points)}")
    x = np.array([p.feature(kind) for p in points], dtype=np.float64)
    y = np.array([p.latency_ms for p in points], dtype=np.float64)
    xc = x - x.mean()
    sxx = float(xc @ xc)
    if sxx == 0.0:
        raise FitError("all profile points share one feature value")
    alpha = float(xc @ (y - y.mean())) / sxx
    beta = float(y.mean() - alpha * x.mean())
    if alpha < 0:
        raise FitError(f"fitted slope {alpha:.4g} is negative; profile is not rank-bound")
    ss_res = float(((y - (alpha * x + beta)) ** 2).sum())
    yc = y - y.mean()
    ss_tot = float(yc @ yc)
    if ss_res <= 1e-12 * max(ss_tot, 1e-300) or ss_tot == 0.0:
        r2 = 1.0
    else:
        r2 = min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return PerfModel(kind, alpha, beta, r2)


def read_profile_csv(path, kind=None) -> list:
    """Points from a profile CSV, optionally filtered to one kernel kind."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != CSV_HEADER:
            raise FitError(f"profile CSV header must be {','.join(CSV_HEADER)}")
        points = []
        for row in reader:
            if kind is not None and row["kernel"].strip().lower() != _check_kind(kind):
                continue
            points.append(ProfilePoint(int(row["batch_size"]), int(row["max_rank"]),
                                       int(row["sum_rank"]), float(row["latency_ms"])))
    return points


def write_profile_csv(path, points, kind) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for p in points:
            w.writerow([kind, p.batch_size, p.max_rank, p.sum_rank, repr(float(p.latency_ms))])


def sample_batches(n, max_batch=16, ranks=(8, 16, 32, 64), seed=0) -> list:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        size = int(rng.integers(1, max_batch + 1))
        out.append(AdapterBatch(tuple(int(r) for r in rng.choice(ranks, size))))
    return out


def instrumented_profile(kind, batches, hidden_size=None, ms_per_work_unit=1e-4,
                         base_ms=1.0, seed=0) -> list:
    """Run the reference kernel on each batch and convert work units to ms.

    Adapters are synthesized per distinct rank; ``hidden_size`` defaults to
    the largest rank so every rank is representable.
    """
    kind = _check_kind(kind)
    batches = list(batches)
    h = hidden_size or max(b.max_rank for b in batches)
    distinct = sorted({r for b in batches for r in b.ranks})
    pool = pool_from_adapters(
        cm.init_adapter(h, r, seed=seed + r, targets=("q",), adapter_id=f"r{r}") for r in distinct)
    kernel = bgmv if kind == "bgmv" else mbgmv
    points = []
    for i, b in enumerate(batches):
        ids = tuple(f"r{r}" for r in b.ranks)
        xs = cm.random_tokens(b.size, h, seed + i)
        work = kernel(xs, AdapterBatch(b.ranks, ids), pool).work_units
        points.append(ProfilePoint.from_batch(b, base_ms + work * ms_per_work_unit))
    return points
