"""Toy-scale transformer layer with LoRA-adapted Q/K/V projections.

Everything here is float32 numpy and side-effect free. It is the reference
that the batched kernels, the CPU-assisted split prefill and the simulator's
cost accounting are checked against.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CacheStateError, NumericError, ShapeError

DTYPE = np.float32
TARGETS = ("q", "k", "v")
WEIGHT_RANGE = 0.1


def as_matrix(a, name="matrix") -> np.ndarray:
    m = np.asarray(a, dtype=DTYPE)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


@dataclass(frozen=True)
class ToyModelConfig:
    hidden_size: int = 8
    intermediate_size: int = 16
    num_layers: int = 2
    head_count: int = 1

    def __post_init__(self):
        if self.hidden_size < 1 or self.intermediate_size < 1 or self.num_layers < 1:
            raise ValueError("hidden_size, intermediate_size and num_layers must be >= 1")
        if self.head_count < 1 or self.hidden_size % self.head_count:
            raise ValueError("hidden_size must be divisible by head_count")


@dataclass(frozen=True)
class LayerWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    w_1: np.ndarray
    w_2: np.ndarray

    def __post_init__(self):
        h = self.w_q.shape[0]
        for name in ("w_q", "w_k", "w_v", "w_o"):
            if getattr(self, name).shape != (h, h):
                raise ShapeError(f"{name} must be {h}x{h}, got {getattr(self, name).shape}")
        hp = self.w_1.shape[1]
        if self.w_1.shape != (h, hp):
            raise ShapeError(f"w_1 must be {h}x{hp}, got {self.w_1.shape}")
        if self.w_2.shape != (hp, h):
            raise ShapeError(f"w_2 must be {hp}x{h}, got {self.w_2.shape}")

    @property
    def hidden_size(self) -> int:
        return self.w_q.shape[0]

    def projection(self, target: str) -> np.ndarray:
        return getattr(self, "w_" + target)

    @classmethod
    def zeros(cls, config: ToyModelConfig) -> "LayerWeights":
        h, hp = config.hidden_size, config.intermediate_size
        z = lambda r, c: np.zeros((r, c), dtype=DTYPE)
        return cls(z(h, h), z(h, h), z(h, h), z(h, h), z(h, hp), z(hp, h))


@dataclass(frozen=True)
class LoraAdapter:
    """Rank-``rank`` adapter: ``weights[target] = (A, B)`` with A: H x r, B: r x H."""

    id: str
    rank: int
    weights: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("adapter rank must be >= 1")
        for target, (a, b) in self.weights.items():
            if target not in TARGETS:
                raise ValueError(f"unknown adapter target {target!r}")
            h = a.shape[0]
            if a.shape != (h, self.rank):
                raise ShapeError(f"A[{target}] must be {h}x{self.rank}, got {a.shape}")
            if b.shape != (self.rank, h):
                raise ShapeError(f"B[{target}] must be {self.rank}x{h}, got {b.shape}")
            if self.rank > h:
                raise ValueError(f"rank {self.rank} exceeds hidden size {h}")

    @property
    def targets(self) -> tuple:
        return tuple(t for t in TARGETS if t in self.weights)

    @property
    def hidden_size(self) -> int:
        return next(iter(self.weights.values()))[0].shape[0]

    @property
    def byte_size(self) -> int:
        return adapter_byte_size(self.hidden_size, self.rank, len(self.weights))

    def zeroed(self) -> "LoraAdapter":
        return LoraAdapter(
            self.id, self.rank,
            {t: (np.zeros_like(a), np.zeros_like(b)) for t, (a, b) in self.weights.items()},
        )


def adapter_byte_size(hidden_size: int, rank: int, num_targets: int = 3) -> int:
    """float32 bytes of an adapter with ``num_targets`` (A, B) pairs."""
    return num_targets * (hidden_size * rank + rank * hidden_size) * 4


@dataclass(frozen=True)
class LayerCache:
    keys: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.keys.shape != self.values.shape:
            raise CacheStateError("key and value caches disagree in shape")

    @property
    def rows(self) -> int:
        return self.keys.shape[0]


@dataclass(frozen=True)
class KvCache:
    layers: tuple

    @property
    def rows(self) -> int:
        return self.layers[0].rows if self.layers else 0


def lora_apply(x, w, a, b) -> np.ndarray:
    """``x @ w + (x @ a) @ b`` without forming ``w + a @ b``."""
    x = as_matrix(x, "x")
    w, a, b = as_matrix(w, "W"), as_matrix(a, "A"), as_matrix(b, "B")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"x has {x.shape[1]} cols but W has {w.shape[0]} rows")
    if a.shape[0] != w.shape[0]:
        raise ShapeError(f"A has {a.shape[0]} rows, expected {w.shape[0]}")
    if b.shape != (a.shape[1], w.shape[1]):
        raise ShapeError(f"B must be {a.shape[1]}x{w.shape[1]}, got {b.shape}")
    return x @ w + (x @ a) @ b


def project(x, w: LayerWeights, target: str, adapter: LoraAdapter | None = None, delta=None):
    """Q/K/V projection; ``delta`` is a precomputed ``x A B`` (split-prefill path)."""
    base = w.projection(target)
    if delta is not None:
        return x @ base + delta
    if adapter is not None and target in adapter.weights:
        a, b = adapter.weights[target]
        return lora_apply(x, base, a, b)
    return x @ base


def softmax(s: np.ndarray) -> np.ndarray:
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def attention(q, k, v, head_count=1, causal_offset=None) -> np.ndarray:
    """softmax(q k^T / sqrt(d)) v per head.

    ``causal_offset`` is the absolute position of q's first row; query row i
    may attend to key rows ``<= causal_offset + i``.
    """
    n_q, h = q.shape
    d = h // head_count
    out = np.empty_like(q)
    mask = None
    if causal_offset is not None:
        pos_q = np.arange(n_q)[:, None] + causal_offset
        mask = np.arange(k.shape[0])[None, :] > pos_q
    for hd in range(head_count):
        sl = slice(hd * d, (hd + 1) * d)
        scores = (q[:, sl] @ k[:, sl].T) / np.sqrt(DTYPE(d))
        if mask is not None:
            scores = np.where(mask, -np.inf, scores)
        out[:, sl] = softmax(scores) @ v[:, sl]
    return out.astype(DTYPE, copy=False)


def _finish_layer(x, attn, w: LayerWeights, layer_index):
    x_out = attn @ w.w_o + x
    y = np.maximum(x_out @ w.w_1, 0) @ w.w_2 + x_out
    if not np.all(np.isfinite(y)):
        raise NumericError(f"non-finite activation in layer {layer_index}", layer_index)
    return y


def finish_prefill_layer(x, q, k, v, w: LayerWeights, layer_index=0, head_count=1):
    """Attention, residuals and MLP given already-adapted projections."""
    with np.errstate(over="ignore", invalid="ignore"):
        attn = attention(q, k, v, head_count, causal_offset=0)
        return _finish_layer(x, attn, w, layer_index), LayerCache(k, v)


def prefill_layer(x, w: LayerWeights, adapter=None, layer_index=0, head_count=1, deltas=None):
    """One layer over an L x H prompt. Returns (output, LayerCache).

    ``deltas`` maps target -> precomputed adaptation term; it replaces
    ``adapter`` for the targets it covers.
    """
    x = as_matrix(x, "x")
    if x.shape[0] < 1:
        raise ShapeError("prefill needs at least one token")
    if x.shape[1] != w.hidden_size:
        raise ShapeError(f"x has {x.shape[1]} cols, layer hidden size is {w.hidden_size}")
    deltas = deltas or {}
    with np.errstate(over="ignore", invalid="ignore"):
        q = project(x, w, "q", adapter, deltas.get("q"))
        k = project(x, w, "k", adapter, deltas.get("k"))
        v = project(x, w, "v", adapter, deltas.get("v"))
    return finish_prefill_layer(x, q, k, v, w, layer_index, head_count)


def decode_step(t, cache: LayerCache, w: LayerWeights, adapter=None, layer_index=0, head_count=1):
    """One layer for one new token; returns (output, cache with one more row)."""
    t = as_matrix(t, "t")
    if t.shape != (1, w.hidden_size):
        raise ShapeError(f"decode input must be 1x{w.hidden_size}, got {t.shape}")
    if cache is None or cache.rows == 0:
        raise CacheStateError(f"layer {layer_index}: decode needs a non-empty cache")
    if cache.keys.shape[1] != w.hidden_size:
        raise CacheStateError(
            f"layer {layer_index}: cache width {cache.keys.shape[1]} != hidden {w.hidden_size}")
    with np.errstate(over="ignore", invalid="ignore"):
        k_new = np.concatenate([cache.keys, project(t, w, "k", adapter)])
        v_new = np.concatenate([cache.values, project(t, w, "v", adapter)])
        q = project(t, w, "q", adapter)
        attn = attention(q, k_new, v_new, head_count)
        return _finish_layer(t, attn, w, layer_index), LayerCache(k_new, v_new)


def prefill(x, layers, adapter=None, head_count=1):
    caches = []
    for i, w in enumerate(layers):
        x, c = prefill_layer(x, w, adapter, i, head_count)
        caches.append(c)
    return x, KvCache(tuple(caches))


def decode(t, cache: KvCache, layers, adapter=None, head_count=1):
    if len(cache.layers) != len(layers):
        raise CacheStateError(f"cache has {len(cache.layers)} layers, model has {len(layers)}")
    caches = []
    for i, (w, c) in enumerate(zip(layers, cache.layers)):
        t, c = decode_step(t, c, w, adapter, i, head_count)
        caches.append(c)
    return t, KvCache(tuple(caches))


def init_weights(config: ToyModelConfig, seed=0) -> list:
    rng = np.random.default_rng(seed)
    h, hp = config.hidden_size, config.intermediate_size
    u = lambda r, c: rng.uniform(-WEIGHT_RANGE, WEIGHT_RANGE, (r, c)).astype(DTYPE)
    return [LayerWeights(u(h, h), u(h, h), u(h, h), u(h, h), u(h, hp), u(hp, h))
            for _ in range(config.num_layers)]


def init_adapter(hidden_size, rank, seed=0, targets=TARGETS, adapter_id=None) -> LoraAdapter:
    rng = np.random.default_rng(seed)
    u = lambda r, c: rng.uniform(-WEIGHT_RANGE, WEIGHT_RANGE, (r, c)).astype(DTYPE)
    weights = {t: (u(hidden_size, rank), u(rank, hidden_size)) for t in targets}
    return LoraAdapter(f"lora-r{rank}-s{seed}" if adapter_id is None else adapter_id, rank, weights)


def random_tokens(n, hidden_size, seed=0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(-1.0, 1.0, (n, hidden_size)).astype(DTYPE)


@dataclass
class Generation:
    outputs: list
    cache: KvCache
    prefill_calls: int = 0
    decode_calls: int = 0


def generate(prompt_len, out_len, config: ToyModelConfig, layers, adapter=None, seed=0) -> Generation:
    """Prefill a seeded prompt, then feed each output row back as the next token."""
    if out_len < 1:
        raise ValueError("out_len must be >= 1")
    prompt = random_tokens(prompt_len, config.hidden_size, seed)
    y, cache = prefill(prompt, layers, adapter, config.head_count)
    outputs = [y[-1:]]
    gen = Generation(outputs, cache, prefill_calls=1)
    for _ in range(out_len - 1):
        t, gen.cache = decode(outputs[-1], gen.cache, layers, adapter, config.head_count)
        outputs.append(t)
        gen.decode_calls += 1
    return gen
