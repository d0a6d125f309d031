import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from loraserve import core_math as cm
from loraserve.errors import CacheStateError, NumericError, ShapeError


# -- scalar oracle: plain Python lists, no numpy in the arithmetic ----------

def _mm(a, b):
    return [[sum(a[i][k] * b[k][j] for k in range(len(b))) for j in range(len(b[0]))]
            for i in range(len(a))]


def _add(a, b):
    return [[x + y for x, y in zip(ra, rb)] for ra, rb in zip(a, b)]


def _scalar_layer(x, w, past_k=None, past_v=None):
    """Causal single-head layer on lists; returns (out, keys, values)."""
    lst = lambda m: m.astype(float).tolist()
    h = len(x[0])
    k = (past_k or []) + _mm(x, lst(w.w_k))
    v = (past_v or []) + _mm(x, lst(w.w_v))
    q = _mm(x, lst(w.w_q))
    offset = len(past_k or [])
    attn = []
    for i, qi in enumerate(q):
        visible = offset + i + 1
        s = [sum(a * b for a, b in zip(qi, k[j])) / math.sqrt(h) for j in range(visible)]
        m = max(s)
        e = [math.exp(z - m) for z in s]
        tot = sum(e)
        attn.append([sum(e[j] / tot * v[j][c] for j in range(visible)) for c in range(h)])
    x_out = _add(_mm(attn, lst(w.w_o)), x)
    hid = [[max(z, 0.0) for z in row] for row in _mm(x_out, lst(w.w_1))]
    return _add(_mm(hid, lst(w.w_2)), x_out), k, v


# -- lora_apply ------------------------------------------------------------

def test_lora_apply_zero_adapter_is_base_product():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 8)).astype(np.float32)
    w = rng.normal(size=(8, 8)).astype(np.float32)
    b = rng.normal(size=(2, 8)).astype(np.float32)
    out = cm.lora_apply(x, w, np.zeros((8, 2), np.float32), b)
    assert np.array_equal(out, x @ w)


def test_lora_apply_hand_example():
    out = cm.lora_apply([[1, 2]], np.zeros((2, 2)), [[1], [0]], [[3, 4]])
    assert out.tolist() == [[3.0, 4.0]]


def test_lora_apply_matches_dense_merge():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(5, 8)).astype(np.float32)
    w = rng.normal(size=(8, 8)).astype(np.float32)
    a = rng.normal(size=(8, 2)).astype(np.float32)
    b = rng.normal(size=(2, 8)).astype(np.float32)
    merged = x.astype(np.float64) @ (w.astype(np.float64) + a.astype(np.float64) @ b)
    np.testing.assert_allclose(cm.lora_apply(x, w, a, b), merged, rtol=1e-5, atol=1e-5)


@settings(max_examples=60, deadline=None)
@given(h=st.integers(1, 12), r=st.integers(1, 6), n=st.integers(1, 5), seed=st.integers(0, 2**16))
def test_lora_apply_dense_merge_property(h, r, n, seed):
    r = min(r, h)
    rng = np.random.default_rng(seed)
    x, w = rng.uniform(-1, 1, (n, h)), rng.uniform(-1, 1, (h, h))
    a, b = rng.uniform(-1, 1, (h, r)), rng.uniform(-1, 1, (r, h))
    got = cm.lora_apply(x, w, a, b)
    want = x @ (w + a @ b)
    np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-5)


@pytest.mark.parametrize("bad,operand", [
    (dict(x=np.ones((1, 3))), "x"),
    (dict(a=np.ones((3, 1))), "A"),
    (dict(b=np.ones((2, 2))), "B"),
])
def test_lora_apply_shape_errors_name_operand(bad, operand):
    args = dict(x=np.ones((1, 2)), w=np.ones((2, 2)), a=np.ones((2, 1)), b=np.ones((1, 2)))
    args.update(bad)
    with pytest.raises(ShapeError, match=operand):
        cm.lora_apply(**args)


# -- prefill / decode ------------------------------------------------------

def test_prefill_zero_weights_is_identity():
    cfg = cm.ToyModelConfig(hidden_size=4, intermediate_size=6, num_layers=1)
    x = cm.random_tokens(1, 4, seed=3)
    y, cache = cm.prefill_layer(x, cm.LayerWeights.zeros(cfg))
    assert np.array_equal(y, x)
    assert cache.rows == 1


def test_prefill_matches_scalar_oracle():
    cfg = cm.ToyModelConfig(hidden_size=4, intermediate_size=6, num_layers=1)
    (w,) = cm.init_weights(cfg, seed=11)
    x = cm.random_tokens(2, 4, seed=12)
    y, cache = cm.prefill_layer(x, w)
    want, k, v = _scalar_layer(x.astype(float).tolist(), w)
    np.testing.assert_allclose(y, want, rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(cache.keys, k, rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(cache.values, v, rtol=1e-5, atol=1e-6)


def test_zero_adapter_prefill_bitwise_equal():
    cfg = cm.ToyModelConfig(hidden_size=8, intermediate_size=16, num_layers=2)
    layers = cm.init_weights(cfg, seed=0)
    ad = cm.init_adapter(8, 2, seed=1).zeroed()
    x = cm.random_tokens(4, 8, seed=2)
    y0, c0 = cm.prefill(x, layers)
    y1, c1 = cm.prefill(x, layers, ad)
    assert np.array_equal(y0, y1)
    for a, b in zip(c0.layers, c1.layers):
        assert np.array_equal(a.keys, b.keys) and np.array_equal(a.values, b.values)


def test_nonfinite_raises_with_layer_index():
    cfg = cm.ToyModelConfig(hidden_size=4, intermediate_size=4, num_layers=2)
    layers = cm.init_weights(cfg, seed=0)
    bad = cm.LayerWeights(*(np.full_like(m, 1e30) for m in (
        layers[1].w_q, layers[1].w_k, layers[1].w_v, layers[1].w_o, layers[1].w_1, layers[1].w_2)))
    with pytest.raises(NumericError) as ei:
        cm.prefill(cm.random_tokens(2, 4), [layers[0], bad])
    assert ei.value.layer_index == 1


def test_decode_after_one_token_zero_weights():
    cfg = cm.ToyModelConfig(hidden_size=4, intermediate_size=4, num_layers=1)
    w = cm.LayerWeights.zeros(cfg)
    _, cache = cm.prefill_layer(cm.random_tokens(1, 4, seed=0), w)
    t = cm.random_tokens(1, 4, seed=1)
    y, cache2 = cm.decode_step(t, cache, w)
    assert np.array_equal(y, t)
    assert cache2.rows == 2


def test_decode_matches_scalar_oracle():
    cfg = cm.ToyModelConfig(hidden_size=4, intermediate_size=6, num_layers=1)
    (w,) = cm.init_weights(cfg, seed=21)
    x = cm.random_tokens(2, 4, seed=22)
    t = cm.random_tokens(1, 4, seed=23)
    _, cache = cm.prefill_layer(x, w)
    y, _ = cm.decode_step(t, cache, w)
    _, pk, pv = _scalar_layer(x.astype(float).tolist(), w)
    want, _, _ = _scalar_layer(t.astype(float).tolist(), w, pk, pv)
    np.testing.assert_allclose(y, want, rtol=1e-5, atol=1e-6)


def test_incremental_decode_equals_full_prefill():
    cfg = cm.ToyModelConfig(hidden_size=8, intermediate_size=12, num_layers=3)
    layers = cm.init_weights(cfg, seed=5)
    ad = cm.init_adapter(8, 2, seed=6)
    toks = cm.random_tokens(3, 8, seed=7)
    y, cache = cm.prefill(toks[:1], layers, ad)
    outs = [y]
    for i in (1, 2):
        yi, cache = cm.decode(toks[i:i + 1], cache, layers, ad)
        outs.append(yi)
    assert cache.rows == 3
    y_full, cache_full = cm.prefill(toks, layers, ad)
    for inc, full in zip(cache.layers, cache_full.layers):
        np.testing.assert_allclose(inc.keys, full.keys, rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(inc.values, full.values, rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(np.concatenate(outs), y_full, rtol=1e-5, atol=1e-6)


def test_decode_rejects_bad_cache():
    cfg = cm.ToyModelConfig(hidden_size=4, intermediate_size=4, num_layers=1)
    (w,) = cm.init_weights(cfg)
    empty = cm.LayerCache(np.zeros((0, 4), np.float32), np.zeros((0, 4), np.float32))
    with pytest.raises(CacheStateError):
        cm.decode_step(cm.random_tokens(1, 4), empty, w)
    wide = cm.LayerCache(np.zeros((1, 6), np.float32), np.zeros((1, 6), np.float32))
    with pytest.raises(CacheStateError):
        cm.decode_step(cm.random_tokens(1, 4), wide, w)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=20))
def test_softmax_rows_sum_to_one(row):
    p = cm.softmax(np.array([row], dtype=np.float32))
    assert abs(float(p.sum(dtype=np.float64)) - 1.0) <= 1e-6


def test_multihead_config_runs():
    cfg = cm.ToyModelConfig(hidden_size=8, intermediate_size=8, num_layers=1, head_count=2)
    y, _ = cm.prefill(cm.random_tokens(3, 8), cm.init_weights(cfg), head_count=2)
    assert y.shape == (3, 8)


# -- generate --------------------------------------------------------------

def test_generate_single_output_is_prefill_only():
    cfg = cm.ToyModelConfig()
    g = cm.generate(3, 1, cfg, cm.init_weights(cfg))
    assert (g.prefill_calls, g.decode_calls, len(g.outputs)) == (1, 0, 1)


def test_generate_cache_rows():
    cfg = cm.ToyModelConfig()
    g = cm.generate(2, 3, cfg, cm.init_weights(cfg))
    assert g.cache.rows == 4
    assert g.decode_calls == 2


def test_generate_deterministic():
    cfg = cm.ToyModelConfig()
    layers = cm.init_weights(cfg, seed=9)
    ad = cm.init_adapter(cfg.hidden_size, 4, seed=9)
    a = cm.generate(4, 5, cfg, layers, ad, seed=3)
    b = cm.generate(4, 5, cfg, layers, ad, seed=3)
    assert all(np.array_equal(x, y) for x, y in zip(a.outputs, b.outputs))


def test_adapter_byte_size_and_rank_checks():
    ad = cm.init_adapter(8, 2)
    assert ad.byte_size == 3 * (8 * 2 + 2 * 8) * 4
    with pytest.raises(ValueError):
        cm.init_adapter(4, 5)
    with pytest.raises(ShapeError):
        cm.LoraAdapter("x", 2, {"q": (np.zeros((4, 3)), np.zeros((2, 4)))})
