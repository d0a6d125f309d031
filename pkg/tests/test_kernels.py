import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from loraserve import core_math as cm
from loraserve.errors import AdapterLookupError, ShapeError
from loraserve.kernels import (AdapterBatch, AdapterPool, batch_prefill_adapt, bgmv, mbgmv,
                               pool_from_adapters)


def make_pool(h, ranks, seed=0):
    ads = [cm.init_adapter(h, r, seed=seed + i, adapter_id=f"a{i}") for i, r in enumerate(ranks)]
    return pool_from_adapters(ads), ads


def adaptation_oracle(x, adapter, target="q"):
    a, b = adapter.weights[target]
    zero_w = np.zeros((a.shape[0], b.shape[1]), dtype=np.float32)
    return cm.lora_apply(x, zero_w, a, b)


def test_pool_gather_returns_registered_weights():
    pool, ads = make_pool(8, [2, 4, 3])
    for ad in ads:
        for t in ad.targets:
            a, b = pool.gather(ad.id, t)
            assert np.array_equal(a, ad.weights[t][0])
            assert np.array_equal(b, ad.weights[t][1])
    offsets = sorted(pool.offset(ad.id) for ad in ads)
    assert offsets == [0, 3 * 2 * 8 * 2, 3 * 2 * 8 * 2 + 3 * 2 * 8 * 4]


def test_single_request_matches_lora_apply():
    pool, ads = make_pool(8, [4])
    x = cm.random_tokens(1, 8, seed=1)
    out = bgmv([x], AdapterBatch.from_pool(["a0"], pool), pool)
    np.testing.assert_allclose(out.outputs[0], adaptation_oracle(x, ads[0]), rtol=1e-6, atol=1e-7)


def test_work_units_cost_laws():
    pool, _ = make_pool(8, [2, 2, 8])
    batch = AdapterBatch.from_pool(["a0", "a1", "a2"], pool)
    xs = cm.random_tokens(3, 8)
    assert bgmv(xs, batch, pool).work_units == 384
    assert mbgmv(xs, batch, pool).work_units == 192


def test_homogeneous_ranks_no_padding_cost():
    pool, _ = make_pool(8, [8, 8, 8])
    batch = AdapterBatch.from_pool(["a0", "a1", "a2"], pool)
    xs = cm.random_tokens(3, 8)
    assert bgmv(xs, batch, pool).work_units == mbgmv(xs, batch, pool).work_units


def test_zero_adapters_give_zero_outputs():
    ads = [cm.init_adapter(8, r, seed=i, adapter_id=f"z{i}").zeroed() for i, r in enumerate([2, 5])]
    pool = pool_from_adapters(ads)
    out = bgmv(cm.random_tokens(2, 8), AdapterBatch.from_pool(["z0", "z1"], pool), pool)
    assert all(not o.any() for o in out.outputs)


def test_unknown_id_raises():
    pool, _ = make_pool(8, [2])
    with pytest.raises(AdapterLookupError):
        AdapterBatch.from_pool(["nope"], pool)
    with pytest.raises(AdapterLookupError):
        mbgmv(cm.random_tokens(1, 8), AdapterBatch((2,), ("nope",)), pool)


def test_duplicate_ids_allowed():
    pool, ads = make_pool(8, [3])
    xs = cm.random_tokens(2, 8, seed=4)
    batch = AdapterBatch.from_pool(["a0", "a0"], pool)
    out = mbgmv(xs, batch, pool)
    for i in range(2):
        np.testing.assert_allclose(out.outputs[i], adaptation_oracle(xs[i:i + 1], ads[0]),
                                   rtol=1e-6, atol=1e-7)


@settings(max_examples=80, deadline=None)
@given(h=st.integers(2, 16), ranks=st.lists(st.integers(1, 16), min_size=1, max_size=8),
       seed=st.integers(0, 10_000), target=st.sampled_from(["q", "k", "v"]))
def test_three_way_equivalence(h, ranks, seed, target):
    ranks = [min(r, h) for r in ranks]
    pool, ads = make_pool(h, ranks, seed)
    batch = AdapterBatch.from_pool([a.id for a in ads], pool)
    xs = cm.random_tokens(len(ranks), h, seed)
    ob, om = bgmv(xs, batch, pool, target), mbgmv(xs, batch, pool, target)
    for i, ad in enumerate(ads):
        want = adaptation_oracle(xs[i:i + 1], ad, target)
        np.testing.assert_allclose(ob.outputs[i], want, rtol=1e-6, atol=1e-6)
        np.testing.assert_allclose(om.outputs[i], ob.outputs[i], rtol=1e-6, atol=1e-6)
    assert ob.work_units >= om.work_units
    assert (ob.work_units == om.work_units) == (len(set(ranks)) == 1)


def test_prefill_adapt_single_token_reduces_to_bgmv():
    pool, _ = make_pool(8, [2, 6])
    batch = AdapterBatch.from_pool(["a0", "a1"], pool)
    xs = cm.random_tokens(2, 8, seed=3)
    rows = [xs[:1], xs[1:]]
    p = batch_prefill_adapt(rows, batch, pool, kernel="bgmv")
    b = bgmv(xs, batch, pool)
    assert p.work_units == b.work_units
    for u, v in zip(p.outputs, b.outputs):
        np.testing.assert_allclose(u, v, rtol=1e-6, atol=1e-7)


def test_prefill_adapt_matches_naive_rows():
    pool, ads = make_pool(8, [2, 5], seed=9)
    batch = AdapterBatch.from_pool(["a0", "a1"], pool)
    xs = [cm.random_tokens(2, 8, seed=1), cm.random_tokens(3, 8, seed=2)]
    out = batch_prefill_adapt(xs, batch, pool)
    for x, ad, got in zip(xs, ads, out.outputs):
        for r in range(x.shape[0]):
            np.testing.assert_allclose(got[r:r + 1], adaptation_oracle(x[r:r + 1], ad),
                                       rtol=1e-6, atol=1e-7)
    assert out.work_units == (2 * 2 + 3 * 5) * 16


def test_prefill_adapt_rejects_empty_tokens():
    pool, _ = make_pool(8, [2])
    with pytest.raises(ShapeError):
        batch_prefill_adapt([np.zeros((0, 8), np.float32)], AdapterBatch.from_pool(["a0"], pool), pool)


def test_empty_batch_rejected():
    pool = AdapterPool(8)
    with pytest.raises(ShapeError):
        bgmv([], AdapterBatch((), ()), pool)


def test_batch_derived_counts():
    b = AdapterBatch((2, 2, 8))
    assert (b.size, b.max_rank, b.sum_rank) == (3, 8, 12)
    assert (b + AdapterBatch((16,))).max_rank == 16
