import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from conftest import random_tokens
from refillkv.errors import ConfigError, PreconditionError, WindowOverflowError
from refillkv.model import ModelConfig, init_model
from refillkv.nested_cache import decompose, interleave
from refillkv.prefill import PrefillConfig, full_attention_kv, prune_view, run_prefill, schedule


def test_chunked_matches_unchunked_when_window_is_large(tiny):
    tokens = random_tokens(5, 48)
    seq = interleave(tokens, 8)
    res = run_prefill(tiny, tokens, PrefillConfig(window=len(seq), interval=8, chunk=16))
    ref = decompose(full_attention_kv(tiny, seq), 8)
    for a, b in zip((res.cache.l1_keys, res.cache.l1_values), (ref.l1_keys, ref.l1_values)):
        np.testing.assert_allclose(a, b, atol=1e-5)
    assert res.steps == 3


def test_unchunked_matches_loop_oracle(tiny):
    seq = interleave(random_tokens(6, 12), 4)
    view = full_attention_kv(tiny, seq)
    _, keys, values = oracles.full_forward(tiny, seq.token_ids, seq.is_l1, seq.positions)
    for i, kv in enumerate(view):
        np.testing.assert_allclose(kv.keys.transpose(1, 0, 2).reshape(len(seq), -1), keys[i], atol=1e-5)
        np.testing.assert_allclose(kv.values.transpose(1, 0, 2).reshape(len(seq), -1), values[i],
                                   atol=1e-5)


def oracle_visibility(seq, window, chunk_items):
    """Prior entries visible to chunk c: all earlier L1, plus the newest earlier
    L2 entries that fit in window - chunk_items (assumes equal-size chunks)."""
    budget = window - chunk_items

    def visible(layer, t, s):
        c = t // chunk_items
        if s // chunk_items == c:
            return s <= t
        if s >= c * chunk_items:
            return False
        before = np.arange(c * chunk_items)
        n_l1 = int(seq.is_l1[before].sum())
        l2_before = before[~seq.is_l1[before]]
        room = max(0, budget - n_l1)
        kept = l2_before[max(0, l2_before.size - room):] if room else []
        return bool(seq.is_l1[s]) or s in set(kept)
    return visible


def test_pruned_prefill_matches_masked_oracle(tiny):
    tokens = random_tokens(7, 24)
    cfg = PrefillConfig(window=12, interval=4, chunk=4)
    seq = interleave(tokens, 4)
    res = run_prefill(tiny, tokens, cfg, keep_logits=True)
    want, _, _ = oracles.full_forward(tiny, seq.token_ids, seq.is_l1, seq.positions,
                                      oracle_visibility(seq, 12, cfg.chunk_items))
    np.testing.assert_allclose(res.logits, want, atol=1e-5)
    assert res.peak_view == 12


def test_prune_keeps_l1_and_drops_oldest_l2():
    idx = np.arange(10)
    is_l1 = np.array([0, 0, 1, 0, 0, 1, 0, 0, 1, 0], bool)
    pv = prune_view(idx, is_l1, 6)
    np.testing.assert_array_equal(pv.indices, [2, 5, 6, 7, 8, 9])
    with pytest.raises(WindowOverflowError):
        prune_view(idx, is_l1, 2)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 200), st.sampled_from([1, 2, 4, 8]), st.integers(1, 4), st.integers(0, 20))
def test_schedule_respects_window(n, l, groups, slack):
    chunk = l * groups
    window = max(chunk + l + 1, chunk + groups + 1) + slack
    cfg = PrefillConfig(window=window, interval=l, chunk=chunk)
    seq = interleave(np.zeros(n, np.int64), l)
    covered = []
    try:
        for start, stop, pv in schedule(seq, cfg):
            assert len(pv) + (stop - start) <= window
            assert np.all(pv.indices < start)
            assert set(np.flatnonzero(seq.is_l1[:start])) <= set(pv.indices.tolist())
            covered.extend(range(start, stop))
    except WindowOverflowError:
        assert seq.m > window - cfg.chunk_items - 1
        return
    assert covered == list(range(len(seq)))


def test_overflow_when_l1_alone_exceeds_window():
    model = init_model(ModelConfig())
    with pytest.raises(WindowOverflowError):
        run_prefill(model, random_tokens(0, 160), PrefillConfig(window=24, interval=8, chunk=8))


def test_config_validation():
    with pytest.raises(ConfigError):
        PrefillConfig(window=64, interval=8, chunk=12)
    with pytest.raises(ConfigError):
        PrefillConfig(window=10, interval=8, chunk=8)
    assert PrefillConfig(window=512, interval=16).chunk % 16 == 0


def test_empty_context_rejected(tiny):
    with pytest.raises(PreconditionError):
        run_prefill(tiny, [], PrefillConfig(window=64, interval=4, chunk=4))
