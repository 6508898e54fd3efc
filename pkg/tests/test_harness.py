import numpy as np
import pytest

from refillkv import harness
from refillkv.errors import CapacityError, ConfigError, PreconditionError
from refillkv.harness import ExperimentConfig


def cfg(**kw):
    base = dict(corpus="markov:256", interval=8, window=128, max_refill=32, max_new=3)
    base.update(kw)
    return ExperimentConfig(**base)


def test_ingest_wraps_and_maps_bytes(tmp_path):
    p = tmp_path / "doc.txt"
    p.write_bytes(b"abc")
    bare = harness.ingest(p, 64, template=None)
    np.testing.assert_array_equal(bare, [97 % 62, 98 % 62, 99 % 62])
    wrapped = harness.ingest(p, 64)
    head = len(harness.DEFAULT_TEMPLATE.head.encode())
    np.testing.assert_array_equal(wrapped[head:head + 3], bare)
    assert wrapped.max() < 62
    with pytest.raises(PreconditionError):
        harness.ingest("", inline=True)
    with pytest.raises(OSError):
        harness.ingest(tmp_path / "missing.txt")


def test_acre_metrics_shape():
    r = harness.run(cfg())
    m, n = r.metrics, 256
    assert r.extra == dict(n=n, m=32, k=4)
    assert m.hot_entries == 32 * 2 * 2 and m.cold_entries == n * 2 * 2
    assert m.refill_entries == 32 and m.cold_reads == 2 * 32
    assert m.peak_view_entries <= 128 and m.decode_tokens == len(r.answer) <= 3


def test_cache_reuse_gives_same_answer():
    c = cfg()
    model = harness.build_model(c)
    cache, _ = harness.build_cache(model, c)
    a = harness.answer_from_cache(model, cache, c)
    b = harness.answer_from_cache(model, cache, c)
    assert a.answer == b.answer == harness.run(c, model).answer
    assert a.metrics.cold_reads == b.metrics.cold_reads


def test_streaming_with_wide_window_equals_full():
    full = harness.run(cfg(mode="full", cap=4096))
    stream = harness.run(cfg(mode="streaming", stream_window=1024, sinks=4))
    assert full.answer == stream.answer
    assert stream.metrics.peak_view_entries == full.metrics.peak_view_entries == 256


def test_streaming_view_is_bounded():
    r = harness.run(cfg(corpus="markov:512", mode="streaming", stream_window=96, sinks=4))
    # attention sinks sit on top of the recent window
    assert r.metrics.peak_view_entries == 4 + 96
    assert r.metrics.hot_entries == (4 + 96) * 2 * 2


def test_full_mode_capacity():
    r = harness.run(cfg(mode="full", cap=300))
    assert r.metrics.hot_entries == 256 * 4
    with pytest.raises(CapacityError):
        harness.run(cfg(mode="full", cap=200))


def test_sweep_l_hot_counts():
    rows = harness.sweep("l", [8, 16, 32, 64, 128], cfg(corpus="markov:1024", window=512))
    assert [r["hot_entries"] // 4 for r in rows] == [128, 64, 32, 16, 8]


def test_sweep_eta_and_window_monotone():
    rows = harness.sweep("eta", [0, 8, 32, 64], cfg())
    assert [r["refill_entries"] for r in rows] == [0, 8, 32, 64]
    rows = harness.sweep("W", [48, 64, 96], cfg(max_refill=4096, chunk=8))
    assert [r["k"] for r in rows] == [2, 4, 8]
    with pytest.raises(ConfigError):
        harness.sweep("n", [1], cfg())


def test_check_monotone_flags_violations():
    with pytest.raises(AssertionError):
        harness.check_monotone("eta", [dict(eta=1, refill_entries=5, hot_entries=1),
                                         dict(eta=2, refill_entries=3, hot_entries=1)])


def test_record_is_deterministic_and_excludes_time():
    a = harness.run(cfg()).record()
    b = harness.run(cfg()).record()
    assert harness.to_jsonl([a]) == harness.to_jsonl([b])
    assert "wall_ms" not in a and "wall_ms" in harness.run(cfg()).record(timing=True)


def test_config_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig(mode="paged")
    with pytest.raises(ConfigError):
        ExperimentConfig(corpus="web")
    with pytest.raises(ConfigError):
        ExperimentConfig(window=8, interval=16)
