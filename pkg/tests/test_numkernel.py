import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from refillkv import numkernel
from refillkv.errors import ConfigError, ShapeError
from refillkv.model import KVView, ModelConfig, forward_logits, init_model

finite32 = st.floats(-100, 100, allow_nan=False, width=32)


def test_matmul_identity(kern, rng):
    a = rng.standard_normal((2, 2)).astype(np.float32)
    np.testing.assert_array_equal(kern.matmul(np.eye(2, dtype=np.float32), a), a)


def test_matmul_hand_case(kern):
    out = kern.matmul(np.array([[1, 2], [3, 4]], np.float32), np.array([[5], [6]], np.float32))
    np.testing.assert_array_equal(out, [[17], [39]])


def test_matmul_matches_triple_loop(kern, rng):
    a = rng.standard_normal((7, 5)).astype(np.float32)
    b = rng.standard_normal((5, 3)).astype(np.float32)
    out = kern.matmul(a, b)
    assert out.shape == (7, 3) and out.dtype == np.float32
    np.testing.assert_allclose(out, oracles.matmul(a, b), atol=1e-6, rtol=1e-6)


def test_matmul_shape_error_names_both_shapes(kern):
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        kern.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_matmul_associative(kern, rng):
    a, b, c = (rng.standard_normal(s).astype(np.float32) for s in ((4, 6), (6, 5), (5, 3)))
    np.testing.assert_allclose(kern.matmul(kern.matmul(a, b), c),
                               kern.matmul(a, kern.matmul(b, c)), atol=1e-4)


def test_softmax_uniform_row(kern):
    np.testing.assert_allclose(kern.softmax_rows(np.zeros((1, 3), np.float32)), [[1 / 3] * 3],
                               atol=1e-7)


def test_softmax_large_logit_does_not_overflow(kern):
    out = kern.softmax_rows(np.array([[1000.0, 0.0]], np.float32))
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-7)


def test_softmax_matches_float64_oracle(kern, rng):
    row = rng.standard_normal((1, 9)).astype(np.float32) * 3
    np.testing.assert_allclose(kern.softmax_rows(row)[0], oracles.softmax(row[0]), atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 12)),
              elements=st.floats(-1e4, 1e4, allow_nan=False, width=32)))
def test_softmax_rows_sum_to_one(x):
    for backend in numkernel.available_backends():
        out = numkernel.kernels(backend).softmax_rows(x)
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-5)


def test_rmsnorm_ones_row(kern):
    out = kern.rmsnorm(np.ones((1, 8), np.float32), np.ones(8, np.float32))
    np.testing.assert_allclose(out, 1 / np.sqrt(1 + 1e-6), rtol=1e-7)


def test_rmsnorm_zero_row(kern):
    out = kern.rmsnorm(np.zeros((2, 4), np.float32), np.ones(4, np.float32))
    np.testing.assert_array_equal(out, 0.0)


def test_rmsnorm_matches_float64_oracle(kern, rng):
    x = rng.standard_normal((3, 16)).astype(np.float32)
    g = rng.standard_normal(16).astype(np.float32)
    want = np.array([oracles.rmsnorm(r, g) for r in x])
    np.testing.assert_allclose(kern.rmsnorm(x, g), want, atol=1e-6, rtol=1e-6)


def test_rope_position_zero_is_identity(kern, rng):
    x = rng.standard_normal((3, 16)).astype(np.float32)
    np.testing.assert_array_equal(kern.rope_apply(x, [0, 0, 0], 8), x)


def test_rope_relative_position_property(kern, rng):
    q, k = rng.standard_normal((2, 8)).astype(np.float64)
    for p in (1, 5, 37):
        rq = kern.rope_apply(q[None], [p])[0]
        rk = kern.rope_apply(k[None], [p])[0]
        assert rq @ rk == pytest.approx(q @ k, rel=1e-9)
    # and only the offset matters
    a = kern.rope_apply(q[None], [10])[0] @ kern.rope_apply(k[None], [7])[0]
    b = kern.rope_apply(q[None], [3])[0] @ kern.rope_apply(k[None], [0])[0]
    assert a == pytest.approx(b, rel=1e-9)


def test_rope_matches_trig_oracle(kern, rng):
    x = rng.standard_normal(16).astype(np.float32)
    out = kern.rope_apply(x[None], [3], head_dim=8)[0]
    np.testing.assert_allclose(out, oracles.rope(x, 3, 8), atol=1e-5)


def test_rope_odd_head_dim_rejected(kern):
    with pytest.raises(ConfigError):
        kern.rope_apply(np.zeros((1, 6), np.float32), [0], head_dim=3)


def test_attention_causal_against_loops(kern, rng):
    q = rng.standard_normal((2, 4, 8)).astype(np.float32)
    k = rng.standard_normal((2, 6, 8)).astype(np.float32)
    v = rng.standard_normal((2, 6, 8)).astype(np.float32)
    qp, kp = np.array([2, 3, 4, 5]), np.arange(6)
    out = kern.attention(q, k, v, qp, kp)
    for h in range(2):
        for t in range(4):
            cols = [s for s in range(6) if kp[s] <= qp[t]]
            w = oracles.softmax([q[h, t] @ k[h, s] / np.sqrt(8) for s in cols])
            np.testing.assert_allclose(out[h, t], sum(wi * v[h, s] for wi, s in zip(w, cols)),
                                       atol=1e-5)


def test_kernels_deterministic(kern, rng):
    x = rng.standard_normal((5, 8)).astype(np.float32)
    a = kern.softmax_rows(kern.matmul(x, x.T))
    b = kern.softmax_rows(kern.matmul(x, x.T))
    assert a.tobytes() == b.tobytes()


def test_finite_outputs_for_finite_inputs(kern, rng):
    x = (rng.standard_normal((4, 8)) * 50).astype(np.float32)
    for out in (kern.softmax_rows(x), kern.rmsnorm(x, np.ones(8)), kern.rope_apply(x, [1, 2, 3, 4]),
                kern.matmul(x, x.T)):
        assert np.all(np.isfinite(out))


def test_float64_inputs_stay_float64(kern, rng):
    x = rng.standard_normal((3, 4))
    assert kern.matmul(x, x.T).dtype == np.float64
    assert kern.softmax_rows(x).dtype == np.float64


def test_backends_agree(rng):
    if len(numkernel.available_backends()) < 2:
        pytest.skip("compiled kernels not built")
    c, p = numkernel.kernels("compiled"), numkernel.kernels("python")
    x = rng.standard_normal((6, 16)).astype(np.float32)
    np.testing.assert_allclose(c.matmul(x, x.T), p.matmul(x, x.T), atol=1e-5)
    np.testing.assert_allclose(c.rope_apply(x, np.arange(6) * 5, 8),
                               p.rope_apply(x, np.arange(6) * 5, 8), atol=1e-5)


def test_seeded_rng_is_reproducible():
    a = numkernel.gaussian(numkernel.rng(2**64 - 1), (3, 3))
    b = numkernel.gaussian(numkernel.rng(2**64 - 1), (3, 3))
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ConfigError):
        numkernel.rng(-1)


def test_unknown_backend():
    with pytest.raises(ConfigError):
        numkernel.kernels("gpu")


def test_env_forces_python_backend():
    code = "from refillkv import numkernel; print(numkernel.BACKEND)"
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True,
                         env={**os.environ, "REFILLKV_BACKEND": "python"})
    assert out.stdout.strip() == "python"


def test_end_to_end_logits_agree_across_backends():
    if len(numkernel.available_backends()) < 2:
        pytest.skip("compiled kernels not built")
    model = init_model(ModelConfig(seed=1))
    outs = []
    for b in ("compiled", "python"):
        saved = numkernel._default
        numkernel._default = numkernel.kernels(b)
        try:
            outs.append(forward_logits(model, KVView.empty(model.config), np.arange(20) % 60))
        finally:
            numkernel._default = saved
    np.testing.assert_allclose(outs[0], outs[1], atol=1e-5)
