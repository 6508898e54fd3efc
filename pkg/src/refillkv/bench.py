"""Timing of the compiled kernels against the pure-Python fallback."""
from __future__ import annotations

import time

import numpy as np

from . import numkernel as nk


def _cases(size: int, gen):
    heads, d = 4, 16
    x = gen.standard_normal((size, size)).astype(np.float32)
    y = gen.standard_normal((size, size)).astype(np.float32)
    g = np.ones(size, np.float32)
    pos = np.arange(size)
    q = gen.standard_normal((heads, size, d)).astype(np.float32)
    k = gen.standard_normal((heads, size, d)).astype(np.float32)
    v = gen.standard_normal((heads, size, d)).astype(np.float32)
    return {
        "matmul": lambda kern: kern.matmul(x, y),
        "softmax_rows": lambda kern: kern.softmax_rows(x),
        "rmsnorm": lambda kern: kern.rmsnorm(x, g),
        "rope_apply": lambda kern: kern.rope_apply(x, pos, d),
        "attention": lambda kern: kern.attention(q, k, v, pos, pos),
    }


def best_ms(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def run(sizes=(64, 128, 256), repeats: int = 5, seed: int = 0) -> list[dict]:
    """One row per (kernel, size, backend); ``speedup`` is python time over this backend's."""
    backends = nk.available_backends()
    gen = nk.rng(seed)
    rows = []
    for size in sizes:
        for name, call in _cases(int(size), gen).items():
            times = {b: best_ms(lambda: call(nk.kernels(b)), repeats) for b in backends}
            ref = times.get("python")
            for b, ms in times.items():
                rows.append(dict(kernel=name, size=int(size), backend=b, best_ms=round(ms, 4),
                                 speedup=round(ref / ms, 2) if ref and ms > 0 else None))
    return rows


def format_table(rows) -> str:
    lines = [f"{'kernel':<14}{'size':>6}  {'backend':<10}{'best ms':>11}{'speedup':>9}"]
    for r in rows:
        sp = "-" if r["speedup"] is None else f"{r['speedup']:.2f}x"
        lines.append(f"{r['kernel']:<14}{r['size']:>6}  {r['backend']:<10}"
                     f"{r['best_ms']:>11.3f}{sp:>9}")
    return "\n".join(lines)
