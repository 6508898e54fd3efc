"""Dense numeric kernels shared by every other module.

Two interchangeable backends implement the hot loops: the compiled Cython
extension ``refillkv._kernels`` and the numpy fallback ``refillkv._fallback``.
The compiled one is used when it imports; set ``REFILLKV_BACKEND=python`` to
force the fallback. All kernels preserve the input float dtype, so feeding
float64 arrays gives the 64-bit shadow mode used by the gradient checks.
"""
from __future__ import annotations

import os
from types import ModuleType

import numpy as np

from . import _fallback
from .errors import ConfigError, PreconditionError, ShapeError

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

COMPUTE_DTYPE = np.float32
RMS_EPS = 1e-6
ROPE_BASE = 10000.0


def available_backends() -> list[str]:
    return (["compiled"] if _compiled is not None else []) + ["python"]


def _resolve(name: str | None) -> tuple[str, ModuleType]:
    if name is None:
        name = os.environ.get("REFILLKV_BACKEND", "").strip().lower() or (
            "compiled" if _compiled is not None else "python"
        )
    if name == "python":
        return name, _fallback
    if name == "compiled":
        if _compiled is None:
            raise ConfigError("compiled kernels requested but refillkv._kernels is not built")
        return name, _compiled
    raise ConfigError(f"unknown kernel backend {name!r}")


def _float_pair(*arrays):
    dtype = np.result_type(*arrays)
    if dtype not in (np.float32, np.float64):
        dtype = np.dtype(COMPUTE_DTYPE)
    return [np.ascontiguousarray(a, dtype=dtype) for a in arrays]


class Kernels:
    """Validated kernel entry points bound to one backend."""

    def __init__(self, backend: str | None = None):
        self.name, self._impl = _resolve(backend)

    def __repr__(self):
        return f"Kernels({self.name!r})"

    def matmul(self, a, b):
        a, b = _float_pair(a, b)
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
        return self._impl.matmul(a, b)

    def softmax_rows(self, m):
        (m,) = _float_pair(m)
        if m.ndim != 2:
            raise ShapeError(f"softmax_rows expects a matrix, got shape {m.shape}")
        if m.shape[1] == 0:
            raise ShapeError("softmax_rows over zero columns")
        return self._impl.softmax_rows(m)

    def rmsnorm(self, x, gain, eps: float = RMS_EPS):
        x, gain = _float_pair(x, gain)
        gain = gain.reshape(-1)
        if x.ndim != 2 or gain.shape[0] != x.shape[1]:
            raise ShapeError(f"rmsnorm gain {gain.shape} does not match rows of width {x.shape}")
        return self._impl.rmsnorm(x, gain, float(eps))

    def rope_apply(self, x, positions, head_dim: int | None = None, base: float = ROPE_BASE):
        (x,) = _float_pair(x)
        if x.ndim != 2:
            raise ShapeError(f"rope_apply expects a matrix, got shape {x.shape}")
        head_dim = x.shape[1] if head_dim is None else head_dim
        if head_dim % 2:
            raise ConfigError(f"rotary embedding needs an even head dim, got {head_dim}")
        if head_dim == 0 or x.shape[1] % head_dim:
            raise ShapeError(f"width {x.shape[1]} is not a multiple of head dim {head_dim}")
        pos = np.ascontiguousarray(positions, dtype=np.int64)
        if pos.shape != (x.shape[0],):
            raise ShapeError(f"{pos.shape[0]} positions for {x.shape[0]} rows")
        return self._impl.rope_apply(x, pos, int(head_dim), float(base))

    def attention(self, q, k, v, q_pos, k_pos, scale: float | None = None):
        """Causal attention over (heads, rows, head_dim) arrays, masked by position."""
        q, k, v = _float_pair(q, k, v)
        if q.ndim != 3 or k.shape != v.shape or k.ndim != 3 or q.shape[0] != k.shape[0] \
                or q.shape[2] != k.shape[2]:
            raise ShapeError(f"attention shapes q={q.shape} k={k.shape} v={v.shape}")
        qp = np.ascontiguousarray(q_pos, dtype=np.int64)
        kp = np.ascontiguousarray(k_pos, dtype=np.int64)
        if qp.shape != (q.shape[1],) or kp.shape != (k.shape[1],):
            raise ShapeError("position arrays do not match query/key counts")
        if q.shape[1] and (k.shape[1] == 0 or kp.min() > qp.min()):
            raise PreconditionError("a query has no visible key entries")
        if scale is None:
            scale = 1.0 / np.sqrt(q.shape[2])
        return self._impl.attention(q, k, v, qp, kp, float(scale))


_default = Kernels()
BACKEND = _default.name


def kernels(backend: str | None = None) -> Kernels:
    return _default if backend is None else Kernels(backend)


def matmul(a, b):
    return _default.matmul(a, b)


def softmax_rows(m):
    return _default.softmax_rows(m)


def rmsnorm(x, gain, eps: float = RMS_EPS):
    return _default.rmsnorm(x, gain, eps)


def rope_apply(x, positions, head_dim: int | None = None, base: float = ROPE_BASE):
    return _default.rope_apply(x, positions, head_dim, base)


def attention(q, k, v, q_pos, k_pos, scale: float | None = None):
    return _default.attention(q, k, v, q_pos, k_pos, scale)


def rng(seed: int) -> np.random.Generator:
    """Seeded generator; seeds are unsigned 64-bit."""
    if not 0 <= int(seed) < 2**64:
        raise ConfigError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.PCG64(int(seed)))


def gaussian(gen: np.random.Generator, shape, std: float = 0.02, dtype=COMPUTE_DTYPE):
    return (gen.standard_normal(shape) * std).astype(dtype)
