"""Nested token streams and the bi-layer (L1 hot / L2 cold) KV cache.

Layout conventions (0-based): with interval ``l`` and ``n`` L2 tokens there are
``m = ceil(n / l)`` L1 tokens. L2 token ``j`` sits at nested position
``j + j // l``; L1 token ``i`` closes group ``i`` and sits at
``min((i + 1) * l, n) + i``. L1 entry ``i`` proxies L2 range
``[i * l, min((i + 1) * l, n))``.
"""
from __future__ import annotations

import math
import struct
import threading
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (ChecksumError, ConfigError, FormatError, PreconditionError,
                     SelectionError, StructureError)
from .model import KVView, LayerKV

L1_PLACEHOLDER = -1

CACHE_MAGIC = b"ACKV"
CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sIIQQIII")


def n_groups(n: int, l: int) -> int:
    return math.ceil(n / l)


def l2_positions(n: int, l: int) -> np.ndarray:
    j = np.arange(n, dtype=np.int64)
    return j + j // l


def l1_positions(n: int, l: int) -> np.ndarray:
    i = np.arange(n_groups(n, l), dtype=np.int64)
    return np.minimum((i + 1) * l, n) + i


def proxy_ranges(n: int, l: int) -> list[tuple[int, int]]:
    return [(i * l, min((i + 1) * l, n)) for i in range(n_groups(n, l))]


@dataclass(frozen=True)
class NestedSequence:
    token_ids: np.ndarray   # L1 items carry L1_PLACEHOLDER
    is_l1: np.ndarray
    positions: np.ndarray
    interval: int
    n: int
    m: int

    def __len__(self) -> int:
        return self.n + self.m

    @property
    def l2_tokens(self) -> np.ndarray:
        return self.token_ids[~self.is_l1]


def interleave(tokens, l: int) -> NestedSequence:
    """Insert an L1 item after every ``l`` tokens and after a trailing partial group."""
    if int(l) < 1:
        raise ConfigError(f"L1/L2 interval must be >= 1, got {l}")
    tokens = np.asarray(tokens, np.int64).reshape(-1)
    n = tokens.shape[0]
    if n == 0:
        raise PreconditionError("cannot interleave an empty token list")
    m = n_groups(n, l)
    ids = np.full(n + m, L1_PLACEHOLDER, np.int64)
    is_l1 = np.ones(n + m, bool)
    pos2 = l2_positions(n, l)
    ids[pos2] = tokens
    is_l1[pos2] = False
    return NestedSequence(ids, is_l1, np.arange(n + m, dtype=np.int64), int(l), n, m)


def check_kind_pattern(is_l1, l: int) -> tuple[int, int]:
    """Validate an L1/L2 flag sequence; returns (n, m) or raises StructureError."""
    is_l1 = np.asarray(is_l1, bool)
    if is_l1.size == 0:
        raise StructureError("empty nested cache", 0)
    run = 0
    for idx, flag in enumerate(is_l1):
        if flag:
            if run == 0:
                raise StructureError("L1 entry without any preceding L2 entries", idx)
            if run < l and idx != is_l1.size - 1:
                raise StructureError(f"L1 entry closes a group of {run} < {l} before the end", idx)
            run = 0
        else:
            run += 1
            if run > l:
                raise StructureError(f"more than {l} consecutive L2 entries", idx)
    if run:
        raise StructureError("trailing L2 entries have no L1 proxy", is_l1.size - run)
    m = int(is_l1.sum())
    return is_l1.size - m, m


class TieredStore:
    """Hot tier (L1, always resident) and cold tier (L2, access counted).

    Arrays are shaped (layers, heads, entries, head_dim) and read-only.
    """

    def __init__(self, hot_keys, hot_values, cold_keys, cold_values):
        self._hot = (hot_keys, hot_values)
        self._cold = (cold_keys, cold_values)
        for a in (*self._hot, *self._cold):
            a.flags.writeable = False
        self._lock = threading.Lock()
        self.cold_reads = 0
        self.cold_bytes_read = 0

    @property
    def hot_keys(self) -> np.ndarray:
        return self._hot[0]

    @property
    def hot_values(self) -> np.ndarray:
        return self._hot[1]

    def read_cold(self, layer: int, idx) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(idx, np.int64)
        keys = self._cold[0][layer][:, idx]
        values = self._cold[1][layer][:, idx]
        with self._lock:
            self.cold_reads += int(idx.size)
            self.cold_bytes_read += keys.nbytes + values.nbytes
        return keys, values

    def cold_arrays_uncounted(self) -> tuple[np.ndarray, np.ndarray]:
        """Bulk access for persistence; not a refill, so not counted."""
        return self._cold


class BiLayerCache:
    def __init__(self, interval: int, n: int, m: int, tiers: TieredStore):
        self.interval, self.n, self.m = int(interval), int(n), int(m)
        self.tiers = tiers
        if m != n_groups(n, interval):
            raise StructureError(f"m={m} but ceil(n/l)={n_groups(n, interval)}", 0)
        if tiers.hot_keys.shape[2] != m or tiers.cold_arrays_uncounted()[0].shape[2] != n:
            raise StructureError("tier entry counts do not match (m, n)", 0)

    @property
    def n_layers(self) -> int:
        return self.tiers.hot_keys.shape[0]

    @property
    def n_heads(self) -> int:
        return self.tiers.hot_keys.shape[1]

    @property
    def head_dim(self) -> int:
        return self.tiers.hot_keys.shape[3]

    @property
    def total_len(self) -> int:
        return self.n + self.m

    @property
    def l1_keys(self) -> np.ndarray:
        return self.tiers.hot_keys

    @property
    def l1_values(self) -> np.ndarray:
        return self.tiers.hot_values

    @property
    def proxy_map(self) -> list[tuple[int, int]]:
        return proxy_ranges(self.n, self.interval)

    @property
    def l1_positions(self) -> np.ndarray:
        return l1_positions(self.n, self.interval)

    @property
    def l2_positions(self) -> np.ndarray:
        return l2_positions(self.n, self.interval)

    @property
    def hot_entries(self) -> int:
        return self.m * self.n_layers * self.n_heads

    @property
    def cold_entries(self) -> int:
        return self.n * self.n_layers * self.n_heads

    def read_l2(self, layer: int, idx):
        return self.tiers.read_cold(layer, idx)

    def __eq__(self, other) -> bool:
        if not isinstance(other, BiLayerCache):
            return NotImplemented
        mine, theirs = self.tiers.cold_arrays_uncounted(), other.tiers.cold_arrays_uncounted()
        return ((self.interval, self.n, self.m) == (other.interval, other.n, other.m)
                and all(_bits_equal(a, b) for a, b in zip(
                    (self.l1_keys, self.l1_values, *mine),
                    (other.l1_keys, other.l1_values, *theirs))))

    __hash__ = None

    def __repr__(self):
        return (f"BiLayerCache(l={self.interval}, n={self.n}, m={self.m}, "
                f"layers={self.n_layers}, heads={self.n_heads}, head_dim={self.head_dim})")


def _bits_equal(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


def decompose(nested_kv, l: int) -> BiLayerCache:
    """Split per-layer nested KV into the L1 (hot) and L2 (cold) tiers."""
    nested_kv = list(nested_kv)
    if not nested_kv:
        raise PreconditionError("no layers to decompose")
    first = nested_kv[0]
    n, m = check_kind_pattern(first.is_l1, l)
    for kv in nested_kv:
        if len(kv) != n + m or not np.array_equal(kv.is_l1, first.is_l1):
            raise StructureError(f"layer {kv.layer} disagrees with layer 0 on entry kinds",
                                 _first_mismatch(kv.is_l1, first.is_l1))
        bad = np.flatnonzero(kv.positions != np.arange(n + m))
        if bad.size:
            raise StructureError("nested positions are not 0..n+m-1", int(bad[0]))
    l1 = first.is_l1
    hot_k = np.stack([kv.keys[:, l1] for kv in nested_kv])
    hot_v = np.stack([kv.values[:, l1] for kv in nested_kv])
    cold_k = np.stack([kv.keys[:, ~l1] for kv in nested_kv])
    cold_v = np.stack([kv.values[:, ~l1] for kv in nested_kv])
    return BiLayerCache(l, n, m, TieredStore(hot_k, hot_v, cold_k, cold_v))


def _first_mismatch(a, b) -> int:
    k = min(len(a), len(b))
    diff = np.flatnonzero(np.asarray(a[:k]) != np.asarray(b[:k]))
    return int(diff[0]) if diff.size else k


def _validate_selection(selected, m: int) -> list[int]:
    sel = [int(i) for i in selected]
    if len(set(sel)) != len(sel):
        raise SelectionError(f"duplicate L1 indices in selection {sel}")
    for i in sel:
        if not 0 <= i < m:
            raise SelectionError(f"L1 index {i} out of range [0, {m})")
    return sorted(sel)


def recompose_layer(cache: BiLayerCache, layer: int, selected) -> LayerKV:
    """L1 entries in order, with each selected group's L2 entries spliced in
    immediately before its (retained) L1 proxy."""
    chosen = set(_validate_selection(selected, cache.m))
    ranges = cache.proxy_map
    l2_idx = np.concatenate([np.arange(*ranges[i]) for i in sorted(chosen)]
                            + [np.zeros(0, np.int64)]).astype(np.int64)
    l2_k, l2_v = cache.read_l2(layer, l2_idx)
    pos = np.concatenate([cache.l2_positions[l2_idx], cache.l1_positions])
    is_l1 = np.concatenate([np.zeros(l2_idx.size, bool), np.ones(cache.m, bool)])
    keys = np.concatenate([l2_k, cache.l1_keys[layer]], axis=1)
    values = np.concatenate([l2_v, cache.l1_values[layer]], axis=1)
    order = np.argsort(pos, kind="stable")
    return LayerKV(layer, keys[:, order], values[:, order], is_l1[order], pos[order])


def recompose(cache: BiLayerCache, selected) -> KVView:
    """Same selection in every layer."""
    selected = list(selected)
    return KVView(recompose_layer(cache, i, selected) for i in range(cache.n_layers))


# ---------------------------------------------------------------- persistence

def serialize(cache: BiLayerCache) -> bytes:
    header = _CACHE_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, cache.interval, cache.m, cache.n,
                                cache.n_layers, cache.n_heads, cache.head_dim)
    cold_k, cold_v = cache.tiers.cold_arrays_uncounted()
    parts = [header]
    for i in range(cache.n_layers):
        for arr in (cache.l1_keys[i], cache.l1_values[i], cold_k[i], cold_v[i]):
            parts.append(np.ascontiguousarray(arr, "<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def deserialize(data: bytes) -> BiLayerCache:
    if len(data) < _CACHE_HEADER.size:
        raise FormatError("truncated cache header", len(data))
    magic, version, l, m, n, layers, heads, hd = _CACHE_HEADER.unpack_from(data, 0)
    if magic != CACHE_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != CACHE_VERSION:
        raise FormatError(f"unsupported cache version {version}", 4)
    if l < 1 or n < 1 or m != n_groups(n, l):
        raise FormatError(f"inconsistent header l={l} n={n} m={m}", 8)
    per_layer = 2 * heads * hd * (m + n)
    expected = _CACHE_HEADER.size + 4 * layers * per_layer + 4
    if len(data) != expected:
        raise FormatError(f"cache is {len(data)} bytes, expected {expected}",
                          min(len(data), expected))
    crc_at = expected - 4
    (crc,) = struct.unpack_from("<I", data, crc_at)
    if zlib.crc32(data[:crc_at]) != crc:
        raise ChecksumError("cache CRC32 mismatch", crc_at)
    off = _CACHE_HEADER.size
    blocks = {name: [] for name in ("hk", "hv", "ck", "cv")}
    for _ in range(layers):
        for name, rows in (("hk", m), ("hv", m), ("ck", n), ("cv", n)):
            count = heads * rows * hd
            arr = np.frombuffer(data, "<f4", count, off).astype(np.float32)
            blocks[name].append(arr.reshape(heads, rows, hd))
            off += 4 * count
    tiers = TieredStore(*(np.stack(blocks[k]) for k in ("hk", "hv", "ck", "cv")))
    return BiLayerCache(l, n, m, tiers)


def save_cache(cache: BiLayerCache, path) -> None:
    Path(path).write_bytes(serialize(cache))


def load_cache(path) -> BiLayerCache:
    return deserialize(Path(path).read_bytes())
