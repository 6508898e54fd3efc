"""Tiny decoder-only transformer with a second (L1) projection family.

Every token carries a kind flag. L2 tokens (ordinary text) are embedded from
the token table and projected with the original W_Q/W_K/W_V; L1 tokens share
one learned embedding vector and are projected with W_Q^L1/W_K^L1/W_V^L1.
Everything else (W_O, FFN, norms, output head) is shared.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numkernel as nk
from .errors import ConfigError, FormatError, ChecksumError, PreconditionError

TRAINABLE_FAMILIES = ("wq_l1", "wk_l1", "wv_l1", "l1_embed")
LAYER_PARAMS = ("attn_norm", "wq", "wk", "wv", "wo", "wq_l1", "wk_l1", "wv_l1",
                "ffn_norm", "w_up", "w_down")
NORM_FAMILIES = ("attn_norm", "ffn_norm", "final_norm")

CHECKPOINT_MAGIC = b"ACRE"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sI5IQd")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 2
    head_dim: int = 8
    vocab_size: int = 64
    ffn_dim: int = 32
    seed: int = 0
    rope_base: float = nk.ROPE_BASE

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "head_dim", "vocab_size", "ffn_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.head_dim % 2:
            raise ConfigError(f"head_dim must be even for rotary embedding, got {self.head_dim}")
        if self.vocab_size < 4:
            raise ConfigError("vocab_size must leave room for the two reserved ids")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed out of u64 range: {self.seed}")

    @property
    def hidden_dim(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def l1_token_id(self) -> int:
        return self.vocab_size - 1

    @property
    def eos_id(self) -> int:
        return self.vocab_size - 2

    @property
    def n_text_ids(self) -> int:
        """Ids available to ordinary text (everything but the reserved two)."""
        return self.vocab_size - 2


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in fixed declaration order."""
    d, f, v = cfg.hidden_dim, cfg.ffn_dim, cfg.vocab_size
    shapes = {"embed": (v, d), "l1_embed": (d,)}
    per_layer = {"attn_norm": (d,), "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
                 "wq_l1": (d, d), "wk_l1": (d, d), "wv_l1": (d, d),
                 "ffn_norm": (d,), "w_up": (d, f), "w_down": (f, d)}
    for i in range(cfg.n_layers):
        for name in LAYER_PARAMS:
            shapes[f"layers.{i}.{name}"] = per_layer[name]
    shapes["final_norm"] = (d,)
    shapes["head"] = (d, v)
    return shapes


def family(name: str) -> str:
    return name.rsplit(".", 1)[-1]


def is_trainable(name: str) -> bool:
    return family(name) in TRAINABLE_FAMILIES


@dataclass
class TinyModel:
    config: ModelConfig
    params: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def layer(self, i: int, name: str) -> np.ndarray:
        return self.params[f"layers.{i}.{name}"]

    @property
    def frozen_mask(self) -> dict[str, bool]:
        return {name: not is_trainable(name) for name in self.params}

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    @property
    def dtype(self):
        return self.params["embed"].dtype

    def copy(self) -> "TinyModel":
        return TinyModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "TinyModel":
        return TinyModel(self.config, {k: v.astype(dtype) for k, v in self.params.items()})


def init_model(cfg: ModelConfig) -> TinyModel:
    gen = nk.rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        # draw for every tensor so the stream layout does not depend on init choices
        w = nk.gaussian(gen, shape, 0.02)
        params[name] = np.ones(shape, nk.COMPUTE_DTYPE) if family(name) in NORM_FAMILIES else w
    return TinyModel(cfg, params)


def expected_param_count(cfg: ModelConfig) -> int:
    d, f, v, n = cfg.hidden_dim, cfg.ffn_dim, cfg.vocab_size, cfg.n_layers
    return v * d + d + n * (2 * d + 7 * d * d + 2 * d * f) + d + d * v


# --------------------------------------------------------------------------- KV

@dataclass
class LayerKV:
    """Per-layer KV entries, keys/values shaped (heads, entries, head_dim)."""

    layer: int
    keys: np.ndarray
    values: np.ndarray
    is_l1: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))
    positions: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    @classmethod
    def empty(cls, cfg: ModelConfig, layer: int, dtype=nk.COMPUTE_DTYPE) -> "LayerKV":
        z = np.zeros((cfg.n_heads, 0, cfg.head_dim), dtype)
        return cls(layer, z, z.copy())

    def __len__(self) -> int:
        return self.keys.shape[1]

    def append(self, keys, values, is_l1, positions) -> None:
        self.keys = np.concatenate([self.keys, keys], axis=1)
        self.values = np.concatenate([self.values, values], axis=1)
        self.is_l1 = np.concatenate([self.is_l1, np.asarray(is_l1, bool)])
        self.positions = np.concatenate([self.positions, np.asarray(positions, np.int64)])

    def take(self, idx) -> "LayerKV":
        idx = np.asarray(idx, np.int64)
        return LayerKV(self.layer, self.keys[:, idx], self.values[:, idx],
                       self.is_l1[idx], self.positions[idx])

    def copy(self) -> "LayerKV":
        return LayerKV(self.layer, self.keys.copy(), self.values.copy(),
                       self.is_l1.copy(), self.positions.copy())


class KVView(list):
    """One LayerKV per layer; layers may hold different entries after refilling."""

    @classmethod
    def empty(cls, cfg: ModelConfig, dtype=nk.COMPUTE_DTYPE) -> "KVView":
        return cls(LayerKV.empty(cfg, i, dtype) for i in range(cfg.n_layers))

    @property
    def next_position(self) -> int:
        last = [int(kv.positions[-1]) for kv in self if len(kv)]
        return max(last) + 1 if last else 0

    def copy(self) -> "KVView":
        return KVView(kv.copy() for kv in self)


# ---------------------------------------------------------------------- forward

def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    t, d = x.shape
    return np.ascontiguousarray(x.reshape(t, n_heads, d // n_heads).transpose(1, 0, 2))


def _merge_heads(x: np.ndarray) -> np.ndarray:
    h, t, hd = x.shape
    return np.ascontiguousarray(x.transpose(1, 0, 2).reshape(t, h * hd))


def embed(model: TinyModel, tokens, is_l1) -> np.ndarray:
    tokens = np.asarray(tokens, np.int64)
    is_l1 = np.asarray(is_l1, bool)
    # L1 rows ignore their id (interleaved streams use a placeholder)
    tokens = np.where(is_l1, 0, tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= model.config.vocab_size):
        raise PreconditionError("token id outside the vocabulary")
    x = model["embed"][tokens]
    x[is_l1] = model["l1_embed"]
    return x


def _routed(model: TinyModel, layer: int, h: np.ndarray, is_l1: np.ndarray, name: str):
    """Row-wise projection: L1 rows through the L1 family, others through the original."""
    out = np.empty((h.shape[0], model.config.hidden_dim), h.dtype)
    l2 = ~is_l1
    if l2.any():
        out[l2] = nk.matmul(h[l2], model.layer(layer, name))
    if is_l1.any():
        out[is_l1] = nk.matmul(h[is_l1], model.layer(layer, name + "_l1"))
    return out


def project_qkv(model: TinyModel, layer: int, hidden, is_l1, positions):
    """Normed hidden rows -> (q, k, v), each (heads, rows, head_dim), rotary on q and k."""
    cfg = model.config
    hidden = np.asarray(hidden)
    is_l1 = np.asarray(is_l1, bool)
    if is_l1.shape != (hidden.shape[0],):
        raise PreconditionError(f"{is_l1.shape[0]} kind flags for {hidden.shape[0]} rows")
    q = _routed(model, layer, hidden, is_l1, "wq")
    k = _routed(model, layer, hidden, is_l1, "wk")
    v = _routed(model, layer, hidden, is_l1, "wv")
    q = nk.rope_apply(q, positions, cfg.head_dim, cfg.rope_base)
    k = nk.rope_apply(k, positions, cfg.head_dim, cfg.rope_base)
    return (_split_heads(q, cfg.n_heads), _split_heads(k, cfg.n_heads),
            _split_heads(v, cfg.n_heads))


def project_kv(model: TinyModel, layer: int, hidden, is_l1, positions):
    _, k, v = project_qkv(model, layer, hidden, is_l1, positions)
    return k, v


def attend(model: TinyModel, layer: int, queries, kv: LayerKV, query_positions) -> np.ndarray:
    """Scaled dot-product attention of (heads, rows, head_dim) queries over ``kv``,
    causal on nested positions, followed by the output projection."""
    queries = np.asarray(queries)
    if queries.shape[1] and len(kv) == 0:
        raise PreconditionError("attention over an empty cache")
    if len(kv) > 1 and np.any(np.diff(kv.positions) <= 0):
        raise PreconditionError("cache entry positions are not strictly increasing")
    out = nk.attention(queries, kv.keys, kv.values, query_positions, kv.positions)
    return nk.matmul(_merge_heads(out), model.layer(layer, "wo"))


def _silu(x):
    return x / (1.0 + np.exp(-x))


def run_layers(model: TinyModel, view: KVView, tokens, is_l1=None, positions=None,
               capture: list | None = None) -> np.ndarray:
    """Push new tokens through every layer, appending their KV to ``view``.

    Returns the final residual stream. When ``capture`` is a list, the normed
    attention input of each layer is appended to it (used for query scoring).
    """
    cfg = model.config
    tokens = np.asarray(tokens, np.int64).reshape(-1)
    t = tokens.shape[0]
    is_l1 = np.zeros(t, bool) if is_l1 is None else np.asarray(is_l1, bool)
    if positions is None:
        positions = np.arange(t, dtype=np.int64) + view.next_position
    positions = np.asarray(positions, np.int64)
    if t == 0:
        return np.zeros((0, cfg.hidden_dim), model.dtype)
    if np.any(np.diff(positions) <= 0):
        raise PreconditionError("new token positions must be strictly increasing")
    if positions[0] < view.next_position:
        raise PreconditionError(
            f"new positions start at {positions[0]} but the cache reaches {view.next_position - 1}")
    if len(view) != cfg.n_layers:
        raise PreconditionError(f"view has {len(view)} layers, model has {cfg.n_layers}")
    x = embed(model, tokens, is_l1)
    for i in range(cfg.n_layers):
        h = nk.rmsnorm(x, model.layer(i, "attn_norm"))
        if capture is not None:
            capture.append(h)
        q, k, v = project_qkv(model, i, h, is_l1, positions)
        view[i].append(k, v, is_l1, positions)
        x = x + attend(model, i, q, view[i], positions)
        h = nk.rmsnorm(x, model.layer(i, "ffn_norm"))
        x = x + nk.matmul(_silu(nk.matmul(h, model.layer(i, "w_up"))), model.layer(i, "w_down"))
    return x


def logits_from_hidden(model: TinyModel, x: np.ndarray) -> np.ndarray:
    return nk.matmul(nk.rmsnorm(x, model["final_norm"]), model["head"])


def forward_logits(model: TinyModel, view: KVView, tokens, is_l1=None, positions=None) -> np.ndarray:
    """Logits (rows, vocab) for ``tokens``; their KV entries are appended to ``view``."""
    return logits_from_hidden(model, run_layers(model, view, tokens, is_l1, positions))


# ------------------------------------------------------------------- checkpoint

def model_to_bytes(model: TinyModel) -> bytes:
    cfg = model.config
    header = _CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, cfg.n_layers, cfg.n_heads,
                               cfg.head_dim, cfg.vocab_size, cfg.ffn_dim, cfg.seed, cfg.rope_base)
    blobs = [np.ascontiguousarray(model.params[name], "<f4").tobytes()
             for name in param_shapes(cfg)]
    body = header + b"".join(blobs)
    return body + struct.pack("<I", zlib.crc32(body))


def model_from_bytes(data: bytes) -> TinyModel:
    if len(data) < _CKPT_HEADER.size:
        raise FormatError("truncated checkpoint header", len(data))
    magic, version, *dims, seed, rope_base = _CKPT_HEADER.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    try:
        cfg = ModelConfig(*dims, seed=seed, rope_base=rope_base)
    except ConfigError as exc:
        raise FormatError(f"invalid config in header: {exc}", 8) from exc
    shapes = param_shapes(cfg)
    expected = _CKPT_HEADER.size + 4 * sum(int(np.prod(s)) for s in shapes.values()) + 4
    if len(data) != expected:
        raise FormatError(f"checkpoint is {len(data)} bytes, expected {expected}",
                          min(len(data), expected))
    crc_at = expected - 4
    (crc,) = struct.unpack_from("<I", data, crc_at)
    if zlib.crc32(data[:crc_at]) != crc:
        raise ChecksumError("checkpoint CRC32 mismatch", crc_at)
    params, off = {}, _CKPT_HEADER.size
    for name, shape in shapes.items():
        count = int(np.prod(shape))
        params[name] = np.frombuffer(data, "<f4", count, off).astype(np.float32).reshape(shape)
        off += 4 * count
    return TinyModel(cfg, params)


def save_model(model: TinyModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> TinyModel:
    return model_from_bytes(Path(path).read_bytes())
