"""Chunked prefill under a bounded working window with selective attention.

Each chunk holds whole L1 groups. Before a chunk runs, the live view is pruned
so that view + chunk fits in the window: the oldest L2 entries go first, L1
entries are never dropped. Everything produced is kept in the returned cache;
pruning only narrows what later chunks can attend to.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, PreconditionError, WindowOverflowError
from .model import KVView, LayerKV, TinyModel, forward_logits
from .nested_cache import BiLayerCache, NestedSequence, decompose, interleave


def _fits(window: int, chunk: int, l: int) -> bool:
    return window >= chunk + l + 1 and window >= chunk + chunk // l + 1


@dataclass(frozen=True)
class PrefillConfig:
    """``chunk`` counts L2 tokens per chunk and must be a multiple of ``interval``.

    Left unset it defaults to ``64 * interval``, shrunk to the largest multiple of
    ``interval`` whose nested footprint fits in half the window.
    """

    window: int = 32768
    interval: int = 16
    chunk: int | None = None

    def __post_init__(self):
        if self.interval < 1:
            raise ConfigError(f"interval must be >= 1, got {self.interval}")
        l = self.interval
        if self.chunk is None:
            c = 64 * l
            if not _fits(self.window, c, l):
                c = (self.window // 2) // (l + 1) * l
            object.__setattr__(self, "chunk", max(c, l))
        if self.chunk < 1 or self.chunk % l:
            raise ConfigError(f"chunk {self.chunk} is not a positive multiple of interval {l}")
        if not _fits(self.window, self.chunk, l):
            raise ConfigError(
                f"window {self.window} too small for chunk {self.chunk} at interval {l}; "
                f"need >= {max(self.chunk + l + 1, self.chunk + self.chunk // l + 1)}")

    @property
    def chunk_items(self) -> int:
        return self.chunk + self.chunk // self.interval


@dataclass
class PrunedView:
    indices: np.ndarray     # entry indices into the produced stream, increasing
    is_l1: np.ndarray
    budget: int

    def __len__(self) -> int:
        return self.indices.size


def prune_view(indices, is_l1, budget: int) -> PrunedView:
    """Drop the oldest L2 entries until at most ``budget`` remain."""
    indices = np.asarray(indices, np.int64)
    is_l1 = np.asarray(is_l1, bool)
    excess = indices.size - budget
    if excess <= 0:
        return PrunedView(indices, is_l1, budget)
    n_l1 = int(is_l1.sum())
    if n_l1 > budget:
        raise WindowOverflowError(
            f"{n_l1} retained L1 entries exceed the budget of {budget}; "
            "use a larger working window or a larger L1/L2 interval")
    drop = np.flatnonzero(~is_l1)[:excess]
    keep = np.ones(indices.size, bool)
    keep[drop] = False
    return PrunedView(indices[keep], is_l1[keep], budget)


def schedule(seq: NestedSequence, cfg: PrefillConfig):
    """Yield (start, stop, view) per chunk: items [start, stop) attend to ``view``
    plus themselves causally."""
    if seq.interval != cfg.interval:
        raise ConfigError(f"sequence interval {seq.interval} != config interval {cfg.interval}")
    total = len(seq)
    view = np.zeros(0, np.int64)
    for start in range(0, total, cfg.chunk_items):
        stop = min(start + cfg.chunk_items, total)
        pruned = prune_view(view, seq.is_l1[view], cfg.window - (stop - start))
        yield start, stop, pruned
        view = np.concatenate([pruned.indices, np.arange(start, stop)])


@dataclass
class PrefillResult:
    cache: BiLayerCache
    peak_view: int
    steps: int
    view_sizes: list[int] = field(default_factory=list)
    logits: np.ndarray | None = None   # (n + m, vocab) when requested


def run_prefill(model: TinyModel, tokens, cfg: PrefillConfig, keep_logits: bool = False,
                nested: NestedSequence | None = None) -> PrefillResult:
    seq = nested if nested is not None else interleave(tokens, cfg.interval)
    if len(seq) == 0:
        raise PreconditionError("nothing to prefill")
    mc = model.config
    keys = [np.zeros((mc.n_heads, 0, mc.head_dim), model.dtype) for _ in range(mc.n_layers)]
    values = [k.copy() for k in keys]
    sizes, logit_rows = [], []
    for start, stop, pruned in schedule(seq, cfg):
        idx = pruned.indices
        view = KVView(LayerKV(i, keys[i][:, idx], values[i][:, idx], seq.is_l1[idx],
                              seq.positions[idx]) for i in range(mc.n_layers))
        logits = forward_logits(model, view, seq.token_ids[start:stop], seq.is_l1[start:stop],
                                seq.positions[start:stop])
        sizes.append(len(view[0]))
        for i, kv in enumerate(view):
            keys[i] = np.concatenate([keys[i], kv.keys[:, len(idx):]], axis=1)
            values[i] = np.concatenate([values[i], kv.values[:, len(idx):]], axis=1)
        if keep_logits:
            logit_rows.append(logits)
    nested_kv = [LayerKV(i, keys[i], values[i], seq.is_l1, seq.positions)
                 for i in range(mc.n_layers)]
    return PrefillResult(
        cache=decompose(nested_kv, cfg.interval),
        peak_view=max(sizes),
        steps=len(sizes),
        view_sizes=sizes,
        logits=np.concatenate(logit_rows) if keep_logits else None,
    )


def prefill(model: TinyModel, tokens, cfg: PrefillConfig) -> BiLayerCache:
    return run_prefill(model, tokens, cfg).cache


def full_attention_kv(model: TinyModel, seq: NestedSequence) -> KVView:
    """Unchunked, unpruned pass over the whole nested sequence."""
    view = KVView.empty(model.config, model.dtype)
    forward_logits(model, view, seq.token_ids, seq.is_l1, seq.positions)
    return view
