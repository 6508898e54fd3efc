"""Query-guided refilling of the L1 cache and greedy answer decoding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .errors import ConfigError, PreconditionError
from .model import KVView, TinyModel, _split_heads, forward_logits, run_layers
from .nested_cache import BiLayerCache, recompose, recompose_layer


@dataclass(frozen=True)
class RefillConfig:
    max_refill: int = 4096   # eta
    window: int = 32768
    interval: int = 16

    def __post_init__(self):
        if self.max_refill < 0:
            raise ConfigError(f"max_refill must be >= 0, got {self.max_refill}")
        if self.interval < 1:
            raise ConfigError(f"interval must be >= 1, got {self.interval}")


@dataclass(frozen=True)
class RefillPlan:
    selected: tuple[tuple[int, ...], ...]   # per layer, ascending
    k: int

    def refill_entries(self, cache: BiLayerCache) -> int:
        ranges = cache.proxy_map
        return sum(ranges[i][1] - ranges[i][0] for sel in self.selected for i in sel)


def compute_k(cfg: RefillConfig, m: int) -> int:
    """Number of L1 groups to refill: floor(min(W - m, eta) / l), clamped at 0."""
    budget = min(cfg.window - m, cfg.max_refill)
    return max(0, budget) // cfg.interval


def query_states(model: TinyModel, cache: BiLayerCache, query_tokens) -> list[np.ndarray]:
    """Per-layer normed hidden states of the query from an L1-only pass,
    positioned right after the context."""
    query_tokens = np.asarray(query_tokens, np.int64).reshape(-1)
    if query_tokens.size == 0:
        raise PreconditionError("empty query")
    if cache.m < 1:
        raise PreconditionError("cache has no L1 entries")
    view = recompose(cache, [])
    states: list[np.ndarray] = []
    run_layers(model, view, query_tokens,
               positions=np.arange(query_tokens.size) + cache.total_len, capture=states)
    return states


def scores_from_queries(q: np.ndarray, l1_keys: np.ndarray) -> np.ndarray:
    """Mean over heads and query rows of softmax(q k^T / sqrt(d)) over the L1 keys.

    ``q`` is (heads, t, head_dim), ``l1_keys`` is (heads, m, head_dim).
    """
    h, t, d = q.shape
    logits = np.concatenate([nk.matmul(q[i], l1_keys[i].T) for i in range(h)]) / np.sqrt(d)
    probs = nk.softmax_rows(logits)            # (h * t, m)
    return probs.astype(np.float64).mean(axis=0)


def score_layer_states(model: TinyModel, layer: int, cache: BiLayerCache,
                       states: np.ndarray) -> np.ndarray:
    cfg = model.config
    positions = np.arange(states.shape[0]) + cache.total_len
    q = nk.matmul(states, model.layer(layer, "wq"))   # queries are ordinary text
    q = nk.rope_apply(q, positions, cfg.head_dim, cfg.rope_base)
    return scores_from_queries(_split_heads(q, cfg.n_heads), cache.l1_keys[layer])


def score_all_layers(model: TinyModel, cache: BiLayerCache, query_tokens) -> list[np.ndarray]:
    states = query_states(model, cache, query_tokens)
    return [score_layer_states(model, i, cache, s) for i, s in enumerate(states)]


def score_l1(model: TinyModel, layer: int, cache: BiLayerCache, query_tokens) -> np.ndarray:
    return score_all_layers(model, cache, query_tokens)[layer]


def select_indices(scores, k: int) -> tuple[int, ...]:
    """Top-k indices by score, ties to the lower index, returned ascending."""
    if k < 0:
        raise ConfigError(f"k must be >= 0, got {k}")
    scores = np.asarray(scores, np.float64)
    order = np.argsort(-scores, kind="stable")
    return tuple(sorted(int(i) for i in order[:k]))


def plan_refill(model: TinyModel, cache: BiLayerCache, query_tokens, cfg: RefillConfig) -> RefillPlan:
    k = compute_k(cfg, cache.m)
    if k == 0:
        return RefillPlan(tuple(() for _ in range(cache.n_layers)), 0)
    if k >= cache.m:
        everything = tuple(range(cache.m))
        return RefillPlan(tuple(everything for _ in range(cache.n_layers)), k)
    scores = score_all_layers(model, cache, query_tokens)
    return RefillPlan(tuple(select_indices(s, k) for s in scores), k)


def refill(cache: BiLayerCache, plan: RefillPlan) -> KVView:
    if len(plan.selected) != cache.n_layers:
        raise PreconditionError(f"plan covers {len(plan.selected)} layers, cache has {cache.n_layers}")
    return KVView(recompose_layer(cache, i, sel) for i, sel in enumerate(plan.selected))


def decode(model: TinyModel, view: KVView, query_tokens, max_new: int,
           eos_id: int | None = None, start_position: int | None = None) -> list[int]:
    """Greedy decoding after feeding the query; ``view`` itself is not modified."""
    if max_new <= 0:
        return []
    query_tokens = np.asarray(query_tokens, np.int64).reshape(-1)
    if query_tokens.size == 0:
        raise PreconditionError("empty query")
    view = view.copy()
    pos = view.next_position if start_position is None else int(start_position)
    logits = forward_logits(model, view, query_tokens,
                            positions=np.arange(query_tokens.size) + pos)
    pos += query_tokens.size
    out: list[int] = []
    while True:
        tok = int(np.argmax(logits[-1]))      # first maximum = lowest id on ties
        out.append(tok)
        if len(out) >= max_new or tok == eos_id:
            return out
        logits = forward_logits(model, view, [tok], positions=[pos])
        pos += 1
