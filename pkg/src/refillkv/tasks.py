"""Seeded synthetic data: Markov-chain token streams and a key-value recall task.

The recall task also ships a small pretraining routine that turns a randomly
initialised model into a frozen base that can answer recall queries with full
attention. The L1 family is left untouched by it; only the original weights
are fitted, mirroring a pretrained network that the L1 machinery is added to.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .backprop import Segment, loss_and_grads
from .errors import ConfigError
from .model import ModelConfig, TinyModel, init_model, is_trainable


def markov_corpus(seed: int, n: int, n_symbols: int, branching: int = 3) -> np.ndarray:
    """A token stream from a random sparse Markov chain over ``n_symbols`` states.

    Each state moves to one of ``branching`` successors with Dirichlet weights,
    so the stream is far more predictable than uniform noise.
    """
    if n < 1 or n_symbols < 2:
        raise ConfigError("markov_corpus needs n >= 1 and n_symbols >= 2")
    branching = min(branching, n_symbols)
    gen = nk.rng(seed)
    succ = np.stack([gen.choice(n_symbols, branching, replace=False) for _ in range(n_symbols)])
    probs = gen.dirichlet(np.ones(branching), size=n_symbols)
    out = np.empty(n, np.int64)
    state = int(gen.integers(n_symbols))
    draws = gen.random(n)
    for i in range(n):
        out[i] = state
        j = int(np.searchsorted(np.cumsum(probs[state]), draws[i], side="right"))
        state = int(succ[state, min(j, branching - 1)])
    return out


def markov_sequences(seed: int, count: int, length: int, n_symbols: int) -> list[np.ndarray]:
    """``count`` windows of one long stream (same chain for all of them)."""
    stream = markov_corpus(seed, count * length, n_symbols)
    return [stream[i * length:(i + 1) * length] for i in range(count)]


# ------------------------------------------------------------- recall task

@dataclass(frozen=True)
class RecallExample:
    context: np.ndarray
    query: np.ndarray     # one key token
    answer: np.ndarray    # one value token
    group: int            # L1 group holding the queried pair


@dataclass(frozen=True)
class RecallTask:
    """Key-value recall over a context of ``n_groups`` groups of ``interval`` tokens.

    Every group holds ``pairs_per_group`` pair tokens, each one id naming a
    (key, value) combination, at random offsets among filler tokens. The query
    is a bare key id; the answer is the matching value id.

    Vocabulary layout: keys, values, pair tokens, fillers, then the two
    reserved ids.
    """

    n_keys: int = 8
    n_values: int = 8
    n_fillers: int = 16
    interval: int = 8
    n_groups: int = 4
    pairs_per_group: int = 2

    def __post_init__(self):
        if self.pairs_per_group > self.interval:
            raise ConfigError("more pairs per group than slots")
        if self.n_groups * self.pairs_per_group > self.n_keys:
            raise ConfigError("not enough distinct keys for every pair")

    @property
    def context_len(self) -> int:
        return self.interval * self.n_groups

    @property
    def pair_base(self) -> int:
        return self.n_keys + self.n_values

    @property
    def filler_base(self) -> int:
        return self.pair_base + self.n_keys * self.n_values

    @property
    def vocab_size(self) -> int:
        return self.filler_base + self.n_fillers + 2

    def pair_token(self, key: int, value: int) -> int:
        return self.pair_base + key * self.n_values + value

    def key_of(self, tokens) -> np.ndarray:
        """Key id carried by each token, -1 for anything that is not a pair token."""
        tokens = np.asarray(tokens)
        is_pair = (tokens >= self.pair_base) & (tokens < self.filler_base)
        return np.where(is_pair, (tokens - self.pair_base) // self.n_values, -1)

    def _context(self, gen):
        n_pairs = self.n_groups * self.pairs_per_group
        keys = gen.permutation(self.n_keys)[:n_pairs]
        values = gen.integers(0, self.n_values, n_pairs)
        ctx = gen.integers(self.filler_base, self.filler_base + self.n_fillers, self.context_len)
        for g in range(self.n_groups):
            offs = gen.choice(self.interval, self.pairs_per_group, replace=False)
            for j, off in enumerate(offs):
                p = g * self.pairs_per_group + j
                ctx[g * self.interval + off] = self.pair_token(keys[p], values[p])
        return ctx.astype(np.int64), keys, values

    def sample(self, gen) -> RecallExample:
        ctx, keys, values = self._context(gen)
        a = int(gen.integers(keys.size))
        return RecallExample(ctx, np.array([keys[a]], np.int64),
                             np.array([self.n_keys + values[a]], np.int64),
                             a // self.pairs_per_group)

    def examples(self, seed: int, count: int) -> list[RecallExample]:
        gen = nk.rng(seed)
        return [self.sample(gen) for _ in range(count)]

    def pretrain_item(self, gen, n_queries: int, n_layers: int, local_first_layer: bool):
        """Plain-sequence sample: context followed by ``n_queries`` key/value turns.

        Layer 0 never lets query rows see the context, which forces retrieval
        into a deeper layer (the first layer's L1 keys carry no content, so
        refilling can only help where lookup happens above it).
        ``local_first_layer`` additionally limits every row to itself at layer 0,
        a warm-up that makes the deeper lookup easy to find.
        """
        ctx, keys, values = self._context(gen)
        asks = gen.choice(keys.size, n_queries)
        tail = np.stack([keys[asks], self.n_keys + values[asks]], axis=1).reshape(-1)
        tokens = np.concatenate([ctx, tail]).astype(np.int64)
        n, t = ctx.size, tokens.size
        targets = np.zeros(t, np.int64)
        targets[:-1] = tokens[1:]
        weights = np.zeros(t)
        weights[n::2] = 1.0
        causal = np.tril(np.ones((t, t), bool))
        first = np.eye(t, dtype=bool) if local_first_layer else causal.copy()
        first[n:, :n] = False
        masks = np.stack([first] + [causal] * (n_layers - 1))
        return tokens, targets, weights, masks


def _adam(params, grads, state, lr, step, b1=0.9, b2=0.999, eps=1e-8):
    for name, g in grads.items():
        m, v = state.get(name, (0.0, 0.0))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state[name] = (m, v)
        upd = lr * (m / (1 - b1 ** step)) / (np.sqrt(v / (1 - b2 ** step)) + eps)
        params[name] = (params[name] - upd).astype(params[name].dtype)


def recall_model_config(task: RecallTask, seed: int = 0) -> ModelConfig:
    return ModelConfig(n_layers=2, n_heads=1, head_dim=32, vocab_size=task.vocab_size,
                       ffn_dim=64, seed=seed)


def pretrain_recall_base(task: RecallTask, config: ModelConfig | None = None, steps: int = 1600,
                         warmup: int = 1000, batch: int = 16, lr: float = 1e-3, n_queries: int = 4,
                         seed: int = 0, on_step=None) -> TinyModel:
    """Fit the original weights to the recall task (Adam, full attention, no L1 tokens).

    This stands in for the pretrained network and is separate from the L1
    training stages, which use plain SGD on the L1 family only.
    """
    config = config or recall_model_config(task, seed)
    if config.vocab_size < task.vocab_size:
        raise ConfigError(f"vocab_size {config.vocab_size} < task vocabulary {task.vocab_size}")
    model = init_model(config)
    params = model.params
    frozen = {n for n in params if not is_trainable(n)}
    gen = nk.rng(seed)
    state: dict = {}
    for step in range(1, steps + 1):
        rows = [task.pretrain_item(gen, n_queries, config.n_layers, step <= warmup)
                for _ in range(batch)]
        tokens, targets, weights, masks = (np.stack(c) for c in zip(*rows))
        t = tokens.shape[1]
        seg = Segment(tokens, np.zeros_like(tokens, bool), np.tile(np.arange(t), (batch, 1)),
                      np.moveaxis(masks, 1, 0), targets, weights)
        loss, grads = loss_and_grads(params, config, [seg], frozen)
        _adam(params, {n: grads[n] for n in frozen}, state, lr, step)
        if on_step is not None:
            on_step(step, loss)
    return model


def selection_hits(task: RecallTask, example: RecallExample, selected) -> bool:
    """Whether any selected L1 group proxies the pair the query asks about."""
    return example.group in set(int(i) for i in selected)
