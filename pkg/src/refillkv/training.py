"""Stage-1 / stage-2 objectives, finite-difference gradient checks and SGD.

Only the L1 family (W_Q^L1, W_K^L1, W_V^L1, L1 embedding) is ever updated by
``train_steps``; original weights receive exact zero gradients.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import numkernel as nk
from .backprop import Segment, loss_and_grads, loss_only
from .errors import ConfigError, PreconditionError, TrainingError
from .model import TinyModel, is_trainable, family, TRAINABLE_FAMILIES
from .nested_cache import NestedSequence, interleave, proxy_ranges
from .prefill import PrefillConfig, run_prefill, schedule
from .refill import RefillConfig, plan_refill

STAGE1, STAGE2 = "stage1", "stage2"
L1_ONLY, REFILLED = "l1", "refilled"


@dataclass
class TrainBatch:
    """Stage-1 ``sequences`` and/or stage-2 ``qa`` triples (context, query, answer).

    ``intervals`` gives the L1/L2 interval per sample (stage-1 samples first);
    when empty every sample uses the prefill config's interval.
    """

    sequences: list = field(default_factory=list)
    qa: list = field(default_factory=list)
    intervals: list = field(default_factory=list)

    def interval_for(self, idx: int, default: int) -> int:
        return int(self.intervals[idx]) if self.intervals else default


def _config_for(cfg: PrefillConfig, l: int) -> PrefillConfig:
    if l == cfg.interval:
        return cfg
    chunk = cfg.chunk if cfg.chunk % l == 0 else None
    return PrefillConfig(window=cfg.window, interval=l, chunk=chunk)


def selective_mask(seq: NestedSequence, cfg: PrefillConfig) -> np.ndarray:
    """(N, N) mask: row t may attend to column s under chunked selective prefill."""
    total = len(seq)
    mask = np.zeros((total, total), bool)
    for start, stop, pruned in schedule(seq, cfg):
        mask[start:stop, pruned.indices] = True
        mask[start:stop, start:stop] = np.tril(np.ones((stop - start,) * 2, bool))
    return mask


def _batch(items: list[dict]) -> Segment:
    stack = lambda key: np.stack([it[key] for it in items])
    masks = np.stack([it["mask"] for it in items], axis=-3)
    return Segment(stack("tokens"), stack("is_l1"), stack("positions"), masks,
                   stack("targets"), stack("weights"))


def _group(items: list[dict]) -> list[Segment]:
    """Batch samples sharing a length (and mask rank) into segments."""
    groups: dict = {}
    for it in items:
        groups.setdefault((it["tokens"].shape[0], it["mask"].ndim), []).append(it)
    return [_batch(g) for _, g in sorted(groups.items())]


def stage1_item(tokens, cfg: PrefillConfig) -> dict:
    tokens = np.asarray(tokens, np.int64)
    l = cfg.interval
    if tokens.size < 2 * l:
        raise PreconditionError(f"stage-1 sequence of {tokens.size} tokens is shorter than 2l={2 * l}")
    seq = interleave(tokens, l)
    total = len(seq)
    targets = np.zeros(total, np.int64)
    weights = np.zeros(total)
    # row t predicts item t + 1 when that item is an L2 token
    nxt_l2 = ~seq.is_l1[1:]
    targets[:-1] = np.where(nxt_l2, seq.token_ids[1:], 0)
    weights[:-1] = nxt_l2
    return dict(tokens=seq.token_ids, is_l1=seq.is_l1, positions=seq.positions,
                mask=selective_mask(seq, cfg), targets=targets, weights=weights)


def stage2_item(model: TinyModel, context, query, answer, cfg: PrefillConfig,
                mode: str = L1_ONLY, refill_cfg: RefillConfig | None = None) -> dict:
    context = np.asarray(context, np.int64)
    query = np.asarray(query, np.int64)
    answer = np.asarray(answer, np.int64)
    if answer.size == 0:
        raise PreconditionError("stage-2 answer is empty")
    if query.size == 0:
        raise PreconditionError("stage-2 query is empty")
    seq = interleave(context, cfg.interval)
    n_ctx, tq, ta = len(seq), query.size, answer.size
    total = n_ctx + tq + ta
    tail = np.concatenate([query, answer])
    tokens = np.concatenate([seq.token_ids, tail])
    is_l1 = np.concatenate([seq.is_l1, np.zeros(tq + ta, bool)])
    positions = np.arange(total, dtype=np.int64)
    base = np.zeros((total, total), bool)
    base[:n_ctx, :n_ctx] = selective_mask(seq, cfg)
    base[n_ctx:, n_ctx:] = np.tril(np.ones((tq + ta,) * 2, bool))
    if mode == L1_ONLY:
        visible = [seq.is_l1.copy() for _ in range(model.config.n_layers)]
    elif mode == REFILLED:
        if refill_cfg is None:
            raise ConfigError("refilled mode needs a RefillConfig")
        cache = run_prefill(model, context, cfg).cache
        plan = plan_refill(model, cache, query, refill_cfg)
        ranges = proxy_ranges(seq.n, seq.interval)
        l2_at = np.flatnonzero(~seq.is_l1)
        visible = []
        for sel in plan.selected:
            vis = seq.is_l1.copy()
            for i in sel:
                vis[l2_at[ranges[i][0]:ranges[i][1]]] = True
            visible.append(vis)
    else:
        raise ConfigError(f"unknown stage-2 cache mode {mode!r}")
    masks = np.stack([base.copy() for _ in visible])
    for lm, vis in zip(masks, visible):
        lm[n_ctx:, :n_ctx] = vis
    targets = np.zeros(total, np.int64)
    weights = np.zeros(total)
    rows = np.arange(n_ctx + tq - 1, n_ctx + tq + ta - 1)
    targets[rows] = answer
    weights[rows] = 1.0
    return dict(tokens=np.where(is_l1, 0, tokens), is_l1=is_l1, positions=positions, mask=masks,
                targets=targets, weights=weights)


@dataclass
class Objective:
    """A loss over fixed segments; differentiable in the model parameters."""

    model_config: object
    segments: list[Segment]
    stage: str

    def loss(self, params: dict) -> float:
        return loss_only(params, self.model_config, self.segments)

    def loss_and_grads(self, params: dict, wrt: Iterable[str] | None = None):
        if wrt is None:
            wrt = [n for n in params if is_trainable(n)]
        return loss_and_grads(params, self.model_config, self.segments, set(wrt))


def stage1_objective(model: TinyModel, batch: TrainBatch, cfg: PrefillConfig) -> Objective:
    if not batch.sequences:
        raise PreconditionError("stage-1 batch has no sequences")
    items = [stage1_item(s, _config_for(cfg, batch.interval_for(i, cfg.interval)))
             for i, s in enumerate(batch.sequences)]
    return Objective(model.config, _group(items), STAGE1)


def stage2_objective(model: TinyModel, batch: TrainBatch, cfg: PrefillConfig,
                     mode: str = L1_ONLY, refill_cfg: RefillConfig | None = None) -> Objective:
    if not batch.qa:
        raise PreconditionError("stage-2 batch has no QA triples")
    offset = len(batch.sequences)
    items = []
    for j, (ctx, q, a) in enumerate(batch.qa):
        pc = _config_for(cfg, batch.interval_for(offset + j, cfg.interval))
        rc = None
        if refill_cfg is not None:
            rc = RefillConfig(refill_cfg.max_refill, refill_cfg.window, pc.interval)
        items.append(stage2_item(model, ctx, q, a, pc, mode, rc))
    return Objective(model.config, _group(items), STAGE2)


def stage1_loss(model: TinyModel, batch: TrainBatch, cfg: PrefillConfig) -> float:
    return stage1_objective(model, batch, cfg).loss(model.params)


def stage2_loss(model: TinyModel, batch: TrainBatch, cfg: PrefillConfig, mode: str = L1_ONLY,
                refill_cfg: RefillConfig | None = None) -> float:
    return stage2_objective(model, batch, cfg, mode, refill_cfg).loss(model.params)


def lm_objective(model: TinyModel, sequences, loss_from: int = 0) -> Objective:
    """Plain causal next-token loss without L1 tokens (targets from ``loss_from`` on)."""
    items = []
    for s in sequences:
        s = np.asarray(s, np.int64)
        t = s.size
        targets = np.zeros(t, np.int64)
        weights = np.zeros(t)
        targets[:-1] = s[1:]
        weights[max(loss_from - 1, 0):-1] = 1.0
        items.append(dict(tokens=s, is_l1=np.zeros(t, bool), positions=np.arange(t),
                          mask=np.tril(np.ones((t, t), bool)), targets=targets, weights=weights))
    return Objective(model.config, _group(items), "base")


# --------------------------------------------------------------- grad checking

@dataclass
class GradReport:
    max_rel_error: dict[str, float]        # per trainable family
    samples: dict[str, int]
    frozen_max_abs_grad: dict[str, float]  # per frozen family

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values())


def check_gradients(model: TinyModel, objective: Objective, eps: float = 3e-4,
                    n_samples: int = 50, seed: int = 0) -> GradReport:
    """Central differences vs analytic gradients, in float64.

    Samples ``n_samples`` scalars per trainable family (all of them when the
    family is smaller).
    """
    if not 1e-4 <= eps <= 1e-2:
        raise ConfigError(f"eps must lie in [1e-4, 1e-2], got {eps}")
    params = {k: v.astype(np.float64) for k, v in model.params.items()}
    _, grads = objective.loss_and_grads(params)
    gen = nk.rng(seed)
    by_family: dict[str, list[str]] = {}
    for name in params:
        by_family.setdefault(family(name), []).append(name)
    errors, counts, frozen = {}, {}, {}
    for fam, names in by_family.items():
        if fam not in TRAINABLE_FAMILIES:
            frozen[fam] = max(float(np.abs(grads[n]).max()) for n in names)
            continue
        slots = [(n, j) for n in names for j in range(params[n].size)]
        pick = gen.choice(len(slots), size=min(n_samples, len(slots)), replace=False)
        worst = 0.0
        for s in pick:
            name, j = slots[s]
            flat = params[name].reshape(-1)
            old = flat[j]
            flat[j] = old + eps
            up = objective.loss(params)
            flat[j] = old - eps
            down = objective.loss(params)
            flat[j] = old
            numeric = (up - down) / (2 * eps)
            analytic = grads[name].reshape(-1)[j]
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, err)
        errors[fam], counts[fam] = worst, len(pick)
    return GradReport(errors, counts, frozen)


# -------------------------------------------------------------------- training

def train_steps(model: TinyModel, batches, lr: float, steps: int,
                on_step: Callable[[dict], None] | None = None):
    """Plain gradient descent on the L1 family.

    ``batches`` is a list of Objectives, or callables ``model -> Objective``
    (rebuilt each step), cycled in order. Returns (updated copy, loss trace).
    """
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    batches = list(batches)
    model = model.copy()
    trainable = [n for n in model.params if is_trainable(n)]
    trace = []
    for step in range(steps):
        obj = batches[step % len(batches)]
        if not isinstance(obj, Objective):
            obj = obj(model)
        loss, grads = obj.loss_and_grads(model.params, trainable)
        if not math.isfinite(loss):
            raise TrainingError("loss diverged", step)
        for name in trainable:
            model.params[name] = (model.params[name] - lr * grads[name]).astype(model.dtype)
        row = {"step": step, "stage": obj.stage, "loss": float(loss), "lr": float(lr)}
        trace.append(row)
        if on_step is not None:
            on_step(row)
    return model, trace


def smoothed(trace_or_losses, window: int = 20) -> np.ndarray:
    losses = np.array([r["loss"] if isinstance(r, dict) else r for r in trace_or_losses])
    if losses.size < window:
        return losses.copy()
    return np.convolve(losses, np.ones(window) / window, mode="valid")


def write_trace(trace, path) -> None:
    with open(path, "w") as fh:
        for row in trace:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
