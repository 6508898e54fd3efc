"""End-to-end pipelines, baseline comparators, run metrics and parameter sweeps.

Three modes share one metrics schema:

* ``acre``: chunked selective prefill into a bi-layer cache, query scoring,
  per-layer refill, greedy decode.
* ``full``: plain causal attention over the raw context (no L1 tokens) with a
  hard cap on live KV entries standing in for device memory.
* ``streaming``: sink tokens plus a recent window, evicting everything else.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tasks
from .errors import CapacityError, ConfigError, PreconditionError
from .model import KVView, ModelConfig, TinyModel, forward_logits, init_model, load_model
from .nested_cache import BiLayerCache, n_groups
from .prefill import PrefillConfig, run_prefill
from .refill import RefillConfig, compute_k, decode, plan_refill, refill

MODES = ("acre", "full", "streaming")
SWEEP_PARAMS = {"l": "interval", "eta": "max_refill", "W": "window"}


@dataclass(frozen=True)
class PromptTemplate:
    """Text placed around the context before tokenization."""

    head: str = ("Read the document below carefully. Questions about it come afterwards.\n\n"
                 "Document:\n")
    tail: str = "\n[end of document]\n\nAnswer the following.\n"


DEFAULT_TEMPLATE = PromptTemplate()
BARE = PromptTemplate("", "")


def bytes_to_tokens(data: bytes, vocab_size: int) -> np.ndarray:
    """Byte-level tokenizer: each byte maps to ``byte % n_text_ids``.

    The two highest ids stay reserved (end-of-sequence, L1 placeholder).
    """
    n_text = vocab_size - 2
    if n_text < 1:
        raise ConfigError(f"vocab_size {vocab_size} leaves no text ids")
    return np.frombuffer(data, np.uint8).astype(np.int64) % n_text


def ingest(source, vocab_size: int = 64, template: PromptTemplate | None = DEFAULT_TEMPLATE,
           inline: bool = False) -> np.ndarray:
    """Tokenize a context from a file path (or inline text/bytes with ``inline=True``).

    The context is wrapped with ``template`` before tokenization; pass
    ``template=None`` for the raw bytes only.
    """
    if inline:
        data = source.encode("utf-8") if isinstance(source, str) else bytes(source)
    else:
        data = Path(source).read_bytes()       # OSError propagates
    if not data:
        raise PreconditionError(f"empty input: {'<inline>' if inline else source}")
    if template is not None:
        data = template.head.encode("utf-8") + data + template.tail.encode("utf-8")
    return bytes_to_tokens(data, vocab_size)


def encode_query(text: str, vocab_size: int) -> np.ndarray:
    if not text:
        raise PreconditionError("empty query")
    return bytes_to_tokens(text.encode("utf-8"), vocab_size)


@dataclass
class RunMetrics:
    peak_view_entries: int = 0
    hot_entries: int = 0
    cold_entries: int = 0
    cold_reads: int = 0
    refill_entries: int = 0
    prefill_steps: int = 0
    decode_tokens: int = 0
    wall_ms: float = 0.0


@dataclass(frozen=True)
class ExperimentConfig:
    """One run. ``corpus`` is ``markov:<n_tokens>``, ``file:<path>`` or ``text:<literal>``.

    ``cap`` bounds live KV entries per layer-head in full mode; ``sinks`` and
    ``stream_window`` shape the streaming baseline.
    """

    mode: str = "acre"
    seed: int = 0
    corpus: str = "markov:1024"
    query: str = "What is the document about?"
    interval: int = 16
    window: int = 512
    max_refill: int = 4096
    chunk: int | None = None
    max_new: int = 8
    cap: int = 2048
    sinks: int = 4
    stream_window: int = 256
    model_path: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.max_new < 0:
            raise ConfigError("max_new must be >= 0")
        if self.mode == "acre":
            self.prefill_config()
            self.refill_config()
        elif self.mode == "full":
            if self.cap < 1:
                raise ConfigError("full mode needs cap >= 1")
        elif self.sinks < 0 or self.stream_window < 1:
            raise ConfigError("streaming mode needs sinks >= 0 and stream_window >= 1")
        kind = self.corpus.split(":", 1)[0]
        if kind not in ("markov", "file", "text") or ":" not in self.corpus:
            raise ConfigError(f"bad corpus spec {self.corpus!r}")

    def prefill_config(self) -> PrefillConfig:
        return PrefillConfig(window=self.window, interval=self.interval, chunk=self.chunk)

    def refill_config(self) -> RefillConfig:
        return RefillConfig(max_refill=self.max_refill, window=self.window, interval=self.interval)

    def replace(self, **changes) -> "ExperimentConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return ExperimentConfig(**values)


@dataclass
class RunResult:
    answer: list[int]
    metrics: RunMetrics
    config: ExperimentConfig
    extra: dict = field(default_factory=dict)

    def record(self, timing: bool = False) -> dict:
        """Flat JSON row: metrics fields plus a config echo.

        Wall time is left out unless ``timing`` is set, so that repeated runs
        produce identical rows.
        """
        row = asdict(self.metrics)
        if not timing:
            row.pop("wall_ms")
        cfg = self.config
        row.update(mode=cfg.mode, seed=cfg.seed, corpus=cfg.corpus, query=cfg.query,
                   l=cfg.interval, window=cfg.window, eta=cfg.max_refill, chunk=cfg.chunk,
                   max_new=cfg.max_new, answer=list(self.answer))
        if cfg.mode == "full":
            row["cap"] = cfg.cap
        if cfg.mode == "streaming":
            row.update(sinks=cfg.sinks, stream_window=cfg.stream_window)
        row.update(self.extra)
        return row


def to_jsonl(rows) -> str:
    return "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in rows)


def load_context(cfg: ExperimentConfig, vocab_size: int) -> np.ndarray:
    kind, arg = cfg.corpus.split(":", 1)
    if kind == "markov":
        return tasks.markov_corpus(cfg.seed, int(arg), vocab_size - 2)
    if kind == "file":
        return ingest(arg, vocab_size)
    return ingest(arg, vocab_size, inline=True)


def build_model(cfg: ExperimentConfig) -> TinyModel:
    if cfg.model_path:
        return load_model(cfg.model_path)
    mc = cfg.model
    return init_model(ModelConfig(mc.n_layers, mc.n_heads, mc.head_dim, mc.vocab_size, mc.ffn_dim,
                                  cfg.seed, mc.rope_base))


# ----------------------------------------------------------------------- ACRE

def build_cache(model: TinyModel, cfg: ExperimentConfig, context=None):
    """Prefill the context; returns (cache, PrefillResult)."""
    if context is None:
        context = load_context(cfg, model.config.vocab_size)
    result = run_prefill(model, context, cfg.prefill_config())
    return result.cache, result


def answer_from_cache(model: TinyModel, cache: BiLayerCache, cfg: ExperimentConfig,
                      query_tokens=None) -> RunResult:
    """Score, refill and decode over an existing cache (cache reuse path)."""
    if cfg.interval != cache.interval:
        raise ConfigError(f"cache interval {cache.interval} != configured {cfg.interval}")
    t0 = time.perf_counter()
    if query_tokens is None:
        query_tokens = encode_query(cfg.query, model.config.vocab_size)
    reads_before = cache.tiers.cold_reads
    plan = plan_refill(model, cache, query_tokens, cfg.refill_config())
    view = refill(cache, plan)
    answer = decode(model, view, query_tokens, cfg.max_new, eos_id=model.config.eos_id,
                    start_position=cache.total_len)
    per_layer = [sum(cache.proxy_map[i][1] - cache.proxy_map[i][0] for i in sel)
                 for sel in plan.selected]
    metrics = RunMetrics(
        peak_view_entries=max(len(kv) for kv in view),
        hot_entries=cache.hot_entries,
        cold_entries=cache.cold_entries,
        cold_reads=cache.tiers.cold_reads - reads_before,
        refill_entries=max(per_layer, default=0),
        decode_tokens=len(answer),
        wall_ms=(time.perf_counter() - t0) * 1e3,
    )
    extra = dict(n=cache.n, m=cache.m, k=plan.k)
    return RunResult(answer, metrics, cfg, extra)


def run_acre(cfg: ExperimentConfig, model: TinyModel | None = None, context=None,
             query_tokens=None) -> RunResult:
    if cfg.mode != "acre":
        raise ConfigError(f"run_acre needs mode 'acre', got {cfg.mode!r}")
    t0 = time.perf_counter()
    model = model if model is not None else build_model(cfg)
    cache, pre = build_cache(model, cfg, context)
    result = answer_from_cache(model, cache, cfg, query_tokens)
    m = result.metrics
    m.peak_view_entries = max(m.peak_view_entries, pre.peak_view)
    m.prefill_steps = pre.steps
    m.wall_ms = (time.perf_counter() - t0) * 1e3
    return result


# ------------------------------------------------------------------ baselines

def _plain_view(model: TinyModel) -> KVView:
    return KVView.empty(model.config, model.dtype)


def _keep(view: KVView, idx) -> KVView:
    return KVView(kv.take(idx) for kv in view)


def _stream_prune(view: KVView, sinks: int, recent: int) -> KVView:
    size = len(view[0])
    if size <= sinks + recent:
        return view
    idx = np.concatenate([np.arange(sinks), np.arange(size - recent, size)])
    return _keep(view, idx)


def run_baseline(cfg: ExperimentConfig, model: TinyModel | None = None, context=None,
                 query_tokens=None) -> RunResult:
    """Full-attention or streaming comparator over the raw context (no L1 tokens).

    Streaming keeps original positions for the retained entries.
    """
    if cfg.mode not in ("full", "streaming"):
        raise ConfigError(f"run_baseline needs mode 'full' or 'streaming', got {cfg.mode!r}")
    t0 = time.perf_counter()
    model = model if model is not None else build_model(cfg)
    vocab = model.config.vocab_size
    context = load_context(cfg, vocab) if context is None else np.asarray(context, np.int64)
    if query_tokens is None:
        query_tokens = encode_query(cfg.query, vocab)
    n = context.size
    if n == 0:
        raise PreconditionError("nothing to prefill")
    mc = model.config
    view = _plain_view(model)
    metrics = RunMetrics()
    if cfg.mode == "full":
        live = n + len(query_tokens) + cfg.max_new
        if live > cfg.cap:
            raise CapacityError(
                f"full attention needs {live} live KV entries per layer-head, cap is {cfg.cap}")
        forward_logits(model, view, context)
        metrics.prefill_steps = 1
        metrics.peak_view_entries = n
    else:
        step = max(1, min(64, cfg.stream_window))
        peak = 0
        for start in range(0, n, step):
            chunk = context[start:start + step]
            view = _stream_prune(view, cfg.sinks, cfg.stream_window - chunk.size)
            forward_logits(model, view, chunk, positions=np.arange(start, start + chunk.size))
            peak = max(peak, len(view[0]))
            metrics.prefill_steps += 1
        view = _stream_prune(view, cfg.sinks, cfg.stream_window)
        metrics.peak_view_entries = peak
    live_entries = len(view[0])
    metrics.hot_entries = live_entries * mc.n_layers * mc.n_heads
    answer = decode(model, view, query_tokens, cfg.max_new, eos_id=mc.eos_id, start_position=n)
    metrics.decode_tokens = len(answer)
    metrics.wall_ms = (time.perf_counter() - t0) * 1e3
    return RunResult(answer, metrics, cfg, dict(n=n))


def run(cfg: ExperimentConfig, model: TinyModel | None = None, context=None,
        query_tokens=None) -> RunResult:
    if cfg.mode == "acre":
        return run_acre(cfg, model, context, query_tokens)
    return run_baseline(cfg, model, context, query_tokens)


# --------------------------------------------------------------------- sweeps

def sweep(param: str, values, base: ExperimentConfig, model: TinyModel | None = None,
          output=None) -> list[dict]:
    """One ACRE run per value of ``param`` (``l``, ``eta`` or ``W``).

    Rows come back in the order given; the monotonicity checks are applied to
    the rows sorted by the swept value.
    """
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"cannot sweep {param!r}; choose one of {sorted(SWEEP_PARAMS)}")
    if base.mode != "acre":
        raise ConfigError("sweeps run in acre mode")
    values = [int(v) for v in values]
    if not values:
        raise ConfigError("sweep needs at least one value")
    model = model if model is not None else build_model(base)
    context = load_context(base, model.config.vocab_size)
    rows = []
    for v in values:
        cfg = base.replace(**{SWEEP_PARAMS[param]: v})
        if param == "l" and cfg.chunk is not None and cfg.chunk % v:
            cfg = cfg.replace(chunk=None)
        result = run_acre(cfg, model, context)
        rows.append(result.record())
    check_monotone(param, rows)
    if output is not None:
        Path(output).write_text(to_jsonl(rows))
    return rows


def check_monotone(param: str, rows: list[dict]) -> None:
    key = {"l": "l", "eta": "eta", "W": "window"}[param]
    ordered = sorted(rows, key=lambda r: r[key])
    hot = [r["hot_entries"] for r in ordered]
    refilled = [r["refill_entries"] for r in ordered]
    if param == "l" and any(b > a for a, b in zip(hot, hot[1:])):
        raise AssertionError(f"hot entries increase with l: {hot}")
    if param in ("eta", "W") and any(b < a for a, b in zip(refilled, refilled[1:])):
        raise AssertionError(f"refill entries decrease with {param}: {refilled}")


def summary_table(rows: list[dict], param: str) -> str:
    key = {"l": "l", "eta": "eta", "W": "window"}[param]
    cols = (key, "m", "k", "hot_entries", "refill_entries", "cold_reads", "peak_view_entries")
    lines = ["  ".join(f"{c:>17}" for c in cols)]
    for r in rows:
        lines.append("  ".join(f"{r.get(c, ''):>17}" for c in cols))
    return "\n".join(lines)


def expected_hot_per_layer_head(n: int, l: int) -> int:
    return n_groups(n, l)


def expected_k(cfg: ExperimentConfig, n: int) -> int:
    return compute_k(cfg.refill_config(), n_groups(n, cfg.interval))
