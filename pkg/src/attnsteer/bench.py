"""Request-delay measurement for uncached, cached and cached+steered serving."""

from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass

from attnsteer.model import (
    KVCache,
    ModelWeights,
    build_sequence,
    detokenize,
    generate,
    tokenize,
)
from attnsteer.profiler import clean_prediction, format_query
from attnsteer.steering import SteeringPlan, decode_hook, full_prompt_hook
from attnsteer.tensor import OpCounter

CONFIGS = ("no-cache", "cached-unsteered", "cached-steered")


@dataclass
class RequestTiming:
    config: str
    prefill_tokens_computed: int
    decode_tokens: int
    wall_ms_prefill: float
    wall_ms_decode: float
    cache_hit: bool
    fused_multiply_adds: int
    softmax_rows: int
    output_ids: list[int]

    @property
    def prediction(self) -> str:
        return clean_prediction(detokenize(self.output_ids))


def answer(
    weights: ModelWeights,
    question: str,
    max_new: int,
    *,
    cache: KVCache | None = None,
    serving_prefix: str = "",
    context: str = "",
    plan: SteeringPlan | None = None,
    config: str | None = None,
) -> RequestTiming:
    """Answer ``question`` from ``cache`` or, with ``cache=None``, by full prefill.

    The uncached path rebuilds ``serving_prefix + context + query`` and applies
    the plan with the same row split the cached path uses, so both paths
    produce the same logits.
    """
    query = tokenize(format_query(question), "query")
    counter = OpCounter()
    if cache is None:
        head = build_sequence(serving_prefix, context)
        ids = head.ids + query.ids
        hook = full_prompt_hook(plan, head.span_len("prefix"), len(head))
        start_cache = KVCache.empty(weights.config)
        config = config or "no-cache"
    else:
        ids = query.ids
        hook = decode_hook(plan, cache.prefix_len) if plan is not None else None
        start_cache = cache
        config = config or ("cached-steered" if plan is not None else "cached-unsteered")

    marks: list[float] = []
    t0 = time.perf_counter()
    out = generate(weights, start_cache, ids, max_new, hook, counter,
                   on_prefill=lambda _: marks.append(time.perf_counter()))
    t2 = time.perf_counter()
    t1 = marks[0] if marks else t2
    return RequestTiming(
        config=config,
        prefill_tokens_computed=len(ids),
        decode_tokens=len(out),
        wall_ms_prefill=(t1 - t0) * 1e3,
        wall_ms_decode=(t2 - t1) * 1e3,
        cache_hit=cache is not None,
        fused_multiply_adds=counter.fused_multiply_adds,
        softmax_rows=counter.softmax_rows,
        output_ids=out,
    )


def summarize(values: list[float]) -> dict[str, float]:
    return {"min": min(values), "median": statistics.median(values), "mean": statistics.fmean(values)}


def bench_row(example_id: str, runs: list[RequestTiming]) -> dict:
    """Collapse repeated timings of one (example, config) into a report row."""
    first = runs[0]
    row = asdict(first)
    row.pop("output_ids")
    row["id"] = example_id
    row["prediction"] = first.prediction
    row["repetitions"] = len(runs)
    row["wall_ms_prefill"] = summarize([r.wall_ms_prefill for r in runs])
    row["wall_ms_decode"] = summarize([r.wall_ms_decode for r in runs])
    return row


def aggregate(rows: list[dict]) -> dict[str, dict]:
    out = {}
    for config in CONFIGS:
        sel = [r for r in rows if r["config"] == config]
        if not sel:
            continue
        prefill = [r["wall_ms_prefill"]["median"] for r in sel]
        total = [r["wall_ms_prefill"]["median"] + r["wall_ms_decode"]["median"] for r in sel]
        out[config] = {
            "requests": len(sel),
            "mean_delay_ms": statistics.fmean(total),
            "median_delay_ms": statistics.median(total),
            "median_prefill_ms": statistics.median(prefill),
            "mean_prefill_tokens_computed": statistics.fmean(
                r["prefill_tokens_computed"] for r in sel),
            "mean_f1": statistics.fmean(r["f1"] for r in sel) if "f1" in sel[0] else None,
        }
    return out
