"""Query-independent attention steering.

The pipeline reads a context twice under two different prefix prompts,
scores every context token by the attention it receives, keeps the tokens
that rank in the top k under both readings, and then multiplies the
attention those tokens receive by ``alpha`` when the serving cache is built
and, optionally, when queries are decoded against it.

Nothing here ever sees the user query, so one plan and one steered cache
serve every query on the same context.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from attnsteer.digest import fnv1a64
from attnsteer.model import (
    KVCache,
    ModelWeights,
    build_sequence,
    prefill,
)
from attnsteer.tensor import DTYPE, OpCounter, ShapeError

log = logging.getLogger(__name__)

PLAN_VERSION = 1
MODES = ("prefill_only", "decode_only", "both")
SCALE_AXES = ("column", "row")
AGGREGATIONS = ("sum", "union")

DEFAULT_PREFIX_1 = "Summarize the key facts of the following passage:"
DEFAULT_PREFIX_2 = "List the entities and relationships in the following passage:"
DEFAULT_K = 16
DEFAULT_ALPHA = 2.0


class StalePlanError(ValueError):
    """The plan was built for a different context."""


# --------------------------------------------------------------------------
# cumulative attention


@dataclass(frozen=True, eq=False)
class AttentionRecord:
    """Cumulative attention received by each prefix+context token, per layer and head.

    ``scores`` has shape ``(n_layers, n_heads, prefix_len + context_len)``.
    """

    pass_id: int
    prefix_len: int
    context_len: int
    scores: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=DTYPE)
        lp = self.prefix_len + self.context_len
        if s.ndim != 3 or s.shape[2] != lp:
            raise ShapeError(f"scores shape {s.shape} does not end in L_p={lp}")
        if np.any(s < 0):
            raise ValueError("cumulative attention scores must be non-negative")
        # each of the L_p - j rows that can see token j contributes at most 1
        bound = lp - np.arange(lp) + 1e-9
        if np.any(s > bound):
            raise ValueError("cumulative score exceeds the number of attending rows")
        object.__setattr__(self, "scores", s)

    @property
    def n_layers(self) -> int:
        return self.scores.shape[0]

    def context_scores(self, layer: int) -> np.ndarray:
        """Per-head scores of the context tokens at ``layer``, context-relative."""
        return self.scores[layer, :, self.prefix_len:]


def cumulative_scores(
    attention: Sequence[np.ndarray] | np.ndarray,
    prefix_len: int,
    context_len: int,
    pass_id: int = 1,
    length_normalized: bool = False,
) -> AttentionRecord:
    """Column sums of the top-left ``L_p x L_p`` block of each head's attention.

    ``attention`` is indexed ``[layer][head, row, col]`` over the full input.
    With ``length_normalized`` the score of token ``j`` is divided by the
    number of rows that can attend to it, ``L_p - j``.
    """
    lp = prefix_len + context_len
    layers = []
    for li, attn in enumerate(attention):
        attn = np.asarray(attn, dtype=DTYPE)
        if attn.ndim != 3 or attn.shape[1] != attn.shape[2]:
            raise ShapeError(f"layer {li}: attention must be (heads, L, L), got {attn.shape}")
        if lp > attn.shape[1]:
            raise ShapeError(
                f"prefix_len + context_len = {lp} exceeds attention size {attn.shape[1]}"
            )
        sums = attn[:, :lp, :lp].sum(axis=1)
        if length_normalized:
            sums = sums / (lp - np.arange(lp))
        layers.append(sums)
    return AttentionRecord(pass_id, prefix_len, context_len, np.stack(layers))


# --------------------------------------------------------------------------
# token selection


def top_k_indices(scores: np.ndarray, k: int) -> list[int]:
    """Indices of the ``k`` largest scores; ties go to the lower index."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    return sorted(int(i) for i in order[:k])


def select_tokens(
    rec1: AttentionRecord,
    rec2: AttentionRecord,
    k: int,
    aggregation: str = "sum",
) -> list[list[int]]:
    """Per layer, context-relative tokens in the top ``k`` of both passes.

    ``aggregation="sum"`` ranks the head-summed scores; ``"union"`` takes the
    union of per-head top-k sets instead. ``k`` larger than the context is
    clamped with a warning.
    """
    if rec1.context_len != rec2.context_len:
        raise ValueError(
            f"records cover different contexts ({rec1.context_len} vs {rec2.context_len} tokens)"
        )
    if rec1.n_layers != rec2.n_layers:
        raise ValueError("records have different layer counts")
    if k < 1:
        raise ValueError("k must be at least 1")
    if aggregation not in AGGREGATIONS:
        raise ValueError(f"unknown aggregation {aggregation!r}")
    n_ctx = rec1.context_len
    if k > n_ctx:
        log.warning("k=%d exceeds context length %d; clamping", k, n_ctx)
        k = n_ctx

    def ranked(rec: AttentionRecord, layer: int) -> set[int]:
        per_head = rec.context_scores(layer)
        if aggregation == "sum":
            return set(top_k_indices(per_head.sum(axis=0), k))
        out: set[int] = set()
        for head_scores in per_head:
            out.update(top_k_indices(head_scores, k))
        return out

    return [sorted(ranked(rec1, l) & ranked(rec2, l)) for l in range(rec1.n_layers)]


# --------------------------------------------------------------------------
# plans


@dataclass(frozen=True)
class PlanEntry:
    layer: int
    heads: tuple[int, ...]
    tokens: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "heads", tuple(sorted({int(h) for h in self.heads})))
        object.__setattr__(self, "tokens", tuple(sorted({int(t) for t in self.tokens})))


@dataclass(frozen=True)
class SteeringPlan:
    alpha: float
    k: int
    context_hash: int
    prefix_hashes: tuple[int, int]
    entries: tuple[PlanEntry, ...] = ()
    mode: str = "both"
    renormalize: bool = True
    scale_axis: str = "column"
    aggregation: str = "sum"
    length_normalized: bool = False
    context_len: int | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.scale_axis not in SCALE_AXES:
            raise ValueError(f"unknown scale_axis {self.scale_axis!r}")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        entries = tuple(sorted(self.entries, key=lambda e: e.layer))
        if len({e.layer for e in entries}) != len(entries):
            raise ValueError("duplicate layer in plan entries")
        if self.context_len is not None:
            for e in entries:
                if any(t < 0 or t >= self.context_len for t in e.tokens):
                    raise ValueError(f"layer {e.layer}: token index outside the context")
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "prefix_hashes", tuple(int(h) for h in self.prefix_hashes))

    def entry(self, layer: int) -> PlanEntry | None:
        for e in self.entries:
            if e.layer == layer:
                return e
        return None

    def validate_for(self, n_layers: int, n_heads: int) -> None:
        for e in self.entries:
            if e.layer >= n_layers or any(h >= n_heads for h in e.heads):
                raise ValueError(f"plan entry {e} out of range for {n_layers}x{n_heads} model")

    def steers_prefill(self) -> bool:
        return self.mode in ("prefill_only", "both")

    def steers_decode(self) -> bool:
        return self.mode in ("decode_only", "both")

    def restrict(self, scope: Mapping[int, Iterable[int]]) -> SteeringPlan:
        """Keep only the layers in ``scope``, each limited to the given heads."""
        entries = []
        for e in self.entries:
            if e.layer in scope:
                heads = sorted(set(e.heads) & {int(h) for h in scope[e.layer]})
                if heads and e.tokens:
                    entries.append(PlanEntry(e.layer, tuple(heads), e.tokens))
        return _replace(self, entries=tuple(entries))

    def with_alpha(self, alpha: float) -> SteeringPlan:
        return _replace(self, alpha=alpha)

    def to_dict(self) -> dict:
        return {
            "version": PLAN_VERSION,
            "alpha": self.alpha,
            "k": self.k,
            "mode": self.mode,
            "renormalize": self.renormalize,
            "scale_axis": self.scale_axis,
            "aggregation": self.aggregation,
            "length_normalized": self.length_normalized,
            "context_hash": f"{self.context_hash:016x}",
            "prefix_hashes": [f"{h:016x}" for h in self.prefix_hashes],
            "entries": [
                {"layer": e.layer, "heads": list(e.heads), "tokens": list(e.tokens)}
                for e in self.entries
            ],
        }

    def to_json(self) -> str:
        """Canonical serialization: sorted keys, no insignificant whitespace."""
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: Mapping) -> SteeringPlan:
        if d.get("version") != PLAN_VERSION:
            raise ValueError(f"unsupported plan version {d.get('version')!r}")
        return cls(
            alpha=float(d["alpha"]),
            k=int(d["k"]),
            mode=d["mode"],
            renormalize=bool(d["renormalize"]),
            scale_axis=d["scale_axis"],
            aggregation=d["aggregation"],
            length_normalized=bool(d.get("length_normalized", False)),
            context_hash=int(d["context_hash"], 16),
            prefix_hashes=tuple(int(h, 16) for h in d["prefix_hashes"]),
            entries=tuple(PlanEntry(e["layer"], e["heads"], e["tokens"]) for e in d["entries"]),
        )

    @classmethod
    def from_json(cls, text: str) -> SteeringPlan:
        return cls.from_dict(json.loads(text))

    @property
    def digest(self) -> int:
        return fnv1a64(self.to_json())


def _replace(plan: SteeringPlan, **changes) -> SteeringPlan:
    return replace(plan, **changes)


# --------------------------------------------------------------------------
# weighting matrix and steering


def build_weight_matrix(
    plan: SteeringPlan,
    layer: int,
    prefix_len: int,
    total_len: int,
    row_start: int = 0,
    row_stop: int | None = None,
) -> np.ndarray:
    """Rows ``row_start:row_stop`` of the ``total_len x total_len`` weighting matrix.

    Column axis (default): every row gets ``alpha`` at column
    ``prefix_len + t`` for each selected context token ``t``. Row axis: the
    selected tokens' rows are filled with ``alpha``. Everything else is 1.
    """
    row_stop = total_len if row_stop is None else row_stop
    m = np.ones((row_stop - row_start, total_len))
    e = plan.entry(layer)
    if e is None or not e.tokens:
        return m
    absolute = np.asarray(e.tokens, dtype=np.int64) + prefix_len
    if absolute.max() >= total_len:
        raise IndexError(
            f"selected token at absolute position {absolute.max()} >= total_len {total_len}"
        )
    if plan.scale_axis == "column":
        m[:, absolute] = plan.alpha
    else:
        rows = absolute[(absolute >= row_start) & (absolute < row_stop)] - row_start
        m[rows, :] = plan.alpha
    return m


def steer_attention(
    attn: np.ndarray,
    weight: np.ndarray,
    heads: Iterable[int],
    renormalize: bool = True,
) -> np.ndarray:
    """``weight * attn`` on the listed heads, optionally renormalizing each row.

    ``attn`` is ``(heads, rows, cols)`` and ``weight`` is ``(rows, cols)``.
    Other heads, and rows whose weights are all 1, are returned bit-for-bit
    unchanged.
    """
    attn = np.asarray(attn, dtype=DTYPE)
    if attn.ndim != 3 or weight.shape != attn.shape[1:]:
        raise ShapeError(f"weight {weight.shape} does not match attention {attn.shape}")
    out = attn.copy()
    rows = np.flatnonzero(np.any(weight != 1.0, axis=1))
    if rows.size == 0:
        return out
    w = weight[rows]
    for h in heads:
        scaled = w * attn[h, rows]
        if renormalize:
            sums = scaled.sum(axis=1, keepdims=True)
            if np.any(sums <= 0):
                raise ValueError(f"head {h}: a steered row sums to zero")
            scaled = scaled / sums
        out[h, rows] = scaled
    return out


class SteeringHook:
    """Attention hook applying a plan to absolute rows in ``[row_start, row_stop)``.

    ``prefix_len`` is the length of the serving prefix span the plan's
    context-relative token indices are offset by.
    """

    def __init__(
        self,
        plan: SteeringPlan,
        prefix_len: int,
        row_start: int = 0,
        row_stop: int | None = None,
    ):
        self.plan = plan
        self.prefix_len = prefix_len
        self.row_start = row_start
        self.row_stop = row_stop
        self.renormalize = plan.renormalize

    def __call__(self, layer: int, attn: np.ndarray, row_offset: int) -> np.ndarray:
        e = self.plan.entry(layer)
        if e is None or not e.tokens or not e.heads:
            return attn
        n_rows, total = attn.shape[1], attn.shape[2]
        lo = max(self.row_start, row_offset)
        hi = row_offset + n_rows if self.row_stop is None else min(self.row_stop, row_offset + n_rows)
        if lo >= hi:
            return attn
        a, b = lo - row_offset, hi - row_offset
        m = build_weight_matrix(self.plan, layer, self.prefix_len, total, lo, hi)
        out = attn.copy()
        out[:, a:b] = steer_attention(attn[:, a:b], m, e.heads, self.plan.renormalize)
        return out


def prefill_hook(plan: SteeringPlan | None, prefix_len: int) -> SteeringHook | None:
    """Hook for building the steered cache, or None when the mode defers steering."""
    if plan is None or not plan.entries or not plan.steers_prefill():
        return None
    return SteeringHook(plan, prefix_len)


def decode_hook(plan: SteeringPlan | None, prefix_len: int) -> SteeringHook | None:
    """Hook for query and decode rows over a steered cache."""
    if plan is None or not plan.entries or not plan.steers_decode():
        return None
    return SteeringHook(plan, prefix_len)


def full_prompt_hook(
    plan: SteeringPlan | None, prefix_len: int, cached_len: int
) -> SteeringHook | None:
    """Hook reproducing cache-then-decode steering in a single uncached prefill.

    Rows below ``cached_len`` get the prefill-time treatment, later rows the
    decode-time one, so the logits match the cached path.
    """
    if plan is None or not plan.entries:
        return None
    if plan.steers_prefill() and plan.steers_decode():
        return SteeringHook(plan, prefix_len)
    if plan.steers_prefill():
        return SteeringHook(plan, prefix_len, row_stop=cached_len)
    return SteeringHook(plan, prefix_len, row_start=cached_len)


# --------------------------------------------------------------------------
# end-to-end


def build_plan(
    weights: ModelWeights,
    context: str,
    prefix_1: str = DEFAULT_PREFIX_1,
    prefix_2: str = DEFAULT_PREFIX_2,
    k: int = DEFAULT_K,
    alpha: float = DEFAULT_ALPHA,
    scope: Mapping[int, Iterable[int]] | None = None,
    mode: str = "both",
    renormalize: bool = True,
    scale_axis: str = "column",
    aggregation: str = "sum",
    length_normalized: bool = False,
    counter: OpCounter | None = None,
) -> tuple[SteeringPlan, AttentionRecord, AttentionRecord]:
    """Read ``context`` under both prefixes and select the tokens to steer.

    ``scope`` maps layer -> heads to steer; ``None`` means every head of
    every layer. Returns the plan and the two attention records.
    """
    if prefix_1 == prefix_2:
        raise ValueError("the two prefix prompts must differ")
    if not context:
        raise ValueError("context must be non-empty")
    cfg = weights.config
    records = []
    for pass_id, prefix in ((1, prefix_1), (2, prefix_2)):
        seq = build_sequence(prefix, context)
        result = prefill(weights, seq, record_attention=True, counter=counter)
        records.append(cumulative_scores(
            result.attention, seq.span_len("prefix"), seq.span_len("context"),
            pass_id=pass_id, length_normalized=length_normalized,
        ))
    rec1, rec2 = records
    selected = select_tokens(rec1, rec2, k, aggregation)
    if scope is None:
        scope = {l: range(cfg.n_heads) for l in range(cfg.n_layers)}
    entries = []
    for layer, heads in sorted(scope.items()):
        heads = tuple(sorted(int(h) for h in heads))
        if layer >= cfg.n_layers or any(h < 0 or h >= cfg.n_heads for h in heads):
            raise ValueError(f"scope layer {layer} heads {heads} out of range")
        if heads and selected[layer]:
            entries.append(PlanEntry(layer, heads, tuple(selected[layer])))
    if not entries:
        log.warning("no token survived the intersection in any steered layer; plan is a no-op")
    plan = SteeringPlan(
        alpha=alpha,
        k=k,
        context_hash=fnv1a64(context),
        prefix_hashes=(fnv1a64(prefix_1), fnv1a64(prefix_2)),
        entries=tuple(entries),
        mode=mode,
        renormalize=renormalize,
        scale_axis=scale_axis,
        aggregation=aggregation,
        length_normalized=length_normalized,
        context_len=rec1.context_len,
    )
    return plan, rec1, rec2


def build_steered_cache(
    weights: ModelWeights,
    serving_prefix: str,
    context: str,
    plan: SteeringPlan | None,
    counter: OpCounter | None = None,
) -> KVCache:
    """Prefill ``serving_prefix + context``, steering attention per ``plan``."""
    if plan is not None:
        if plan.context_hash != fnv1a64(context):
            raise StalePlanError("plan was built for a different context")
        plan.validate_for(weights.config.n_layers, weights.config.n_heads)
    seq = build_sequence(serving_prefix, context)
    hook = prefill_hook(plan, seq.span_len("prefix"))
    return prefill(weights, seq, hook=hook, counter=counter).cache
