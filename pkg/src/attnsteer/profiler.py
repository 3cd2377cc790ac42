"""Token-level F1 and coarse-to-fine search for the layers/heads worth steering."""

from __future__ import annotations

import json
import logging
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from attnsteer.model import KVCache, ModelWeights, build_sequence, detokenize, generate, prefill
from attnsteer.model import tokenize
from attnsteer.steering import (
    DEFAULT_PREFIX_1,
    DEFAULT_PREFIX_2,
    SteeringPlan,
    build_plan,
    build_steered_cache,
    decode_hook,
)

log = logging.getLogger(__name__)

DEFAULT_SERVING_PREFIX = "Answer the question using the passage below."
DEFAULT_MAX_NEW = 32
DEFAULT_TOP_M = 3

Scope = dict[int, tuple[int, ...]]


# --------------------------------------------------------------------------
# metric

_PUNCT = set(string.punctuation)


def normalize_answer(s: str) -> list[str]:
    """Lowercase, drop punctuation, split on whitespace."""
    s = "".join(ch for ch in s.lower() if ch not in _PUNCT)
    return s.split()


def _f1(pred: list[str], ref: list[str]) -> float:
    if not pred and not ref:
        return 1.0
    if not pred or not ref:
        return 0.0
    common = Counter(pred) & Counter(ref)
    same = sum(common.values())
    if same == 0:
        return 0.0
    precision = same / len(pred)
    recall = same / len(ref)
    return 2 * precision * recall / (precision + recall)


def token_f1(prediction: str, references: Iterable[str]) -> float:
    """Best token-overlap F1 of ``prediction`` against any reference."""
    refs = list(references)
    if not refs:
        raise ValueError("token_f1 needs at least one reference")
    pred = normalize_answer(prediction)
    return max(_f1(pred, normalize_answer(r)) for r in refs)


# --------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class EvalExample:
    id: str
    context: str
    question: str
    answers: tuple[str, ...]

    def __post_init__(self):
        if not self.context or not self.question:
            raise ValueError(f"example {self.id!r}: context and question must be non-empty")
        if not self.answers:
            raise ValueError(f"example {self.id!r}: answers must be non-empty")
        object.__setattr__(self, "answers", tuple(self.answers))

    @classmethod
    def from_dict(cls, d: Mapping) -> EvalExample:
        answers = d["answers"]
        if isinstance(answers, str):
            answers = [answers]
        return cls(str(d["id"]), d["context"], d["question"], tuple(answers))


def load_jsonl(path: str | Path) -> list[EvalExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(EvalExample.from_dict(json.loads(line)))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad example: {exc}") from exc
    return out


def format_query(question: str) -> str:
    """Query text appended after the cached prefix and context."""
    return f"\nQuestion: {question}\nAnswer:"


def clean_prediction(text: str) -> str:
    """First line of a generated answer, stripped."""
    return re.split(r"[\r\n]", text.strip(), maxsplit=1)[0].strip() if text.strip() else ""


# --------------------------------------------------------------------------
# scope evaluation


def _scope_key(scope: Mapping[int, Iterable[int]]) -> tuple:
    return tuple(sorted((int(l), tuple(sorted(int(h) for h in hs)))
                        for l, hs in scope.items() if hs))


class ScopeEvaluator:
    """Dev-set metric of steering a given layer/head scope.

    Plans (all layers, all heads) and unsteered caches are built once per
    example; each scope evaluation restricts the plan, builds the steered
    cache and greedily decodes every question.
    """

    def __init__(
        self,
        weights: ModelWeights,
        dev: list[EvalExample],
        k: int,
        alpha: float,
        max_new: int = DEFAULT_MAX_NEW,
        serving_prefix: str = DEFAULT_SERVING_PREFIX,
        prefix_1: str = DEFAULT_PREFIX_1,
        prefix_2: str = DEFAULT_PREFIX_2,
        **plan_options,
    ):
        if not dev:
            raise ValueError("dev set must be non-empty")
        self.weights = weights
        self.dev = dev
        self.max_new = max_new
        self.serving_prefix = serving_prefix
        self.calls = 0
        self._memo: dict[tuple, float] = {}
        self._plans: dict[str, SteeringPlan] = {}
        self._base_caches: dict[str, KVCache] = {}
        for ex in dev:
            if ex.context not in self._plans:
                self._plans[ex.context], _, _ = build_plan(
                    weights, ex.context, prefix_1, prefix_2, k=k, alpha=alpha, **plan_options)
                seq = build_sequence(serving_prefix, ex.context)
                self._base_caches[ex.context] = prefill(weights, seq).cache

    def predict(self, ex: EvalExample, scope: Mapping[int, Iterable[int]]) -> str:
        plan = self._plans[ex.context].restrict(scope)
        if plan.entries:
            cache = build_steered_cache(self.weights, self.serving_prefix, ex.context, plan)
            hook = decode_hook(plan, cache.prefix_len)
        else:
            cache, hook = self._base_caches[ex.context], None
        query = tokenize(format_query(ex.question), "query")
        out = generate(self.weights, cache, query, self.max_new, hook)
        return clean_prediction(detokenize(out))

    def metric(self, scope: Mapping[int, Iterable[int]]) -> float:
        """Mean token F1; identical scopes are computed once and counted once."""
        key = _scope_key(scope)
        if key not in self._memo:
            self.calls += 1
            scores = [token_f1(self.predict(ex, dict(key)), ex.answers) for ex in self.dev]
            self._memo[key] = sum(scores) / len(scores)
        return self._memo[key]


# --------------------------------------------------------------------------
# coarse-to-fine search


@dataclass
class ProfileResult:
    stage_a_scores: dict[int, float]
    stage_b_scores: dict[tuple[int, int], float]
    chosen: Scope
    dev_metric_baseline: float
    dev_metric_steered: float
    eval_call_count: int
    budget: int
    truncated: bool = False
    union_evaluated: bool = False
    kept_layers: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "stage_a_scores": {str(l): v for l, v in sorted(self.stage_a_scores.items())},
            "stage_b_scores": {f"{l}:{h}": v for (l, h), v in sorted(self.stage_b_scores.items())},
            "kept_layers": list(self.kept_layers),
            "chosen": {str(l): list(hs) for l, hs in sorted(self.chosen.items())},
            "dev_metric_baseline": self.dev_metric_baseline,
            "dev_metric_steered": self.dev_metric_steered,
            "eval_call_count": self.eval_call_count,
            "budget": self.budget,
            "truncated": self.truncated,
            "union_evaluated": self.union_evaluated,
        }


def default_budget(n_layers: int, n_heads: int, top_m: int = DEFAULT_TOP_M) -> int:
    return 1 + n_layers + top_m * n_heads


def _group(pairs: list[tuple[int, int]]) -> Scope:
    scope: Scope = {}
    for layer, head in pairs:
        scope[layer] = scope.get(layer, ()) + (head,)
    return scope


def search_scope(
    evaluate,
    n_layers: int,
    n_heads: int,
    budget: int,
    top_m: int = DEFAULT_TOP_M,
) -> ProfileResult:
    """Coarse-to-fine search driven by ``evaluate(scope) -> metric``.

    Stage A scores the baseline and every whole layer; Stage B scores each
    head of the ``top_m`` best layers alone. The answer is the union of heads
    that beat the baseline, verified with one extra evaluation when it
    contains more than one head; the best single candidate wins if the union
    does worse, and the union wins ties. A scope that does not beat the
    baseline is never returned.
    """
    if budget < n_layers + 1:
        raise ValueError(f"budget {budget} is below n_layers + 1 = {n_layers + 1}")
    calls = 0
    truncated = False

    def run(scope: Scope) -> float | None:
        nonlocal calls, truncated
        if calls >= budget:
            truncated = True
            return None
        calls += 1
        return evaluate(scope)

    baseline = run({})
    stage_a: dict[int, float] = {}
    for layer in range(n_layers):
        m = run({layer: tuple(range(n_heads))})
        stage_a[layer] = m

    kept = sorted(stage_a, key=lambda l: (-stage_a[l], l))[:top_m]
    stage_b: dict[tuple[int, int], float] = {}
    for layer in kept:
        for head in range(n_heads):
            m = run({layer: (head,)})
            if m is None:
                break
            stage_b[(layer, head)] = m
        if truncated:
            break
    if truncated:
        log.warning("profiling budget of %d evaluations exhausted", budget)

    candidates: list[tuple[float, Scope]] = []
    for layer in range(n_layers):
        candidates.append((stage_a[layer], {layer: tuple(range(n_heads))}))
    for (layer, head), m in stage_b.items():
        candidates.append((m, {layer: (head,)}))

    best_metric, best_scope = baseline, {}
    for m, scope in candidates:
        # strictly better only, so earlier (coarser) candidates win ties
        if m > best_metric:
            best_metric, best_scope = m, scope

    union_evaluated = False
    improving = sorted(lh for lh, m in stage_b.items() if m > baseline)
    union_metric = None
    if len(improving) == 1:
        union_metric = stage_b[improving[0]]
    elif improving and calls < budget:
        union_metric = run(_group(improving))
        union_evaluated = True
    if union_metric is not None and union_metric >= best_metric:
        best_metric, best_scope = union_metric, _group(improving)

    return ProfileResult(
        stage_a_scores=stage_a,
        stage_b_scores=stage_b,
        chosen={l: tuple(hs) for l, hs in sorted(best_scope.items())},
        dev_metric_baseline=baseline,
        dev_metric_steered=best_metric,
        eval_call_count=calls,
        budget=budget,
        truncated=truncated,
        union_evaluated=union_evaluated,
        kept_layers=kept,
    )


def profile(
    weights: ModelWeights,
    dev: list[EvalExample],
    k: int,
    alpha: float,
    budget: int | None = None,
    top_m: int = DEFAULT_TOP_M,
    max_new: int = DEFAULT_MAX_NEW,
    **options,
) -> ProfileResult:
    """Search for the steering scope that maximizes mean dev F1.

    ``options`` are forwarded to :class:`ScopeEvaluator` (prefix texts and
    plan flags).
    """
    cfg = weights.config
    if budget is None:
        budget = default_budget(cfg.n_layers, cfg.n_heads, top_m)
    evaluator = ScopeEvaluator(weights, dev, k, alpha, max_new=max_new, **options)
    return search_scope(evaluator.metric, cfg.n_layers, cfg.n_heads, budget, top_m)
