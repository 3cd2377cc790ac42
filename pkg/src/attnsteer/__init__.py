"""Desk-scale transformer inference with prefix caching and query-independent attention steering."""

from attnsteer.tensor import OpCounter, matmul, rms_norm, row_softmax
from attnsteer.model import (
    KVCache,
    ModelConfig,
    ModelWeights,
    TokenSequence,
    build_sequence,
    detokenize,
    extend,
    generate,
    init_random,
    load_weights,
    prefill,
    save_weights,
    tokenize,
)
from attnsteer.steering import (
    AttentionRecord,
    SteeringPlan,
    build_plan,
    build_steered_cache,
    build_weight_matrix,
    cumulative_scores,
    select_tokens,
    steer_attention,
)
from attnsteer.store import CacheKey, CacheStore
from attnsteer.profiler import EvalExample, ProfileResult, profile, token_f1

__version__ = "0.1.0"
