"""Deterministic decoder-only transformer with KV-cache-aware prefill and decode.

Architecture: learned absolute position embeddings, pre-norm blocks with RMS
norm, standard multi-head causal attention, GELU feed-forward, and an output
projection tied to the token embedding. Everything runs in float64; weights
are held at float32 precision so that a save/load round trip is exact.

Cache reuse relies on absolute positions: a cache built for a prefix is only
valid for inputs that start with exactly the same tokens.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from attnsteer.digest import fnv1a64
from attnsteer.tensor import (
    DTYPE,
    OpCounter,
    ShapeError,
    gelu,
    matmul,
    rms_norm,
    row_softmax,
)

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
N_SPECIAL = 3
VOCAB_SIZE = 256 + N_SPECIAL

NORM_EPS = 1e-5
ROW_SUM_TOL = 1e-9

WEIGHTS_MAGIC = b"LLMS"
WEIGHTS_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIII")


# --------------------------------------------------------------------------
# configuration and weights


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    vocab_size: int = VOCAB_SIZE
    max_positions: int = 1024

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_ff", "vocab_size", "max_positions"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"ModelConfig.{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads:
            raise ValueError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if self.vocab_size != VOCAB_SIZE:
            raise ValueError(f"vocab_size is fixed at {VOCAB_SIZE} for the byte tokenizer")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class LayerWeights:
    attn_norm: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ffn_norm: np.ndarray
    ffn_in: np.ndarray
    ffn_out: np.ndarray


LAYER_TENSORS = ("attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "ffn_in", "ffn_out")


def _layer_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    return {
        "attn_norm": (d,),
        "wq": (d, d),
        "wk": (d, d),
        "wv": (d, d),
        "wo": (d, d),
        "ffn_norm": (d,),
        "ffn_in": (d, f),
        "ffn_out": (f, d),
    }


def tensor_layout(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Fixed serialization order of every weight tensor."""
    layout = [
        ("token_embedding", (cfg.vocab_size, cfg.d_model)),
        ("position_embedding", (cfg.max_positions, cfg.d_model)),
    ]
    shapes = _layer_shapes(cfg)
    for i in range(cfg.n_layers):
        layout.extend((f"layers.{i}.{name}", shapes[name]) for name in LAYER_TENSORS)
    layout.append(("final_norm", (cfg.d_model,)))
    return layout


def weights_file_size(cfg: ModelConfig) -> int:
    return _HEADER.size + 4 * sum(int(np.prod(shape)) for _, shape in tensor_layout(cfg))


def _freeze(arr, shape: tuple[int, ...], name: str) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float32).astype(DTYPE)
    if out.shape != shape:
        raise ShapeError(f"{name}: expected shape {shape}, got {out.shape}")
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name}: non-finite weights")
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class ModelWeights:
    """Immutable parameters. Values are rounded to float32 precision on construction."""

    config: ModelConfig
    token_embedding: np.ndarray
    position_embedding: np.ndarray
    layers: tuple[LayerWeights, ...]
    final_norm: np.ndarray
    content_hash: int = field(init=False)

    def __post_init__(self):
        cfg = self.config
        set_ = object.__setattr__
        set_(self, "token_embedding",
             _freeze(self.token_embedding, (cfg.vocab_size, cfg.d_model), "token_embedding"))
        set_(self, "position_embedding",
             _freeze(self.position_embedding, (cfg.max_positions, cfg.d_model), "position_embedding"))
        set_(self, "final_norm", _freeze(self.final_norm, (cfg.d_model,), "final_norm"))
        if len(self.layers) != cfg.n_layers:
            raise ShapeError(f"expected {cfg.n_layers} layers, got {len(self.layers)}")
        shapes = _layer_shapes(cfg)
        frozen = []
        for i, lw in enumerate(self.layers):
            frozen.append(LayerWeights(**{
                name: _freeze(getattr(lw, name), shapes[name], f"layers.{i}.{name}")
                for name in LAYER_TENSORS
            }))
        set_(self, "layers", tuple(frozen))
        set_(self, "content_hash", fnv1a64(self.to_bytes()))

    def tensors(self) -> Iterable[tuple[str, np.ndarray]]:
        yield "token_embedding", self.token_embedding
        yield "position_embedding", self.position_embedding
        for i, lw in enumerate(self.layers):
            for name in LAYER_TENSORS:
                yield f"layers.{i}.{name}", getattr(lw, name)
        yield "final_norm", self.final_norm

    def to_bytes(self) -> bytes:
        cfg = self.config
        parts = [_HEADER.pack(WEIGHTS_MAGIC, WEIGHTS_VERSION, cfg.n_layers, cfg.n_heads,
                              cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.max_positions)]
        parts.extend(t.astype("<f4").tobytes() for _, t in self.tensors())
        return b"".join(parts)

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict[str, np.ndarray]) -> ModelWeights:
        """Build weights from a flat ``{layout name: array}`` mapping."""
        layers = tuple(
            LayerWeights(**{name: arrays[f"layers.{i}.{name}"] for name in LAYER_TENSORS})
            for i in range(config.n_layers)
        )
        return cls(config, arrays["token_embedding"], arrays["position_embedding"],
                   layers, arrays["final_norm"])

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {name: np.array(t) for name, t in self.tensors()}


# --------------------------------------------------------------------------
# random initialization

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def splitmix64(seed: int, count: int, start: int = 0) -> np.ndarray:
    """Outputs ``start .. start+count-1`` of the SplitMix64 generator seeded with ``seed``.

    The state after ``i`` calls is ``seed + i * 0x9E3779B97F4A7C15`` (mod 2**64),
    so any window of the stream can be produced without iterating.
    """
    idx = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed % 2**64) + idx * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def init_random(config: ModelConfig, seed: int) -> ModelWeights:
    """Seeded random weights.

    All matrices and embeddings are filled, in :func:`tensor_layout` order,
    from one SplitMix64 stream: each 64-bit output ``z`` becomes
    ``(2 * (z >> 11) / 2**53 - 1) / sqrt(d_model)``, i.e. uniform on
    ``[-1, 1) / sqrt(d_model)``. Norm gains are ones and draw nothing from
    the stream.
    """
    scale = 1.0 / np.sqrt(config.d_model)
    arrays: dict[str, np.ndarray] = {}
    cursor = 0
    for name, shape in tensor_layout(config):
        n = int(np.prod(shape))
        if len(shape) == 1:
            arrays[name] = np.ones(shape)
            continue
        z = splitmix64(seed, n, cursor)
        cursor += n
        u = (z >> np.uint64(11)).astype(DTYPE) * 2.0**-53
        arrays[name] = ((2.0 * u - 1.0) * scale).reshape(shape)
    return ModelWeights.from_arrays(config, arrays)


# --------------------------------------------------------------------------
# weight file I/O


class WeightFormatError(ValueError):
    code = "weights_error"


class BadMagicError(WeightFormatError):
    code = "bad_magic"


class BadVersionError(WeightFormatError):
    code = "bad_version"


class TruncatedFileError(WeightFormatError):
    code = "truncated"


class HeaderShapeMismatchError(WeightFormatError):
    code = "shape_mismatch"


def save_weights(weights: ModelWeights, path: str | Path) -> int:
    """Write ``weights`` to ``path``; returns the content hash."""
    data = weights.to_bytes()
    Path(path).write_bytes(data)
    return fnv1a64(data)


def weights_from_bytes(data: bytes) -> ModelWeights:
    if len(data) < _HEADER.size:
        if data[:4] != WEIGHTS_MAGIC[: len(data[:4])]:
            raise BadMagicError("weight file: bad magic")
        raise TruncatedFileError(f"weight file: {len(data)} bytes is shorter than the header")
    magic, version, *dims = _HEADER.unpack_from(data)
    if magic != WEIGHTS_MAGIC:
        raise BadMagicError(f"weight file: bad magic {magic!r}")
    if version != WEIGHTS_VERSION:
        raise BadVersionError(f"weight file: unsupported version {version}")
    try:
        cfg = ModelConfig(*dims)
    except ValueError as exc:
        raise HeaderShapeMismatchError(f"weight file: invalid header dimensions: {exc}") from exc
    expected = weights_file_size(cfg)
    if len(data) < expected:
        raise TruncatedFileError(f"weight file: {len(data)} bytes, header implies {expected}")
    if len(data) > expected:
        raise HeaderShapeMismatchError(
            f"weight file: {len(data)} bytes, header implies {expected}"
        )
    arrays = {}
    offset = _HEADER.size
    for name, shape in tensor_layout(cfg):
        n = int(np.prod(shape))
        arrays[name] = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(shape)
        offset += 4 * n
    return ModelWeights.from_arrays(cfg, arrays)


def load_weights(path: str | Path) -> ModelWeights:
    return weights_from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------------
# tokenization

SPAN_NAMES = ("prefix", "context", "query")


@dataclass(frozen=True)
class TokenSequence:
    """Token ids plus contiguous named spans ``prefix``, ``context``, ``query``."""

    ids: tuple[int, ...]
    spans: dict[str, tuple[int, int]]

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        pos = 0
        for name in SPAN_NAMES:
            if name not in self.spans:
                continue
            start, end = self.spans[name]
            if start != pos or end < start:
                raise ValueError(f"span {name}={self.spans[name]} is not contiguous at {pos}")
            pos = end
        if pos != len(self.ids) or set(self.spans) - set(SPAN_NAMES):
            raise ValueError(f"spans {self.spans} do not cover [0, {len(self.ids)})")

    def __len__(self) -> int:
        return len(self.ids)

    def span_len(self, name: str) -> int:
        start, end = self.spans.get(name, (0, 0))
        return end - start

    def __add__(self, other: TokenSequence) -> TokenSequence:
        n = len(self.ids)
        spans = dict(self.spans)
        for name, (start, end) in other.spans.items():
            if name in spans:
                raise ValueError(f"span {name} appears in both operands")
            spans[name] = (start + n, end + n)
        return TokenSequence(self.ids + other.ids, spans)


def _as_bytes(text: str | bytes) -> bytes:
    return text.encode("utf-8") if isinstance(text, str) else bytes(text)


def tokenize(text: str | bytes, role: str = "context", bos: bool = False) -> TokenSequence:
    """Byte-level tokenization: byte ``b`` maps to id ``b + 3``.

    ``bos`` prepends the BOS id; only the first fragment of a sequence should set it.
    """
    if role not in SPAN_NAMES:
        raise ValueError(f"unknown span role {role!r}")
    ids = ([BOS_ID] if bos else []) + [b + N_SPECIAL for b in _as_bytes(text)]
    return TokenSequence(tuple(ids), {role: (0, len(ids))})


def detokenize_bytes(ids: Iterable[int]) -> bytes:
    return bytes(i - N_SPECIAL for i in ids if i >= N_SPECIAL)


def detokenize(ids: Iterable[int]) -> str:
    return detokenize_bytes(ids).decode("utf-8", errors="replace")


PREFIX_SEPARATOR = "\n"


def build_sequence(prefix: str, context: str, query: str = "") -> TokenSequence:
    """Assemble ``BOS prefix "\\n" | context | query`` with named spans.

    The separator is omitted for an empty prefix. The query span is kept even
    when empty so that ``spans`` always has all three names.
    """
    head = prefix + PREFIX_SEPARATOR if prefix else ""
    return (tokenize(head, "prefix", bos=True) + tokenize(context, "context")
            + tokenize(query, "query"))


# --------------------------------------------------------------------------
# KV cache


@dataclass(frozen=True, eq=False)
class KVCache:
    """Per-layer keys/values of shape ``(heads, cached_len, head_dim)``.

    ``prefix_len`` optionally records how many leading tokens belong to the
    prefix span (BOS included); it is metadata for the steering code and the
    cache store and does not affect the numerics.
    """

    keys: tuple[np.ndarray, ...]
    values: tuple[np.ndarray, ...]
    token_ids: tuple[int, ...]
    position_offset: int = 0
    prefix_len: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "token_ids", tuple(int(t) for t in self.token_ids))
        if len(self.keys) != len(self.values):
            raise ShapeError("keys and values must have the same layer count")
        n = len(self.token_ids)
        for k, v in zip(self.keys, self.values):
            if k.ndim != 3 or k.shape != v.shape or k.shape[1] != n:
                raise ShapeError(
                    f"cache layer shapes {k.shape}/{v.shape} inconsistent with {n} tokens"
                )
        if self.position_offset != 0:
            raise ValueError("caches always start at position 0")

    @property
    def cached_len(self) -> int:
        return len(self.token_ids)

    @property
    def n_layers(self) -> int:
        return len(self.keys)

    @classmethod
    def empty(cls, config: ModelConfig) -> KVCache:
        blank = np.zeros((config.n_heads, 0, config.head_dim))
        return cls(tuple(blank for _ in range(config.n_layers)),
                   tuple(blank for _ in range(config.n_layers)), ())

    def equals(self, other: KVCache) -> bool:
        """Bit-level equality of ids and tensors."""
        return (
            self.token_ids == other.token_ids
            and len(self.keys) == len(other.keys)
            and all(np.array_equal(a, b) for a, b in zip(self.keys, other.keys))
            and all(np.array_equal(a, b) for a, b in zip(self.values, other.values))
        )


# --------------------------------------------------------------------------
# attention hooks


class AttentionHook(Protocol):
    """Called once per layer with the per-head attention ``(heads, rows, cols)``.

    ``row_offset`` is the absolute position of the first query row. The hook
    returns a tensor of identical shape; a hook with a truthy ``renormalize``
    attribute must return row-stochastic attention.
    """

    def __call__(self, layer: int, attn: np.ndarray, row_offset: int) -> np.ndarray: ...


class HookError(RuntimeError):
    pass


def _apply_hook(hook: AttentionHook, layer: int, attn: np.ndarray, row_offset: int) -> np.ndarray:
    out = hook(layer, attn, row_offset)
    out = np.asarray(out, dtype=DTYPE)
    if out.shape != attn.shape:
        raise HookError(
            f"attention hook at layer {layer} changed shape {attn.shape} -> {out.shape}"
        )
    if getattr(hook, "renormalize", False):
        sums = out.sum(axis=-1)
        if out.size and np.max(np.abs(sums - 1.0)) > ROW_SUM_TOL:
            raise HookError(f"renormalizing hook at layer {layer} returned non-stochastic rows")
    return out


# --------------------------------------------------------------------------
# forward pass


@dataclass
class ForwardResult:
    cache: KVCache
    logits: np.ndarray  # (new tokens, vocab)
    hidden: np.ndarray  # residual stream before the final norm, (new tokens, d_model)
    attention: list[np.ndarray] | None = None  # per layer (heads, new, total), pre-hook


def _forward(
    weights: ModelWeights,
    ids: Sequence[int],
    cache: KVCache,
    hook: AttentionHook | None,
    record_attention: bool,
    counter: OpCounter | None,
) -> ForwardResult:
    cfg = weights.config
    start = cache.cached_len
    n = len(ids)
    total = start + n
    if total > cfg.max_positions:
        raise ValueError(
            f"sequence of {total} tokens exceeds max_positions={cfg.max_positions}"
        )
    if cache.n_layers != cfg.n_layers:
        raise ShapeError(f"cache has {cache.n_layers} layers, model has {cfg.n_layers}")
    ids_arr = np.asarray(ids, dtype=np.int64)
    if n and (ids_arr.min() < 0 or ids_arr.max() >= cfg.vocab_size):
        raise ValueError("token id out of range")

    H, hd = cfg.n_heads, cfg.head_dim
    scale = 1.0 / np.sqrt(hd)
    x = weights.token_embedding[ids_arr] + weights.position_embedding[start:total]
    new_keys, new_values, records = [], [], []
    for li, lw in enumerate(weights.layers):
        h = rms_norm(x, lw.attn_norm, NORM_EPS)
        q = matmul(h, lw.wq, counter).reshape(n, H, hd).transpose(1, 0, 2)
        k = matmul(h, lw.wk, counter).reshape(n, H, hd).transpose(1, 0, 2)
        v = matmul(h, lw.wv, counter).reshape(n, H, hd).transpose(1, 0, 2)
        k_all = np.concatenate([cache.keys[li], k], axis=1)
        v_all = np.concatenate([cache.values[li], v], axis=1)
        attn = np.empty((H, n, total))
        for head in range(H):
            scores = matmul(q[head], k_all[head].T, counter) * scale
            attn[head] = row_softmax(scores, causal_mask=True, row_offset=start, counter=counter)
        if record_attention:
            records.append(attn.copy())
        if hook is not None:
            attn = _apply_hook(hook, li, attn, start)
        heads_out = np.empty((n, cfg.d_model))
        for head in range(H):
            heads_out[:, head * hd:(head + 1) * hd] = matmul(attn[head], v_all[head], counter)
        x = x + matmul(heads_out, lw.wo, counter)
        h2 = rms_norm(x, lw.ffn_norm, NORM_EPS)
        x = x + matmul(gelu(matmul(h2, lw.ffn_in, counter)), lw.ffn_out, counter)
        new_keys.append(k_all)
        new_values.append(v_all)
    logits = matmul(rms_norm(x, weights.final_norm, NORM_EPS), weights.token_embedding.T, counter)
    new_cache = KVCache(tuple(new_keys), tuple(new_values),
                        cache.token_ids + tuple(int(i) for i in ids_arr),
                        prefix_len=cache.prefix_len)
    return ForwardResult(new_cache, logits, x, records if record_attention else None)


def prefill(
    weights: ModelWeights,
    tokens: TokenSequence | Sequence[int],
    hook: AttentionHook | None = None,
    record_attention: bool = False,
    counter: OpCounter | None = None,
) -> ForwardResult:
    """Run the full prompt from position 0 and return its cache.

    When ``tokens`` is a :class:`TokenSequence` the cache records the prefix
    span length.
    """
    ids = tokens.ids if isinstance(tokens, TokenSequence) else tuple(tokens)
    result = _forward(weights, ids, KVCache.empty(weights.config), hook, record_attention, counter)
    if isinstance(tokens, TokenSequence) and "prefix" in tokens.spans:
        c = result.cache
        result.cache = KVCache(c.keys, c.values, c.token_ids, prefix_len=tokens.span_len("prefix"))
    return result


def extend(
    weights: ModelWeights,
    cache: KVCache,
    new_tokens: TokenSequence | Sequence[int],
    hook: AttentionHook | None = None,
    counter: OpCounter | None = None,
    record_attention: bool = False,
) -> ForwardResult:
    """Process ``new_tokens`` at positions ``cache.cached_len ..`` on top of ``cache``.

    Only the new rows are computed. ``cache`` itself is not modified.
    """
    ids = new_tokens.ids if isinstance(new_tokens, TokenSequence) else tuple(new_tokens)
    if not ids:
        cfg = weights.config
        return ForwardResult(cache, np.zeros((0, cfg.vocab_size)), np.zeros((0, cfg.d_model)),
                             [] if record_attention else None)
    return _forward(weights, ids, cache, hook, record_attention, counter)


def generate(
    weights: ModelWeights,
    cache: KVCache,
    query: TokenSequence | Sequence[int],
    max_new: int,
    hook: AttentionHook | None = None,
    counter: OpCounter | None = None,
    on_prefill: Callable[[ForwardResult], None] | None = None,
) -> list[int]:
    """Greedy decoding after extending ``cache`` with ``query``.

    Stops at EOS (not included in the output) or after ``max_new`` tokens.
    Ties in the argmax go to the lowest token id. ``on_prefill`` receives
    the result of the query extension, before any decode step.
    """
    if max_new <= 0:
        return []
    ids = query.ids if isinstance(query, TokenSequence) else tuple(query)
    if not ids:
        raise ValueError("generate needs at least one query token")
    step = extend(weights, cache, ids, hook, counter)
    if on_prefill is not None:
        on_prefill(step)
    out: list[int] = []
    for _ in range(max_new):
        token = int(np.argmax(step.logits[-1]))
        if token == EOS_ID:
            break
        out.append(token)
        if len(out) == max_new:
            break
        if step.cache.cached_len >= weights.config.max_positions:
            break
        step = extend(weights, step.cache, (token,), hook, counter)
    return out
