import os
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnsteer.digest import fnv1a64
from attnsteer.model import (
    BOS_ID,
    EOS_ID,
    N_SPECIAL,
    BadMagicError,
    HeaderShapeMismatchError,
    HookError,
    KVCache,
    ModelConfig,
    TruncatedFileError,
    build_sequence,
    detokenize_bytes,
    extend,
    generate,
    init_random,
    load_weights,
    prefill,
    save_weights,
    splitmix64,
    tokenize,
    weights_file_size,
)
from attnsteer.tensor import OpCounter

import oracles
from conftest import TINY

# content hash of init_random(ModelConfig(), seed=42), frozen from the first build
GOLDEN_SEED42_HASH = 0x07173BAF2EAF322E


# tokenizer ---------------------------------------------------------------


def test_tokenize_empty():
    assert tokenize("", "context").ids == ()


def test_tokenize_bytes_offset():
    assert tokenize("AB", "context").ids == (65 + N_SPECIAL, 66 + N_SPECIAL)
    assert tokenize("AB", "prefix", bos=True).ids == (BOS_ID, 68, 69)


def test_tokenizer_round_trip_random_bytes():
    rnd = random.Random(0)
    for _ in range(1000):
        data = bytes(rnd.randrange(256) for _ in range(rnd.randrange(0, 40)))
        assert detokenize_bytes(tokenize(data).ids) == data


def test_build_sequence_spans():
    seq = build_sequence("P", "ctx", "q?")
    assert seq.spans == {"prefix": (0, 3), "context": (3, 6), "query": (6, 8)}
    assert seq.ids[0] == BOS_ID
    assert detokenize_bytes(seq.ids) == b"P\nctxq?"


def test_token_sequence_rejects_gaps():
    from attnsteer.model import TokenSequence
    with pytest.raises(ValueError):
        TokenSequence((1, 2, 3), {"prefix": (0, 1), "context": (2, 3)})


# config / init -----------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=3)
    with pytest.raises(ValueError):
        ModelConfig(n_layers=0)


def test_splitmix64_reference_stream():
    # reference outputs of SplitMix64 seeded with 0
    z = splitmix64(0, 3)
    assert [int(v) for v in z] == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]
    assert np.array_equal(splitmix64(99, 4, start=2), splitmix64(99, 6)[2:])


def test_init_deterministic():
    a, b = init_random(TINY, 3), init_random(TINY, 3)
    assert a.content_hash == b.content_hash
    assert init_random(TINY, 4).content_hash != a.content_hash


def test_init_scale_and_gains():
    w = init_random(TINY, 3)
    bound = 1 / np.sqrt(TINY.d_model)
    assert np.all(np.abs(w.layers[0].wq) <= bound)
    assert np.all(w.layers[1].ffn_norm == 1.0) and np.all(w.final_norm == 1.0)


def test_golden_hash_seed42(default_weights):
    assert default_weights.content_hash == GOLDEN_SEED42_HASH


def test_content_hash_matches_pure_python_fnv(tiny_weights):
    assert tiny_weights.content_hash == oracles.fnv1a64(tiny_weights.to_bytes())


def test_weights_are_read_only(tiny_weights):
    with pytest.raises(ValueError):
        tiny_weights.layers[0].wq[0, 0] = 1.0


# weight files ------------------------------------------------------------


def test_save_load_round_trip(tmp_path, tiny_weights):
    path = tmp_path / "w.bin"
    digest = save_weights(tiny_weights, path)
    assert digest == tiny_weights.content_hash
    loaded = load_weights(path)
    assert loaded.content_hash == tiny_weights.content_hash
    for (_, a), (_, b) in zip(loaded.tensors(), tiny_weights.tensors()):
        assert np.array_equal(a, b)


def test_weight_file_size_formula(tmp_path, tiny_weights):
    path = tmp_path / "w.bin"
    save_weights(tiny_weights, path)
    c = TINY
    per_layer = 4 * c.d_model**2 + 2 * c.d_model * c.d_ff + 2 * c.d_model
    n_floats = (c.vocab_size * c.d_model + c.max_positions * c.d_model
                + c.n_layers * per_layer + c.d_model)
    assert os.path.getsize(path) == 32 + 4 * n_floats == weights_file_size(c)


def test_bad_magic(tmp_path, tiny_weights):
    data = bytearray(tiny_weights.to_bytes())
    data[0] ^= 0xFF
    (tmp_path / "w.bin").write_bytes(bytes(data))
    with pytest.raises(BadMagicError) as exc:
        load_weights(tmp_path / "w.bin")
    assert exc.value.code == "bad_magic"


def test_truncated_and_oversized(tmp_path, tiny_weights):
    data = tiny_weights.to_bytes()
    (tmp_path / "t.bin").write_bytes(data[:-4])
    with pytest.raises(TruncatedFileError) as exc:
        load_weights(tmp_path / "t.bin")
    assert exc.value.code == "truncated"
    (tmp_path / "o.bin").write_bytes(data + b"\0\0\0\0")
    with pytest.raises(HeaderShapeMismatchError) as exc:
        load_weights(tmp_path / "o.bin")
    assert exc.value.code == "shape_mismatch"


# forward pass ------------------------------------------------------------


def test_single_bos_prefill(tiny_weights):
    res = prefill(tiny_weights, [BOS_ID], record_attention=True)
    assert res.cache.cached_len == 1
    for attn in res.attention:
        assert attn.shape == (TINY.n_heads, 1, 1)
        assert np.all(attn == 1.0)


def test_identity_hook_is_bit_identical(tiny_weights, rng):
    ids = rng.integers(3, 259, size=20).tolist()
    plain = prefill(tiny_weights, ids)
    hooked = prefill(tiny_weights, ids, hook=lambda layer, a, off: a)
    assert np.array_equal(plain.logits, hooked.logits)


def test_prefill_is_reproducible(tiny_weights, rng):
    ids = rng.integers(3, 259, size=32).tolist()
    a, b = prefill(tiny_weights, ids), prefill(tiny_weights, ids)
    assert np.array_equal(a.logits, b.logits)


def test_attention_rows_sum_to_one(tiny_weights, rng):
    res = prefill(tiny_weights, rng.integers(3, 259, size=40).tolist(), record_attention=True)
    for attn in res.attention:
        assert np.max(np.abs(attn.sum(axis=-1) - 1)) <= 1e-12
        assert np.all(np.triu(attn, k=1) == 0)


def test_extend_matches_full_prefill(tiny_weights, rng):
    ids = rng.integers(3, 259, size=50).tolist()
    full = prefill(tiny_weights, ids)
    part = extend(tiny_weights, prefill(tiny_weights, ids[:37]).cache, ids[37:])
    assert np.max(np.abs(full.logits[37:] - part.logits)) < 1e-9
    assert part.cache.cached_len == 50


def test_extend_empty_is_noop(tiny_weights):
    cache = prefill(tiny_weights, [BOS_ID, 70, 71]).cache
    res = extend(tiny_weights, cache, [])
    assert res.cache is cache and res.logits.shape[0] == 0


def test_extend_leaves_input_cache_alone(tiny_weights):
    cache = prefill(tiny_weights, [BOS_ID, 70, 71]).cache
    keys_before = [k.copy() for k in cache.keys]
    extend(tiny_weights, cache, [72, 73])
    assert cache.cached_len == 3
    assert all(np.array_equal(a, b) for a, b in zip(keys_before, cache.keys))


def test_position_overflow_rejected(tiny_weights):
    cache = prefill(tiny_weights, [70] * 500).cache
    with pytest.raises(ValueError, match="max_positions"):
        extend(tiny_weights, cache, [70] * 13)
    with pytest.raises(ValueError):
        prefill(tiny_weights, [70] * 513)


def test_shared_prefix_gives_identical_kv(tiny_weights, rng):
    shared = rng.integers(3, 259, size=12).tolist()
    a = prefill(tiny_weights, shared + [80, 81, 82]).cache
    b = prefill(tiny_weights, shared + [90]).cache
    for ka, kb, va, vb in zip(a.keys, b.keys, a.values, b.values):
        assert np.array_equal(ka[:, :12], kb[:, :12])
        assert np.array_equal(va[:, :12], vb[:, :12])


def test_extend_attention_row_count(default_weights):
    cfg = default_weights.config
    prompt = [BOS_ID] + [70] * 511
    full_counter, ext_counter = OpCounter(), OpCounter()
    prefill(default_weights, prompt + [71] * 8, counter=full_counter)
    cache = prefill(default_weights, prompt).cache
    extend(default_weights, cache, [71] * 8, counter=ext_counter)
    assert ext_counter.softmax_rows == 8 * cfg.n_layers * cfg.n_heads
    assert full_counter.softmax_rows == 520 * cfg.n_layers * cfg.n_heads
    assert ext_counter.softmax_rows / full_counter.softmax_rows == pytest.approx(8 / 520)


def test_attention_flops_grow_quadratically(tiny_weights):
    """Attention FMAs (QK^T + AV) per layer are 2 * n^2 * d_model; the rest is linear in n."""
    counts = {}
    for n in (32, 64, 128):
        c = OpCounter()
        prefill(tiny_weights, [70] * n, counter=c)
        counts[n] = c.fused_multiply_adds
    cfg = tiny_weights.config
    linear_per_token = cfg.n_layers * (4 * cfg.d_model**2 + 2 * cfg.d_model * cfg.d_ff) \
        + cfg.d_model * cfg.vocab_size
    for n, total in counts.items():
        quad = total - linear_per_token * n
        assert quad == 2 * cfg.n_layers * cfg.d_model * n * n
    # doubling n quadruples the attention term
    q = {n: counts[n] - linear_per_token * n for n in counts}
    assert q[64] / q[32] == 4 and q[128] / q[64] == 4


def test_hook_shape_change_rejected(tiny_weights):
    with pytest.raises(HookError, match="shape"):
        prefill(tiny_weights, [BOS_ID, 70, 71], hook=lambda l, a, off: a[:, :, :-1])


def test_renormalizing_hook_checked(tiny_weights):
    class Bad:
        renormalize = True

        def __call__(self, layer, attn, off):
            return attn * 2

    with pytest.raises(HookError, match="stochastic"):
        prefill(tiny_weights, [BOS_ID, 70, 71], hook=Bad())


def test_hook_sees_decode_row_offset(tiny_weights):
    seen = []
    cache = prefill(tiny_weights, [BOS_ID, 70, 71]).cache
    extend(tiny_weights, cache, [72, 73],
           hook=lambda l, a, off: seen.append((l, a.shape, off)) or a)
    assert seen == [(0, (2, 2, 5), 3), (1, (2, 2, 5), 3)]


# generation --------------------------------------------------------------


def test_generate_zero_tokens(tiny_weights):
    cache = prefill(tiny_weights, [BOS_ID, 70]).cache
    assert generate(tiny_weights, cache, [71], 0) == []


def test_generate_deterministic_and_matches_extend_loop(tiny_weights):
    cache = prefill(tiny_weights, build_sequence("prefix", "some context")).cache
    query = tokenize(" question?", "query").ids
    out = generate(tiny_weights, cache, query, 12)
    assert out == generate(tiny_weights, cache, query, 12)

    expected = []
    step = extend(tiny_weights, cache, query)
    for _ in range(12):
        logits = step.logits[-1]
        best = max(range(len(logits)), key=lambda i: (logits[i], -i))
        if best == EOS_ID:
            break
        expected.append(best)
        step = extend(tiny_weights, step.cache, [best])
    assert out == expected


def test_generate_stops_at_eos():
    from conftest import blank_arrays, build_weights
    cfg = ModelConfig(n_layers=1, n_heads=1, d_model=4, d_ff=4, max_positions=32)
    arrays = blank_arrays(cfg)
    arrays["token_embedding"][:, 0] = 1.0
    arrays["token_embedding"][EOS_ID, 0] = 2.0
    w = build_weights(cfg, arrays)
    assert generate(w, KVCache.empty(cfg), [BOS_ID, 70], 5) == []


def test_generate_argmax_ties_lowest_id():
    from conftest import blank_arrays, build_weights
    cfg = ModelConfig(n_layers=1, n_heads=1, d_model=4, d_ff=4, max_positions=32)
    w = build_weights(cfg, blank_arrays(cfg))  # all logits zero
    assert generate(w, KVCache.empty(cfg), [BOS_ID], 3) == [0, 0, 0]


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 60), st.integers(1, 20), st.integers(0, 2**32))
def test_cache_equivalence_property(split, q_len, seed):
    w = init_random(TINY, 11)
    r = np.random.default_rng(seed)
    ids = r.integers(3, 259, size=split + q_len).tolist()
    full = prefill(w, ids)
    part = extend(w, prefill(w, ids[:split]).cache, ids[split:])
    assert np.max(np.abs(full.logits[split:] - part.logits)) < 1e-9


def test_fnv_matches_reference():
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    data = bytes(range(256)) * 3
    assert fnv1a64(data) == oracles.fnv1a64(data)
    assert fnv1a64(data[100:], fnv1a64(data[:100])) == fnv1a64(data)
