import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from batchspec.toy_lm import EOS, PAD, LayerKV, ModelConfig, forward, greedy_next, init_model

content = st.lists(st.integers(2, 15), min_size=1, max_size=12)


def full(model, seq):
    n = len(seq)
    return forward(model, np.array([seq]), np.ones((1, n), int), np.arange(n)[None])


def test_same_config_same_weights():
    cfg = ModelConfig(num_layers=2, num_heads=2, head_dim=16, vocab_size=64, seed=7)
    a, b = init_model(cfg), init_model(cfg)
    assert all(np.array_equal(x, y) for x, y in zip(a.weights(), b.weights()))


def test_weights_are_read_only(small):
    with pytest.raises(ValueError):
        small.embed[0, 0] = 1.0


def test_seed_changes_logits():
    cfg = ModelConfig(num_layers=4, num_heads=4, head_dim=16, vocab_size=64, seed=7)
    seq = [5, 9, 2, 33, 17]
    a = full(init_model(cfg), seq).logits
    b = full(init_model(ModelConfig(**{**cfg.to_dict(), "seed": 8})), seq).logits
    assert np.any(a != b)


@pytest.mark.parametrize("bad", [
    {"num_layers": 0}, {"num_heads": 0}, {"head_dim": 0}, {"vocab_size": 3}, {"max_position": 0},
])
def test_invalid_config(bad):
    with pytest.raises(ValueError):
        init_model(ModelConfig(**bad))


def test_memory_ceiling():
    with pytest.raises(ValueError, match="max_position"):
        init_model(ModelConfig(max_position=1 << 20, head_dim=64), memory_ceiling=1 << 24)


def test_config_round_trip():
    cfg = ModelConfig(num_layers=3, seed=-5, prior_weight=1.5)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"num_layer": 2})


@given(content)
def test_cache_consistency(seq):
    model = init_model(ModelConfig(num_layers=2, num_heads=2, head_dim=4, vocab_size=16, seed=3))
    whole = full(model, seq)
    cache = None
    for p, tok in enumerate(seq):
        out = forward(model, np.array([[tok]]), np.ones((1, p + 1), int), np.array([[p]]), cache)
        cache = out.cache
        assert np.array_equal(out.logits[0, 0], whole.logits[0, p])
    for c, w in zip(cache, whole.cache):
        assert np.array_equal(c.keys, w.keys) and np.array_equal(c.values, w.values)


@given(content, st.lists(st.integers(0, 10), min_size=3, max_size=3), st.integers(0, 3))
def test_padding_invariance(seq, other_lens, slot):
    model = init_model(ModelConfig(num_layers=2, num_heads=2, head_dim=4, vocab_size=16, seed=3))
    rng = np.random.default_rng(len(seq))
    rows = [rng.integers(2, 16, size=max(1, n)).tolist() for n in other_lens]
    rows.insert(slot, seq)
    width = max(map(len, rows)) + 2
    tokens = np.full((4, width), PAD)
    mask = np.zeros((4, width), int)
    pos = np.zeros((4, width), int)
    for i, r in enumerate(rows):
        tokens[i, width - len(r):] = r
        mask[i, width - len(r):] = 1
        pos[i, width - len(r):] = np.arange(len(r))
    batched = forward(model, tokens, mask, pos).logits[slot, width - len(seq):]
    assert np.array_equal(batched, full(model, seq).logits[0])


def test_fully_masked_row_is_finite(small):
    out = forward(small, np.array([[3, 4], [PAD, PAD]]), np.array([[1, 1], [0, 0]]), np.zeros((2, 2), int))
    assert np.all(np.isfinite(out.logits))
    assert np.all(out.cache[0].keys[1] == 0.0)


@given(content, st.data())
def test_causality(seq, data):
    model = init_model(ModelConfig(num_layers=2, num_heads=2, head_dim=4, vocab_size=16, seed=3))
    p = data.draw(st.integers(0, len(seq) - 1))
    changed = list(seq)
    changed[p] = 2 + (changed[p] - 1) % 14
    a, b = full(model, seq).logits, full(model, changed).logits
    assert np.array_equal(a[0, :p], b[0, :p])


def test_position_ids_are_looked_up_by_value(small):
    seq = np.array([[3, 4, 5]])
    mask = np.ones((1, 3), int)
    a = forward(small, seq, mask, np.array([[0, 1, 2]])).logits
    b = forward(small, seq, mask, np.array([[1, 2, 3]])).logits
    assert np.any(a != b)


def test_pad_never_predicted(small):
    logits = full(small, [3, 4, 5, 6]).logits
    assert np.all(np.argmax(logits, -1) != PAD)


def test_eos_bias_raises_eos_logit():
    base = ModelConfig(num_layers=1, num_heads=1, head_dim=4, vocab_size=16, seed=1)
    a = full(init_model(base), [3, 4]).logits
    b = full(init_model(ModelConfig(**{**base.to_dict(), "eos_bias": 2.5})), [3, 4]).logits
    assert np.allclose(b[..., EOS] - a[..., EOS], 2.5)


def test_deterministic_repeat(small):
    a, b = full(small, [2, 7, 9]), full(small, [2, 7, 9])
    assert np.array_equal(a.logits, b.logits)


@pytest.mark.parametrize("args", [
    (np.array([[3, 4]]), np.ones((1, 3), int), np.array([[0, 1]])),
    (np.array([[3, 4]]), np.ones((1, 2), int), np.array([[0]])),
    (np.array([[3, 99]]), np.ones((1, 2), int), np.array([[0, 1]])),
    (np.array([[3, 4]]), np.ones((1, 2), int), np.array([[0, 600]])),
    (np.zeros((1, 0), int), np.ones((1, 0), int), np.zeros((1, 0), int)),
])
def test_forward_shape_errors(small, args):
    with pytest.raises(ValueError):
        forward(small, *args)


def test_forward_cache_shape_mismatch(small):
    cache = [LayerKV(np.zeros((2, 2, 3, 4)), np.zeros((2, 2, 3, 4))) for _ in range(2)]
    with pytest.raises(ValueError):
        forward(small, np.array([[3]]), np.ones((1, 4), int), np.array([[3]]), cache)


def test_layer_kv_invariants():
    with pytest.raises(ValueError):
        LayerKV(np.zeros((1, 1, 2, 4)), np.zeros((1, 1, 3, 4)))
    with pytest.raises(ValueError):
        LayerKV(np.zeros((1, 2, 4)), np.zeros((1, 2, 4)))


@pytest.mark.parametrize("row, expected", [
    ([0.1, 0.9, 0.3], 1),
    ([0.5, 0.5], 0),
    ([0.25] * 8, 0),
])
def test_greedy_next(row, expected):
    assert greedy_next(row) == expected


def test_greedy_next_nan():
    with pytest.raises(ValueError):
        greedy_next([0.1, float("nan")])
