"""Miniature causal-attention language model with an explicit KV cache.

Every reduction (matrix products, attention scores, softmax sums, norms) adds
strictly left to right, either as an explicit loop over the contracted axis
or through :func:`numpy.add.accumulate`.  A
row's result therefore never depends on the batch it sits in, on how many
masked zero terms precede it, or on how the input was chunked between cached
forward calls.  Padding invariance and cache consistency hold bit-for-bit
rather than approximately.

Weights are drawn from ``numpy.random.Generator(PCG64(seed))`` with
``standard_normal`` in a fixed order: embedding, then per layer the fused
QKV, output, MLP-up and MLP-down projections, then the unembedding.  Each
matrix is scaled by ``1/sqrt(fan_in)``.

``prior_weight`` adds a bigram table indexed by the current token, drawn from
its own ``prior_seed``.  Two models with different weight seeds but the same
prior seed play the part of a draft/target pair trained on common data: they
agree on a tunable fraction of greedy predictions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PAD = 0
EOS = 1
FIRST_CONTENT_ID = 2

# Logit pinned on the pad id so greedy decoding never emits it.
PAD_LOGIT = -1.0e9

DEFAULT_MEMORY_CEILING = 1 << 24


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    num_heads: int = 2
    head_dim: int = 8
    vocab_size: int = 32
    max_position: int = 512
    seed: int = 0
    mlp_ratio: int = 2
    eos_bias: float = 0.0
    prior_weight: float = 0.0
    prior_seed: int = 0

    @property
    def d_model(self) -> int:
        return self.num_heads * self.head_dim

    def validate(self) -> None:
        for name in ("num_layers", "num_heads", "head_dim", "vocab_size", "max_position", "mlp_ratio"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.vocab_size < 4:
            raise ValueError("vocab_size must be >= 4 (pad, eos and content ids)")
        for name in ("seed", "prior_seed"):
            if not 0 <= int(getattr(self, name)) < 2**64:
                raise ValueError(f"{name} must fit in an unsigned 64-bit integer")

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "head_dim": self.head_dim,
            "vocab_size": self.vocab_size,
            "max_position": self.max_position,
            "seed": self.seed,
            "mlp_ratio": self.mlp_ratio,
            "eos_bias": self.eos_bias,
            "prior_weight": self.prior_weight,
            "prior_seed": self.prior_seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {k: data[k] for k in cls().to_dict() if k in data}
        unknown = set(data) - set(known)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**known)


@dataclass
class LayerKV:
    """Keys and values for one layer, shaped (batch, heads, seq, head_dim)."""

    keys: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.keys.shape != self.values.shape:
            raise ValueError(f"keys {self.keys.shape} and values {self.values.shape} differ")
        if self.keys.ndim != 4:
            raise ValueError(f"LayerKV tensors must be rank 4, got {self.keys.ndim}")

    @property
    def seq_len(self) -> int:
        return self.keys.shape[2]

    @property
    def batch_size(self) -> int:
        return self.keys.shape[0]


@dataclass
class ForwardOutput:
    logits: np.ndarray
    cache: list[LayerKV]


@dataclass(frozen=True)
class _Layer:
    norm_attn: np.ndarray
    w_qkv: np.ndarray
    w_o: np.ndarray
    norm_mlp: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray


@dataclass(frozen=True, eq=False)
class Model:
    """Immutable weights plus the precomputed sinusoidal position table."""

    config: ModelConfig
    embed: np.ndarray
    layers: tuple[_Layer, ...]
    norm_final: np.ndarray
    w_out: np.ndarray
    positions: np.ndarray = field(repr=False)
    prior: np.ndarray | None = field(default=None, repr=False)

    def weights(self) -> list[np.ndarray]:
        out = [self.embed]
        for layer in self.layers:
            out += [layer.norm_attn, layer.w_qkv, layer.w_o, layer.norm_mlp, layer.w_up, layer.w_down]
        return out + [self.norm_final, self.w_out]

    def empty_cache(self, batch_size: int) -> list[LayerKV]:
        shape = (batch_size, self.config.num_heads, 0, self.config.head_dim)
        return [LayerKV(np.zeros(shape), np.zeros(shape)) for _ in self.layers]


def sinusoidal_table(max_position: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_position, dtype=np.float64)[:, None]
    idx = np.arange(0, d_model, 2, dtype=np.float64)
    inv_freq = 1.0 / (10000.0 ** (idx / d_model))
    table = np.zeros((max_position, d_model))
    table[:, 0::2] = np.sin(pos * inv_freq)
    table[:, 1::2] = np.cos(pos * inv_freq)[:, : d_model // 2]
    return table


def init_model(config: ModelConfig, memory_ceiling: int = DEFAULT_MEMORY_CEILING) -> Model:
    """Build a model whose weights are a pure function of ``config``."""
    config.validate()
    if config.max_position * config.head_dim > memory_ceiling:
        raise ValueError(
            f"max_position * head_dim = {config.max_position * config.head_dim} "
            f"exceeds memory ceiling {memory_ceiling}"
        )
    rng = np.random.Generator(np.random.PCG64(int(config.seed)))
    d = config.d_model
    hidden = d * config.mlp_ratio

    def draw(fan_in, fan_out):
        return rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)

    embed = rng.standard_normal((config.vocab_size, d))
    layers = []
    for _ in range(config.num_layers):
        layers.append(
            _Layer(
                norm_attn=np.ones(d),
                w_qkv=draw(d, 3 * d),
                w_o=draw(d, d),
                norm_mlp=np.ones(d),
                w_up=draw(d, hidden),
                w_down=draw(hidden, d),
            )
        )
    w_out = draw(d, config.vocab_size)
    prior = None
    if config.prior_weight:
        prior_rng = np.random.Generator(np.random.PCG64(int(config.prior_seed)))
        prior = config.prior_weight * prior_rng.standard_normal((config.vocab_size, config.vocab_size))
    model = Model(
        config=config,
        embed=embed,
        layers=tuple(layers),
        norm_final=np.ones(d),
        w_out=w_out,
        positions=sinusoidal_table(config.max_position, d),
        prior=prior,
    )
    for w in model.weights():
        w.setflags(write=False)
    model.positions.setflags(write=False)
    if prior is not None:
        prior.setflags(write=False)
    return model


# Product tensors up to this size are reduced with one accumulate call;
# larger ones loop over the contracted axis.  Both add in the same order.
_ACCUMULATE_LIMIT = 1 << 14


def _seqsum(x: np.ndarray, axis: int) -> np.ndarray:
    # Sequential left-to-right sum; np.sum's pairwise order depends on length.
    return np.take(np.add.accumulate(x, axis=axis), -1, axis=axis)


def _matmul(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    if a.size * w.shape[1] <= _ACCUMULATE_LIMIT:
        return _seqsum(a[..., :, None] * w, axis=-2)
    # Same left-to-right order as _seqsum, vectorized over every other axis.
    acc = a[..., 0, None] * w[0]
    for i in range(1, w.shape[0]):
        acc = acc + a[..., i, None] * w[i]
    return acc


def _scores(q: np.ndarray, keys: np.ndarray) -> np.ndarray:
    # q (B, H, T, hd), keys (B, H, S, hd) -> (B, H, T, S)
    b, h, t, hd = q.shape
    if b * h * t * keys.shape[2] * hd <= _ACCUMULATE_LIMIT:
        return _seqsum(q[:, :, :, None, :] * keys[:, :, None, :, :], axis=-1)
    acc = q[:, :, :, None, 0] * keys[:, :, None, :, 0]
    for j in range(1, hd):
        acc = acc + q[:, :, :, None, j] * keys[:, :, None, :, j]
    return acc


def _weighted_values(weights: np.ndarray, values: np.ndarray) -> np.ndarray:
    # weights (B, H, T, S), values (B, H, S, hd) -> (B, H, T, hd)
    b, h, t, s = weights.shape
    if b * h * t * s * values.shape[-1] <= _ACCUMULATE_LIMIT:
        return _seqsum(weights[..., None] * values[:, :, None, :, :], axis=-2)
    acc = weights[..., 0, None] * values[:, :, None, 0, :]
    for j in range(1, s):
        acc = acc + weights[..., j, None] * values[:, :, None, j, :]
    return acc


def _rmsnorm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    mean_sq = _seqsum(x * x, axis=-1) / x.shape[-1]
    return x / np.sqrt(mean_sq + 1e-6)[..., None] * gain


def _masked_softmax(scores: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    s = np.where(allowed, scores, -np.inf)
    top = s.max(axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.exp(np.ascontiguousarray(s - top))
    denom = _seqsum(e, axis=-1)[..., None]
    # Fully masked query rows get zero weights instead of 0/0.
    denom = np.where(denom == 0.0, 1.0, denom)
    return e / denom


def forward(
    model: Model,
    tokens: np.ndarray,
    attention_mask: np.ndarray,
    position_ids: np.ndarray,
    cache: list[LayerKV] | None = None,
) -> ForwardOutput:
    """Run ``T`` new tokens per row through the model.

    Args:
        model: weights from :func:`init_model`.
        tokens: ``(B, T)`` token ids.
        attention_mask: ``(B, S + T)`` binary mask over cached plus new columns.
        position_ids: ``(B, T)`` content positions of the new tokens.
        cache: per-layer KV of length ``S``; ``None`` means ``S == 0``.

    Returns:
        Logits ``(B, T, V)`` and the cache extended by ``T`` columns.  Keys and
        values computed at masked columns are stored as zeros.
    """
    cfg = model.config
    tokens = np.asarray(tokens)
    attention_mask = np.asarray(attention_mask)
    position_ids = np.asarray(position_ids)
    if tokens.ndim != 2 or tokens.shape[1] < 1:
        raise ValueError(f"tokens must be (B, T) with T >= 1, got {tokens.shape}")
    b, t = tokens.shape
    if cache is None:
        cache = model.empty_cache(b)
    if len(cache) != cfg.num_layers:
        raise ValueError(f"cache has {len(cache)} layers, model has {cfg.num_layers}")
    s = cache[0].seq_len
    for layer_kv in cache:
        if layer_kv.keys.shape != (b, cfg.num_heads, s, cfg.head_dim):
            raise ValueError(f"cache layer shape {layer_kv.keys.shape} does not match batch {b}, seq {s}")
    if attention_mask.shape != (b, s + t):
        raise ValueError(f"attention_mask shape {attention_mask.shape} != {(b, s + t)}")
    if position_ids.shape != (b, t):
        raise ValueError(f"position_ids shape {position_ids.shape} != {(b, t)}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError("token id out of vocabulary range")
    if position_ids.min() < 0 or position_ids.max() >= cfg.max_position:
        raise ValueError(f"position id outside [0, {cfg.max_position})")

    key_valid = attention_mask.astype(bool)
    new_valid = key_valid[:, s:]
    causal = np.arange(s + t)[None, :] <= (s + np.arange(t))[:, None]
    allowed = (key_valid[:, None, :] & causal[None, :, :])[:, None, :, :]

    h_count, hd = cfg.num_heads, cfg.head_dim
    scale = 1.0 / np.sqrt(hd)
    x = model.embed[tokens] + model.positions[position_ids]
    new_cache = []
    for layer, past in zip(model.layers, cache):
        h = _rmsnorm(x, layer.norm_attn)
        qkv = _matmul(h, layer.w_qkv).reshape(b, t, 3, h_count, hd)
        q, k, v = (qkv[:, :, i].transpose(0, 2, 1, 3) for i in range(3))
        keep = new_valid[:, None, :, None]
        k = np.where(keep, k, 0.0)
        v = np.where(keep, v, 0.0)
        keys = np.concatenate([past.keys, k], axis=2)
        values = np.concatenate([past.values, v], axis=2)
        new_cache.append(LayerKV(keys, values))

        scores = _scores(q, keys)
        weights = _masked_softmax(scores * scale, allowed)
        attn = _weighted_values(weights, values)
        x = x + _matmul(attn.transpose(0, 2, 1, 3).reshape(b, t, h_count * hd), layer.w_o)

        h = _rmsnorm(x, layer.norm_mlp)
        x = x + _matmul(np.maximum(_matmul(h, layer.w_up), 0.0), layer.w_down)

    logits = _matmul(_rmsnorm(x, model.norm_final), model.w_out)
    if model.prior is not None:
        logits = logits + model.prior[tokens]
    if cfg.eos_bias:
        logits[..., EOS] += cfg.eos_bias
    logits[..., PAD] = PAD_LOGIT
    return ForwardOutput(logits=logits, cache=new_cache)


def greedy_next(logits_row) -> int:
    """Argmax over the vocabulary; ties go to the lowest token id."""
    row = np.asarray(logits_row, dtype=np.float64)
    if row.ndim != 1 or row.size == 0:
        raise ValueError("logits_row must be a non-empty vector")
    if np.isnan(row).any():
        raise ValueError("logits contain NaN")
    return int(np.argmax(row))


def greedy_tokens(logits: np.ndarray) -> np.ndarray:
    """Vectorized :func:`greedy_next` over the last axis."""
    if np.isnan(logits).any():
        raise ValueError("logits contain NaN")
    return np.argmax(logits, axis=-1)
