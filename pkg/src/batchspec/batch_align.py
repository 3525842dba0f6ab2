"""Rectangular batches, unpad-append-repad, and KV-cache realignment.

Layout convention: every row is left padded, so content is right aligned at
column ``L``.  Cache column ``c`` always holds the key/value of token column
``c``; a cache that is ``u`` columns shorter than the batch means the last
``u`` tokens of every row have not been forwarded yet.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

from batchspec.toy_lm import EOS, PAD, LayerKV


@dataclass
class OpCounters:
    """Work counters shared by one decode run."""

    repads: int = 0
    pad_deltas: int = 0
    realign_ops: int = 0
    zero_fill_allocs: int = 0
    cache_stacks: int = 0

    def as_dict(self) -> dict[str, int]:
        return {
            "repads": self.repads,
            "pad_deltas": self.pad_deltas,
            "realign_ops": self.realign_ops,
            "zero_fill_allocs": self.zero_fill_allocs,
            "cache_stacks": self.cache_stacks,
        }


@dataclass
class TokenSeq:
    id: Hashable
    prompt: list[int]
    generated: list[int] = field(default_factory=list)
    active: bool = True

    @property
    def tokens_emitted(self) -> int:
        return len(self.generated)

    @property
    def tokens(self) -> list[int]:
        return self.prompt + self.generated

    def __len__(self) -> int:
        return len(self.prompt) + len(self.generated)


@dataclass
class PaddedBatch:
    tokens: np.ndarray
    attention_mask: np.ndarray
    position_ids: np.ndarray
    pad_offsets: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.tokens.shape[0]

    @property
    def width(self) -> int:
        return self.tokens.shape[1]

    @property
    def lengths(self) -> np.ndarray:
        return self.width - self.pad_offsets

    def check(self) -> None:
        """Assert the layout invariants; used by tests and debug runs."""
        b, width = self.tokens.shape
        cols = np.arange(width)[None, :]
        content = cols >= self.pad_offsets[:, None]
        assert self.attention_mask.shape == (b, width)
        assert np.array_equal(self.attention_mask.astype(bool), content)
        assert np.all(self.tokens[~content] == PAD)
        expected = np.where(content, cols - self.pad_offsets[:, None], 0)
        assert np.array_equal(self.position_ids, expected)


@dataclass
class RealignPlan:
    """Per-row pad counts of a freshly repadded batch.

    ``offsets`` are the new left pads.  ``source_offsets`` locate each row's
    content in the layout the cache was built for.  ``lengths`` is the
    per-row content count, rechecked after every realignment.
    """

    offsets: np.ndarray
    source_offsets: np.ndarray
    lengths: np.ndarray

    @property
    def width(self) -> int:
        return int(self.offsets[0] + self.lengths[0])

    @property
    def deltas(self) -> np.ndarray:
        return self.offsets - self.source_offsets


def _layout(rows: Sequence[Sequence[int]]) -> PaddedBatch:
    lengths = np.array([len(r) for r in rows], dtype=np.int64)
    width = int(lengths.max())
    b = len(rows)
    tokens = np.full((b, width), PAD, dtype=np.int64)
    mask = np.zeros((b, width), dtype=np.int64)
    positions = np.zeros((b, width), dtype=np.int64)
    pads = width - lengths
    for i, row in enumerate(rows):
        p = pads[i]
        tokens[i, p:] = row
        mask[i, p:] = 1
        positions[i, p:] = np.arange(lengths[i])
    return PaddedBatch(tokens=tokens, attention_mask=mask, position_ids=positions, pad_offsets=pads)


def build_batch(seqs: Sequence[TokenSeq | Sequence[int]]) -> PaddedBatch:
    """Left-pad sequences (``TokenSeq`` or plain token lists) into a batch."""
    if len(seqs) == 0:
        raise ValueError("build_batch needs at least one sequence")
    rows = [s.tokens if isinstance(s, TokenSeq) else list(s) for s in seqs]
    if any(len(r) == 0 for r in rows):
        raise ValueError("sequences must be nonempty")
    return _layout(rows)


def unpad(batch: PaddedBatch) -> list[list[int]]:
    return [batch.tokens[i, p:].tolist() for i, p in enumerate(batch.pad_offsets)]


def truncate_at_eos(tokens: Sequence[int]) -> list[int]:
    tokens = list(tokens)
    if EOS in tokens:
        return tokens[: tokens.index(EOS) + 1]
    return tokens


def append_accepted(ragged, outcome, active=None) -> list[list[int]]:
    """Extend each row by its accepted draft prefix, then its bonus token.

    If an eos falls inside the accepted prefix the row stops right after it
    and the bonus token is dropped.  Rows with ``active[i]`` false are
    returned unchanged.
    """
    accepted = outcome.accepted_tokens
    if len(accepted) != len(ragged):
        raise ValueError(f"outcome covers {len(accepted)} rows, batch has {len(ragged)}")
    k = getattr(outcome, "k", None)
    out = []
    for i, row in enumerate(ragged):
        if active is not None and not active[i]:
            out.append(list(row))
            continue
        if k is not None and len(accepted[i]) > k:
            raise ValueError(f"row {i} accepted {len(accepted[i])} tokens, draft length is {k}")
        span = truncate_at_eos(list(accepted[i]) + [int(outcome.bonus[i])])
        out.append(list(row) + span)
    return out


def repad(ragged: Sequence[Sequence[int]], source_offsets=None, counters: OpCounters | None = None):
    """Rebuild a rectangular batch and the plan for realigning its cache.

    Position ids and masks are recomputed from scratch.  ``source_offsets``
    (default all zero) records where each row's content started in the
    previous layout.
    """
    batch = build_batch(ragged)
    src = np.zeros(batch.batch_size, dtype=np.int64) if source_offsets is None else np.asarray(source_offsets)
    if src.shape != (batch.batch_size,):
        raise ValueError("source_offsets must have one entry per row")
    plan = RealignPlan(offsets=batch.pad_offsets.copy(), source_offsets=src.astype(np.int64), lengths=batch.lengths)
    if counters is not None:
        counters.repads += 1
        counters.pad_deltas += int(np.count_nonzero(plan.deltas))
    return batch, plan


def realign_kv(cache: list[LayerKV], plan: RealignPlan, kept_lengths, counters: OpCounters | None = None) -> list[LayerKV]:
    """Move each row's valid cache prefix into the repadded layout.

    Row ``i`` keeps cache columns ``[source_offsets[i], source_offsets[i] +
    kept_lengths[i])``.  Entries past that (rejected drafts, or tokens the
    caller wants recomputed) are dropped.  The result is a freshly zeroed
    tensor with each kept slice right aligned, so every row ends the same
    number ``u = lengths[i] - kept_lengths[i]`` of columns before the batch
    edge.  ``u`` must be identical across rows.
    """
    kept = np.asarray(kept_lengths, dtype=np.int64)
    b = len(plan.offsets)
    if not cache:
        raise ValueError("cache has no layers")
    if cache[0].batch_size != b or kept.shape != (b,):
        raise ValueError(f"cache batch {cache[0].batch_size}, plan rows {b}, kept {kept.shape}")
    seq = cache[0].seq_len
    if np.any(kept < 0) or np.any(plan.source_offsets + kept > seq):
        raise ValueError(f"kept lengths exceed cache seq dim {seq}")
    uncached = plan.lengths - kept
    if np.any(uncached != uncached[0]) or uncached[0] < 0:
        raise ValueError(f"rows disagree on trailing uncached tokens: {uncached.tolist()}")
    new_seq = plan.width - int(uncached[0])

    out = []
    for layer in cache:
        _, heads, _, hd = layer.keys.shape
        keys = np.zeros((b, heads, new_seq, hd))
        values = np.zeros((b, heads, new_seq, hd))
        for i in range(b):
            n, src = kept[i], plan.source_offsets[i]
            if n:
                keys[i, :, new_seq - n :] = layer.keys[i, :, src : src + n]
                values[i, :, new_seq - n :] = layer.values[i, :, src : src + n]
        out.append(LayerKV(keys, values))
    # Checksum: every row's cached content now starts at its new pad offset.
    assert np.array_equal(new_seq - kept, plan.offsets)
    if counters is not None:
        counters.realign_ops += 1
        counters.zero_fill_allocs += 2 * len(cache)
    return out


def assemble_cache(slices: Sequence[list[tuple[np.ndarray, np.ndarray]] | None], kept, seq_len: int,
                   num_layers: int, heads: int, head_dim: int,
                   counters: OpCounters | None = None) -> list[LayerKV]:
    """Zero-fill a batch cache from per-sequence ragged slices.

    ``slices[i][layer]`` is a ``(keys, values)`` pair shaped (heads, s_i,
    head_dim); the last ``kept[i]`` columns of the slice prefix are placed
    right aligned at ``seq_len``.
    """
    b = len(slices)
    out = []
    for layer in range(num_layers):
        keys = np.zeros((b, heads, seq_len, head_dim))
        values = np.zeros((b, heads, seq_len, head_dim))
        for i, entry in enumerate(slices):
            n = int(kept[i])
            if n:
                k_i, v_i = entry[layer]
                keys[i, :, seq_len - n :] = k_i[:, :n]
                values[i, :, seq_len - n :] = v_i[:, :n]
        out.append(LayerKV(keys, values))
    if counters is not None:
        counters.realign_ops += 1
        counters.zero_fill_allocs += 2 * num_layers
    return out


def stack_cache(slices: Sequence[list[tuple[np.ndarray, np.ndarray]]], counters: OpCounters | None = None) -> list[LayerKV]:
    """Concatenate equal-length ragged slices along a new batch axis."""
    out = [
        LayerKV(np.stack([s[layer][0] for s in slices]), np.stack([s[layer][1] for s in slices]))
        for layer in range(len(slices[0]))
    ]
    if counters is not None:
        counters.cache_stacks += 1
    return out
