"""Cross-batch scheduling over a pool of individually ragged sequences.

Each pool entry keeps its own unpadded cache slices per model.  Every round
a batch is formed from the sliding window: a group of entries in identical
states is stacked directly, otherwise the frontmost entries are padded and
their caches assembled at the padded layout.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

from batchspec.batch_align import TokenSeq, assemble_cache, build_batch, stack_cache, truncate_at_eos
from batchspec.metrics import RunRecorder, RunReport
from batchspec.spec_core import (
    CacheState,
    DecodeParams,
    RealignObserver,
    VerifyObserver,
    VerifyOutcome,
    _append_span,
    _as_seqs,
    batch_verify,
    draft_generate,
)
from batchspec.toy_lm import LayerKV, Model

SAME_LENGTH = "same_length"
FALLBACK = "fallback_realign"
FALLBACK_POLICIES = ("front", "closest_length")

# Per layer, a (keys, values) pair shaped (heads, seq, head_dim).
Slices = list[tuple[np.ndarray, np.ndarray]]


@dataclass
class PoolEntry:
    seq: TokenSeq
    target_kv: Slices | None = None
    draft_kv: Slices | None = None
    skipped: int = 0

    @property
    def target_cached(self) -> int:
        return 0 if self.target_kv is None else self.target_kv[0][0].shape[1]

    @property
    def draft_cached(self) -> int:
        return 0 if self.draft_kv is None else self.draft_kv[0][0].shape[1]

    @property
    def state_key(self) -> tuple[int, int, int]:
        # Sequences stack without realignment only if token and cache
        # shapes all agree.
        return len(self.seq), self.target_cached, self.draft_cached


@dataclass
class SequencePool:
    entries: dict[Hashable, PoolEntry]
    admission: deque
    completed: list[Hashable] = field(default_factory=list)

    @property
    def active_ids(self) -> list[Hashable]:
        return [i for i, e in self.entries.items() if e.seq.active]

    def has_active(self) -> bool:
        return any(e.seq.active for e in self.entries.values())

    def deactivate(self, seq_id: Hashable) -> None:
        entry = self.entries[seq_id]
        entry.seq.active = False
        entry.target_kv = entry.draft_kv = None
        self.completed.append(seq_id)


def init_pool(prompts: Sequence[Sequence[int]], sort_by_length: bool = False) -> SequencePool:
    """One active entry per prompt; ids are prompt indices."""
    seqs = _as_seqs(prompts)
    if not seqs:
        raise ValueError("init_pool needs at least one prompt")
    order = [s.id for s in seqs]
    if sort_by_length:
        # sorted is stable, so equal lengths keep prompt order.
        order = sorted(order, key=lambda i: len(seqs[i].prompt))
    return SequencePool(entries={s.id: PoolEntry(s) for s in seqs}, admission=deque(order))


@dataclass
class Window:
    size: int
    ids: list[Hashable] = field(default_factory=list)

    def refill(self, pool: SequencePool) -> None:
        self.ids = [i for i in self.ids if pool.entries[i].seq.active]
        while len(self.ids) < self.size and pool.admission:
            seq_id = pool.admission.popleft()
            if pool.entries[seq_id].seq.active:
                self.ids.append(seq_id)


@dataclass
class BatchPlan:
    members: list[Hashable]
    kind: str
    batch: object
    target_cache: CacheState
    draft_cache: CacheState | None


def _largest_group(window: Window, pool: SequencePool, b: int) -> list[Hashable]:
    groups: dict[tuple, list[Hashable]] = {}
    for seq_id in window.ids:
        groups.setdefault(pool.entries[seq_id].state_key, []).append(seq_id)
    # A lone sequence is already rectangular when it could only run alone.
    min_size = min(2, b, len(window.ids))
    best: list[Hashable] = []
    best_key = None
    for key, ids in groups.items():
        if len(ids) < min_size:
            continue
        if len(ids) > len(best) or (len(ids) == len(best) and key < best_key):
            best, best_key = ids, key
    return best


def _fallback_members(window: Window, pool: SequencePool, b: int, policy: str, guard: int) -> list[Hashable]:
    starving = [i for i in window.ids if pool.entries[i].skipped > guard]
    rest = [i for i in window.ids if i not in starving]
    if policy == "closest_length" and rest:
        anchor = len(pool.entries[(starving or rest)[0]].seq)
        # Stable sort keeps window order among equal distances.
        rest = sorted(rest, key=lambda i: abs(len(pool.entries[i].seq) - anchor))
    return (starving + rest)[:b]


def _stack_state(model: Model, entries: list[PoolEntry], slices: list[Slices | None], ops) -> CacheState:
    b = len(entries)
    n = len(entries[0].seq)
    if slices[0] is None:
        return CacheState.empty(model, b, pending=n)
    layers = stack_cache(slices, ops)
    s = layers[0].seq_len
    return CacheState(layers, np.ones((b, s), dtype=np.int64), pending=n - s)


def _assemble_state(model: Model, batch, slices: list[Slices | None], cached: list[int], ops) -> CacheState:
    lengths = batch.lengths
    pending = int(max(n - c for n, c in zip(lengths, cached)))
    seq_len = batch.width - pending
    kept = np.maximum(lengths - pending, 0)
    cfg = model.config
    layers = assemble_cache(slices, kept, seq_len, cfg.num_layers, cfg.num_heads, cfg.head_dim, ops)
    return CacheState(layers, batch.attention_mask[:, :seq_len].copy(), pending=pending)


def form_batch(window: Window, pool: SequencePool, b: int, target: Model | None = None,
               draft: Model | None = None, rec: RunRecorder | None = None, draft_cached: bool = True,
               fallback_policy: str = "front", starvation_guard: int = 8) -> BatchPlan:
    """Pick the next batch from the window and assemble its inputs.

    Without models only membership and kind are decided (``batch`` and the
    caches stay ``None``).
    """
    if not window.ids:
        raise ValueError("window is empty")
    if fallback_policy not in FALLBACK_POLICIES:
        raise ValueError(f"fallback_policy must be one of {FALLBACK_POLICIES}")
    # A starving entry forces a fallback round so it is served next.
    starving = any(pool.entries[i].skipped > starvation_guard for i in window.ids)
    group = [] if starving else _largest_group(window, pool, b)
    if group:
        members, kind = group[:b], SAME_LENGTH
    else:
        members = _fallback_members(window, pool, b, fallback_policy, starvation_guard)
        # Members already in one state need no realignment.
        same = len({pool.entries[i].state_key for i in members}) == 1
        kind = SAME_LENGTH if same else FALLBACK
    chosen = set(members)
    for seq_id in window.ids:
        entry = pool.entries[seq_id]
        entry.skipped = 0 if seq_id in chosen else entry.skipped + 1
    if rec is not None:
        if kind == SAME_LENGTH:
            rec.report.same_length_rounds += 1
        else:
            rec.report.fallback_rounds += 1
    if target is None:
        return BatchPlan(members, kind, None, None, None)

    entries = [pool.entries[i] for i in members]
    ops = rec.ops if rec is not None else None
    batch = build_batch([e.seq for e in entries])
    if kind == SAME_LENGTH:
        t_state = _stack_state(target, entries, [e.target_kv for e in entries], ops)
        d_state = _stack_state(draft, entries, [e.draft_kv for e in entries], ops) if draft_cached else None
    else:
        if ops is not None:
            ops.repads += 1
            ops.pad_deltas += int(np.count_nonzero(batch.pad_offsets))
        t_state = _assemble_state(target, batch, [e.target_kv for e in entries],
                                  [e.target_cached for e in entries], ops)
        d_state = (_assemble_state(draft, batch, [e.draft_kv for e in entries],
                                   [e.draft_cached for e in entries], ops) if draft_cached else None)
    return BatchPlan(members, kind, batch, t_state, d_state)


def _slice_rows(layers: list[LayerKV], row: int, start: int, stop: int) -> Slices:
    return [(layer.keys[row, :, start:stop].copy(), layer.values[row, :, start:stop].copy()) for layer in layers]


def write_back(pool: SequencePool, plan: BatchPlan, outcome: VerifyOutcome, caches: tuple[CacheState, CacheState | None],
               max_new_tokens: int, window: Window | None = None) -> list[Hashable]:
    """Extend members by accepted tokens and bonus, store ragged caches.

    The target keeps every column but the bonus, the draft every column but
    the last two (matching the EqSpec draft discipline).  Completed members
    deactivate and the window is refilled.  Returns the ids that completed.
    """
    target_state, draft_state = caches
    done = []
    for seq_id in plan.members:
        if seq_id not in pool.entries:
            raise KeyError(f"unknown sequence id {seq_id!r}")
        if not pool.entries[seq_id].seq.active:
            raise ValueError(f"sequence {seq_id!r} is not active")
    for row, seq_id in enumerate(plan.members):
        entry = pool.entries[seq_id]
        span = list(outcome.accepted_tokens[row]) + [int(outcome.bonus[row])]
        _append_span(entry.seq, truncate_at_eos(span), max_new_tokens)
        if not entry.seq.active:
            pool.deactivate(seq_id)
            done.append(seq_id)
            continue
        pad = int(plan.batch.pad_offsets[row]) if plan.batch is not None else 0
        n = len(entry.seq)
        entry.target_kv = _slice_rows(target_state.layers, row, pad, pad + n - 1)
        entry.draft_kv = _slice_rows(draft_state.layers, row, pad, pad + n - 2) if draft_state is not None else None
    if window is not None:
        window.refill(pool)
    return done


def exspec_decode(target: Model, draft: Model, prompts: Sequence[Sequence[int]], params: DecodeParams,
                  W: int, B: int, sort_by_length: bool = False, fallback_policy: str = "front",
                  starvation_guard: int = 8, on_verify: VerifyObserver | None = None,
                  on_realign: RealignObserver | None = None) -> tuple[list[list[int]], RunReport]:
    """Speculative decoding with batches re-formed from a sliding window.

    ``on_realign`` sees the target model, batch and cache of every freshly
    assembled plan, before its verify forward.
    """
    if not W >= B >= 1:
        raise ValueError(f"need W >= B >= 1, got W={W}, B={B}")
    if params.mode != "exspec":
        raise ValueError(f"exspec_decode requires mode 'exspec', got {params.mode!r}")
    pool = init_pool(prompts, sort_by_length)
    window = Window(W)
    window.refill(pool)
    draft_cached = params.draft_cache_mode == "cached"
    rec = RunRecorder("exspec", B, k=params.k, window=W)
    k = params.k
    while pool.has_active():
        plan = form_batch(window, pool, B, target, draft, rec, draft_cached, fallback_policy, starvation_guard)
        batch = plan.batch
        if on_realign is not None:
            on_realign(target, batch, plan.target_cache, batch.position_ids)
        with rec.phase("draft"):
            proposal = draft_generate(draft, batch, k, plan.draft_cache)
        rec.report.draft_calls += 1
        rec.report.draft_forwards += k
        first = plan.target_cache.seq_len == 0 and plan.target_cache.pending == batch.width
        with rec.phase("verify"):
            outcome, t_state = batch_verify(target, batch, proposal, plan.target_cache, first)
        rec.report.verify_calls += 1
        if on_verify is not None:
            seqs = [pool.entries[i].seq.tokens for i in plan.members]
            on_verify(seqs, proposal.tokens, outcome, np.ones(len(plan.members), dtype=bool))
        rec.record_acceptance(outcome.accepted_len)
        write_back(pool, plan, outcome, (t_state, proposal.cache), params.max_new_tokens, window)
    outputs = [pool.entries[i].seq.generated for i in sorted(pool.entries)]
    return outputs, rec.finish(outputs)


__all__ = [
    "BatchPlan",
    "FALLBACK",
    "PoolEntry",
    "SAME_LENGTH",
    "SequencePool",
    "Window",
    "exspec_decode",
    "form_batch",
    "init_pool",
    "write_back",
]
