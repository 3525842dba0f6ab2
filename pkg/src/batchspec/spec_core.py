"""Draft generation, batch verification, the EqSpec loop and the plain baseline."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from batchspec.batch_align import (
    OpCounters,
    PaddedBatch,
    RealignPlan,
    TokenSeq,
    append_accepted,
    build_batch,
    realign_kv,
    repad,
    unpad,
)
from batchspec.metrics import RunRecorder, RunReport
from batchspec.toy_lm import EOS, PAD, LayerKV, Model, forward, greedy_next, greedy_tokens

MODES = ("eqspec", "exspec", "baseline")
DRAFT_CACHE_MODES = ("cached", "recompute")


@dataclass(frozen=True)
class DecodeParams:
    k: int = 5
    max_new_tokens: int = 32
    mode: str = "eqspec"
    draft_cache_mode: str = "cached"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.draft_cache_mode not in DRAFT_CACHE_MODES:
            raise ValueError(f"draft_cache_mode must be one of {DRAFT_CACHE_MODES}")


@dataclass
class CacheState:
    """A batch KV cache plus its column mask.

    ``pending`` counts trailing batch columns that have not been forwarded.
    """

    layers: list[LayerKV]
    mask: np.ndarray
    pending: int

    @classmethod
    def empty(cls, model: Model, batch_size: int, pending: int) -> "CacheState":
        return cls(model.empty_cache(batch_size), np.zeros((batch_size, 0), dtype=np.int64), pending)

    @property
    def seq_len(self) -> int:
        return self.mask.shape[1]


@dataclass
class DraftProposal:
    tokens: np.ndarray
    cache: CacheState | None = None


@dataclass
class VerifyOutcome:
    accepted_len: np.ndarray
    bonus: np.ndarray
    accepted_tokens: list[list[int]]
    k: int
    target_pred: np.ndarray

    def __len__(self) -> int:
        return len(self.accepted_len)


def _input_columns(batch: PaddedBatch, pending: int, position_ids):
    width = batch.width
    if not 1 <= pending <= width:
        raise ValueError(f"pending columns {pending} outside [1, {width}]")
    cols = slice(width - pending, width)
    pos = batch.position_ids if position_ids is None else position_ids
    return batch.tokens[:, cols], batch.attention_mask[:, cols], pos[:, cols]


def draft_generate(draft_model: Model, batch: PaddedBatch, k: int, draft_cache: CacheState | None = None,
                   position_ids: np.ndarray | None = None) -> DraftProposal:
    """Propose ``k`` greedy tokens per row with the draft model.

    With ``draft_cache`` the pending batch columns are forwarded on top of it
    and the extended cache comes back on the proposal; its columns follow
    the batch layout with ``k - 1`` draft columns appended.  Without a cache
    the whole batch is re-encoded.
    """
    b = batch.batch_size
    state = draft_cache if draft_cache is not None else CacheState.empty(draft_model, b, batch.width)
    tokens, new_mask, pos = _input_columns(batch, state.pending, position_ids)
    mask = np.concatenate([state.mask, new_mask], axis=1)
    out = forward(draft_model, tokens, mask, pos, state.layers)
    nxt = greedy_tokens(out.logits[:, -1])
    drafts = [nxt]
    last_pos = pos[:, -1]
    cache = out.cache
    ones = np.ones((b, 1), dtype=np.int64)
    for j in range(1, k):
        mask = np.concatenate([mask, ones], axis=1)
        out = forward(draft_model, nxt[:, None], mask, (last_pos + j)[:, None], cache)
        cache = out.cache
        nxt = greedy_tokens(out.logits[:, -1])
        drafts.append(nxt)
    proposal = np.stack(drafts, axis=1).astype(np.int64)
    return DraftProposal(tokens=proposal, cache=CacheState(cache, mask, pending=0) if draft_cache is not None else None)


def batch_verify(target: Model, batch: PaddedBatch, proposal: DraftProposal, cache: CacheState,
                 first_iteration: bool, position_ids: np.ndarray | None = None,
                 active: np.ndarray | None = None) -> tuple[VerifyOutcome, CacheState]:
    """One target forward over every draft position; first-mismatch acceptance.

    On the first iteration the whole padded batch is forwarded with the
    drafts; afterwards only the pending columns (the previous bonus token)
    precede them.  Rows with ``active[i]`` false have their draft columns
    masked out and report zero accepted tokens and a pad bonus.
    """
    drafts = np.asarray(proposal.tokens)
    b, k = drafts.shape
    if b != batch.batch_size:
        raise ValueError(f"proposal has {b} rows, batch has {batch.batch_size}")
    if first_iteration and (cache.seq_len != 0 or cache.pending != batch.width):
        raise ValueError("first iteration expects an empty cache covering nothing of the batch")
    active = np.ones(b, dtype=bool) if active is None else np.asarray(active, dtype=bool)

    tokens, new_mask, pos = _input_columns(batch, cache.pending, position_ids)
    draft_pos = pos[:, -1:] + 1 + np.arange(k)[None, :]
    draft_mask = np.repeat(active[:, None].astype(np.int64), k, axis=1)
    mask = np.concatenate([cache.mask, new_mask, draft_mask], axis=1)
    out = forward(
        target,
        np.concatenate([tokens, drafts], axis=1),
        mask,
        np.concatenate([pos, draft_pos], axis=1),
        cache.layers,
    )
    pred = greedy_tokens(out.logits[:, -(k + 1):])
    matches = pred[:, :k] == drafts
    # argmax over the mismatch mask is degenerate when every draft matches.
    accepted = np.where(matches.all(axis=1), k, np.argmax(~matches, axis=1))
    accepted = np.where(active, accepted, 0)
    bonus = np.where(active, pred[np.arange(b), accepted], PAD)
    outcome = VerifyOutcome(
        accepted_len=accepted,
        bonus=bonus,
        accepted_tokens=[drafts[i, : accepted[i]].tolist() for i in range(b)],
        k=k,
        target_pred=pred,
    )
    return outcome, CacheState(out.cache, mask, pending=0)


def oracle_accept(target: Model, seq: Sequence[int], proposal_row: Sequence[int]) -> tuple[int, int]:
    """Brute-force acceptance: token-by-token greedy decoding with no cache."""
    ctx = list(seq)
    for j, tok in enumerate(proposal_row):
        pred = _full_greedy(target, ctx)
        if pred != tok:
            return j, pred
        ctx.append(int(tok))
    return len(proposal_row), _full_greedy(target, ctx)


def _full_greedy(model: Model, ctx: Sequence[int]) -> int:
    n = len(ctx)
    out = forward(model, np.array([ctx]), np.ones((1, n), dtype=np.int64), np.arange(n)[None, :])
    return greedy_next(out.logits[0, -1])


def check_alignment(model: Model, batch: PaddedBatch, state: CacheState, position_ids=None) -> bool:
    """Compare the realigned cache path against a from-scratch forward.

    Both the pending-token logits and the cached keys/values must agree
    bit for bit.
    """
    pos = batch.position_ids if position_ids is None else position_ids
    fresh = forward(model, batch.tokens, batch.attention_mask, pos)
    if state.seq_len != batch.width - state.pending:
        return False
    tokens, new_mask, new_pos = _input_columns(batch, state.pending, pos)
    cached = forward(model, tokens, np.concatenate([state.mask, new_mask], axis=1), new_pos, state.layers)
    if not np.array_equal(cached.logits, fresh.logits[:, -state.pending:]):
        return False
    s = state.seq_len
    return all(
        np.array_equal(c.keys, f.keys[:, :, :s]) and np.array_equal(c.values, f.values[:, :, :s])
        for c, f in zip(state.layers, fresh.cache)
    )


class PipelineHooks:
    """Seams of the EqSpec loop; the base class is the correct pipeline."""

    name = "none"

    def adjust_outcome(self, outcome: VerifyOutcome, proposal: DraftProposal, active: np.ndarray) -> VerifyOutcome:
        return outcome

    def rows_for_append(self, batch: PaddedBatch) -> tuple[list[list[int]], np.ndarray]:
        return unpad(batch), batch.pad_offsets.copy()

    def position_ids(self, new_batch: PaddedBatch, old_batch: PaddedBatch) -> np.ndarray:
        return new_batch.position_ids

    def realign_target(self, state: CacheState, plan: RealignPlan, kept, new_batch: PaddedBatch,
                       counters: OpCounters) -> CacheState:
        layers = realign_kv(state.layers, plan, kept, counters)
        s = layers[0].seq_len
        return CacheState(layers, new_batch.attention_mask[:, :s].copy(), pending=new_batch.width - s)


VerifyObserver = Callable[[list[list[int]], np.ndarray, VerifyOutcome, np.ndarray], None]
RealignObserver = Callable[[Model, PaddedBatch, CacheState, np.ndarray], None]


def _chunks(items, size):
    for i in range(0, len(items), size):
        yield items[i : i + size]


def _append_span(seq: TokenSeq, span: list[int], max_new_tokens: int) -> list[int]:
    span = span[: max_new_tokens - len(seq.generated)]
    seq.generated.extend(span)
    if (span and span[-1] == EOS) or len(seq.generated) >= max_new_tokens:
        seq.active = False
    return span


def _eqspec_batch(target: Model, draft: Model, seqs: list[TokenSeq], params: DecodeParams, hooks: PipelineHooks,
                  rec: RunRecorder, on_verify: VerifyObserver | None, on_realign: RealignObserver | None) -> None:
    b = len(seqs)
    k = params.k
    cached_draft = params.draft_cache_mode == "cached"
    batch = build_batch(seqs)
    positions = batch.position_ids
    t_state = CacheState.empty(target, b, pending=batch.width)
    d_state = CacheState.empty(draft, b, pending=batch.width) if cached_draft else None
    first = True
    while any(s.active for s in seqs):
        active = np.array([s.active for s in seqs])
        with rec.phase("draft"):
            proposal = draft_generate(draft, batch, k, d_state, position_ids=positions)
        rec.report.draft_calls += 1
        rec.report.draft_forwards += k
        proposal.tokens[~active] = PAD
        with rec.phase("verify"):
            outcome, t_state = batch_verify(target, batch, proposal, t_state, first, positions, active)
        rec.report.verify_calls += 1
        if on_verify is not None:
            on_verify([s.tokens for s in seqs], proposal.tokens, outcome, active)
        outcome = hooks.adjust_outcome(outcome, proposal, active)
        rec.record_acceptance(outcome.accepted_len[active])

        ragged, source = hooks.rows_for_append(batch)
        extended = append_accepted(ragged, outcome, active)
        rows = []
        for i, seq in enumerate(seqs):
            if not active[i]:
                rows.append(ragged[i])
                continue
            span = _append_span(seq, extended[i][len(ragged[i]):], params.max_new_tokens)
            rows.append(ragged[i] + span)
        if not any(s.active for s in seqs):
            break

        new_batch, plan = repad(rows, source, rec.ops)
        lengths = plan.lengths
        # Target: only the bonus is uncached.  Draft: bonus plus one more
        # column, which covers the unforwarded last draft on full acceptance.
        t_state = hooks.realign_target(t_state, plan, lengths - 1, new_batch, rec.ops)
        if cached_draft:
            layers = realign_kv(proposal.cache.layers, plan, lengths - 2, rec.ops)
            s = layers[0].seq_len
            d_state = CacheState(layers, new_batch.attention_mask[:, :s].copy(), pending=new_batch.width - s)
        positions = hooks.position_ids(new_batch, batch)
        batch = new_batch
        first = False
        if on_realign is not None:
            on_realign(target, batch, t_state, positions)


def _as_seqs(prompts) -> list[TokenSeq]:
    seqs = []
    for i, p in enumerate(prompts):
        tokens = [int(t) for t in p]
        if not tokens:
            raise ValueError(f"prompt {i} is empty")
        seqs.append(TokenSeq(id=i, prompt=tokens))
    return seqs


def eqspec_decode(target: Model, draft: Model, prompts: Sequence[Sequence[int]], params: DecodeParams,
                  batch_size: int | None = None, hooks: PipelineHooks | None = None,
                  on_verify: VerifyObserver | None = None,
                  on_realign: RealignObserver | None = None) -> tuple[list[list[int]], RunReport]:
    """Fixed-batch speculative decoding with unpad-append-repad after every round.

    Prompts are split into consecutive batches of ``batch_size`` (default:
    one batch).  Finished rows keep their slot until the whole batch is done.
    Returns generated tokens per prompt, prompt order preserved.
    """
    if params.mode != "eqspec":
        raise ValueError(f"eqspec_decode requires mode 'eqspec', got {params.mode!r}")
    hooks = hooks or PipelineHooks()
    seqs = _as_seqs(prompts)
    batch_size = batch_size or max(1, len(seqs))
    rec = RunRecorder("eqspec", batch_size, k=params.k, fault=hooks.name)
    for chunk in _chunks(seqs, batch_size):
        _eqspec_batch(target, draft, chunk, params, hooks, rec, on_verify, on_realign)
    outputs = [s.generated for s in seqs]
    return outputs, rec.finish(outputs)


def baseline_decode(target: Model, prompts: Sequence[Sequence[int]], batch_size: int,
                    max_new_tokens: int) -> tuple[list[list[int]], RunReport]:
    """Batched greedy decoding, one token per step, with a KV cache.

    Finished rows stay in the batch with their new columns masked out.
    """
    if max_new_tokens < 1:
        raise ValueError("max_new_tokens must be >= 1")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    seqs = _as_seqs(prompts)
    rec = RunRecorder("baseline", batch_size)
    for chunk in _chunks(seqs, batch_size):
        batch = build_batch(chunk)
        with rec.phase("verify"):
            out = forward(target, batch.tokens, batch.attention_mask, batch.position_ids)
        rec.report.verify_calls += 1
        mask = batch.attention_mask
        cache = out.cache
        next_pos = batch.lengths.copy()
        logits = out.logits[:, -1]
        while True:
            active = np.array([s.active for s in chunk])
            nxt = np.where(active, greedy_tokens(logits), PAD)
            for i, seq in enumerate(chunk):
                if active[i]:
                    _append_span(seq, [int(nxt[i])], max_new_tokens)
            if not any(s.active for s in chunk):
                break
            live = np.array([s.active for s in chunk], dtype=np.int64)
            mask = np.concatenate([mask, live[:, None]], axis=1)
            pos = np.where(live, next_pos, 0)[:, None]
            with rec.phase("verify"):
                out = forward(target, np.where(live, nxt, PAD)[:, None], mask, pos, cache)
            rec.report.verify_calls += 1
            cache = out.cache
            logits = out.logits[:, -1]
            next_pos = next_pos + live
    outputs = [s.generated for s in seqs]
    return outputs, rec.finish(outputs)


def reference_outputs(target: Model, prompts, max_new_tokens: int) -> list[list[int]]:
    """Batch-1 greedy outputs, the equivalence reference."""
    return baseline_decode(target, prompts, 1, max_new_tokens)[0]


__all__ = [
    "CacheState",
    "DecodeParams",
    "DraftProposal",
    "PipelineHooks",
    "VerifyOutcome",
    "baseline_decode",
    "batch_verify",
    "check_alignment",
    "draft_generate",
    "eqspec_decode",
    "oracle_accept",
    "reference_outputs",
]
