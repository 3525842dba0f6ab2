"""Injectable pipeline bugs for negative testing.

Each mode swaps one seam of the EqSpec loop (bonus selection, row
stripping before append, position assignment, target cache realignment)
while every other step runs the shared code path.
"""

from __future__ import annotations

import enum
from typing import Sequence

import numpy as np

from batchspec.batch_align import OpCounters, PaddedBatch, RealignPlan
from batchspec.metrics import RunReport
from batchspec.spec_core import (
    CacheState,
    DecodeParams,
    DraftProposal,
    PipelineHooks,
    VerifyOutcome,
    baseline_decode,
    eqspec_decode,
)
from batchspec.toy_lm import Model


class FaultMode(str, enum.Enum):
    NONE = "none"
    BONUS_FROM_DRAFT = "bonus_from_draft"
    SKIP_UNPAD = "skip_unpad"
    STALE_POSITION_IDS = "stale_position_ids"
    SKIP_KV_REALIGN = "skip_kv_realign"
    ROLLBACK_MIN = "rollback_min"


class BonusFromDraft(PipelineHooks):
    """Take the bonus from the draft's proposal at the first mismatch.

    On full acceptance the draft has no prediction past position K, so the
    target's bonus is kept there.
    """

    name = FaultMode.BONUS_FROM_DRAFT.value

    def adjust_outcome(self, outcome: VerifyOutcome, proposal: DraftProposal, active: np.ndarray) -> VerifyOutcome:
        bonus = outcome.bonus.copy()
        for i in np.flatnonzero(active):
            j = outcome.accepted_len[i]
            if j < outcome.k:
                bonus[i] = proposal.tokens[i, j]
        return VerifyOutcome(outcome.accepted_len, bonus, outcome.accepted_tokens, outcome.k, outcome.target_pred)


class SkipUnpad(PipelineHooks):
    """Append to the padded rows, so old pads become content."""

    name = FaultMode.SKIP_UNPAD.value

    def rows_for_append(self, batch: PaddedBatch) -> tuple[list[list[int]], np.ndarray]:
        return batch.tokens.tolist(), np.zeros(batch.batch_size, dtype=np.int64)


class StalePositionIds(PipelineHooks):
    """Keep numbering columns from the previous layout's pad offsets."""

    name = FaultMode.STALE_POSITION_IDS.value

    def __init__(self, max_position: int):
        self.max_position = max_position

    def position_ids(self, new_batch: PaddedBatch, old_batch: PaddedBatch) -> np.ndarray:
        cols = np.arange(new_batch.width)[None, :]
        stale = cols - old_batch.pad_offsets[:, None]
        return np.clip(stale, 0, self.max_position - 1)


class SkipKvRealign(PipelineHooks):
    """Leave the target cache in the verify layout, rejected entries included."""

    name = FaultMode.SKIP_KV_REALIGN.value

    def realign_target(self, state: CacheState, plan: RealignPlan, kept, new_batch: PaddedBatch,
                       counters: OpCounters) -> CacheState:
        return CacheState(state.layers, state.mask, pending=1)


class RollbackMin(PipelineHooks):
    """Truncate every live row to the batch-minimum accepted length."""

    name = FaultMode.ROLLBACK_MIN.value

    def adjust_outcome(self, outcome: VerifyOutcome, proposal: DraftProposal, active: np.ndarray) -> VerifyOutcome:
        if not active.any():
            return outcome
        a_min = int(outcome.accepted_len[active].min())
        rows = np.arange(len(outcome))
        accepted = np.where(active, a_min, 0)
        bonus = np.where(active, outcome.target_pred[rows, a_min], outcome.bonus)
        tokens = [t[:a_min] if active[i] else [] for i, t in enumerate(outcome.accepted_tokens)]
        return VerifyOutcome(accepted, bonus, tokens, outcome.k, outcome.target_pred)


def make_hooks(mode: FaultMode | str, target: Model) -> PipelineHooks:
    mode = FaultMode(mode)
    if mode is FaultMode.NONE:
        return PipelineHooks()
    if mode is FaultMode.BONUS_FROM_DRAFT:
        return BonusFromDraft()
    if mode is FaultMode.SKIP_UNPAD:
        return SkipUnpad()
    if mode is FaultMode.STALE_POSITION_IDS:
        return StalePositionIds(target.config.max_position)
    if mode is FaultMode.SKIP_KV_REALIGN:
        return SkipKvRealign()
    return RollbackMin()


def run_with_fault(mode: FaultMode | str, target: Model, draft: Model, prompts: Sequence[Sequence[int]],
                   params: DecodeParams, batch_size: int | None = None,
                   window: int | None = None) -> tuple[list[list[int]], RunReport]:
    """Decode with one fault injected.

    ``none`` dispatches on ``params.mode``; every other mode needs eqspec.
    """
    mode = FaultMode(mode)
    if mode is not FaultMode.NONE:
        if params.mode != "eqspec":
            raise ValueError(f"fault {mode.value} is defined against eqspec, got mode {params.mode!r}")
        return eqspec_decode(target, draft, prompts, params, batch_size=batch_size, hooks=make_hooks(mode, target))
    if params.mode == "eqspec":
        return eqspec_decode(target, draft, prompts, params, batch_size=batch_size)
    if params.mode == "baseline":
        return baseline_decode(target, prompts, batch_size or 1, params.max_new_tokens)
    from batchspec.exspec import exspec_decode

    b = batch_size or 1
    return exspec_decode(target, draft, prompts, params, window or b, b)


__all__ = [
    "BonusFromDraft",
    "FaultMode",
    "RollbackMin",
    "SkipKvRealign",
    "SkipUnpad",
    "StalePositionIds",
    "make_hooks",
    "run_with_fault",
]
