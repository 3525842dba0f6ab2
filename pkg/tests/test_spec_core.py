import math

import numpy as np
import pytest

from batchspec.batch_align import build_batch
from batchspec.spec_core import (
    CacheState,
    DecodeParams,
    DraftProposal,
    baseline_decode,
    batch_verify,
    check_alignment,
    draft_generate,
    eqspec_decode,
    oracle_accept,
    reference_outputs,
)
from batchspec.toy_lm import EOS, forward, greedy_next

from conftest import random_prompts


def continuation(model, seq, n):
    ctx = list(seq)
    for _ in range(n):
        out = forward(model, np.array([ctx]), np.ones((1, len(ctx)), int), np.arange(len(ctx))[None])
        ctx.append(greedy_next(out.logits[0, -1]))
    return ctx[len(seq):]


@pytest.mark.parametrize("bad", [{"k": 0}, {"max_new_tokens": 0}, {"mode": "tree"}, {"draft_cache_mode": "x"}])
def test_decode_params_validation(bad):
    with pytest.raises(ValueError):
        DecodeParams(**bad)


def test_clone_draft_proposes_target_continuation(target):
    prompts = [[3, 4, 5, 6, 7], [9, 10]]
    proposal = draft_generate(target, build_batch(prompts), 4)
    for row, p in zip(proposal.tokens, prompts):
        assert row.tolist() == continuation(target, p, 4)


def test_draft_k1_single_column(target, draft):
    proposal = draft_generate(draft, build_batch([[3, 4], [5, 6, 7]]), 1)
    assert proposal.tokens.shape == (2, 1)


def test_independent_draft_differs(target, draft):
    prompt = [3, 4, 5, 6, 7, 8]
    proposal = draft_generate(draft, build_batch([prompt]), 5).tokens[0].tolist()
    assert proposal == continuation(draft, prompt, 5)
    assert proposal != continuation(target, prompt, 5)


def test_cached_draft_matches_recompute(draft):
    batch = build_batch([[3, 4, 5], [6, 7]])
    cached = draft_generate(draft, batch, 3, CacheState.empty(draft, 2, pending=batch.width))
    plain = draft_generate(draft, batch, 3)
    assert np.array_equal(cached.tokens, plain.tokens)
    assert cached.cache.seq_len == batch.width + 2


def _verify(target, prompts, drafts):
    batch = build_batch(prompts)
    state = CacheState.empty(target, len(prompts), pending=batch.width)
    return batch_verify(target, batch, DraftProposal(np.array(drafts)), state, first_iteration=True)


def test_full_acceptance(target):
    prompt = [3, 4, 5, 6]
    cont = continuation(target, prompt, 6)
    outcome, _ = _verify(target, [prompt], [cont[:5]])
    assert outcome.accepted_len.tolist() == [5]
    assert outcome.bonus.tolist() == [cont[5]]


def test_full_rejection(target):
    prompt = [3, 4, 5, 6]
    nxt = continuation(target, prompt, 1)[0]
    wrong = 2 if nxt != 2 else 3
    outcome, _ = _verify(target, [prompt], [[wrong] * 5])
    assert outcome.accepted_len.tolist() == [0]
    assert outcome.bonus.tolist() == [nxt]
    assert outcome.accepted_tokens == [[]]


def test_mixed_batch_matches_oracle(target):
    p1, p2 = [3, 4, 5, 6], [7, 8, 9, 10, 11]
    c1, c2 = continuation(target, p1, 5), continuation(target, p2, 2)
    d2 = c2[:1] + [2 if c2[1] != 2 else 3] + [4, 4, 4]
    outcome, cache = _verify(target, [p1, p2], [c1, d2])
    assert outcome.accepted_len.tolist() == [5, 1]
    assert outcome.accepted_tokens == [c1, c2[:1]]
    for i, (p, d) in enumerate([(p1, c1), (p2, d2)]):
        assert oracle_accept(target, p, d) == (outcome.accepted_len[i], outcome.bonus[i])
    assert cache.seq_len == 5 + 5 and cache.pending == 0


def test_verify_shape_mismatch(target):
    batch = build_batch([[3, 4]])
    with pytest.raises(ValueError):
        batch_verify(target, batch, DraftProposal(np.zeros((2, 3), int)),
                     CacheState.empty(target, 1, pending=2), True)


def test_verify_inactive_rows(target):
    batch = build_batch([[3, 4], [5, 6]])
    outcome, _ = batch_verify(target, batch, DraftProposal(np.full((2, 3), 3)),
                              CacheState.empty(target, 2, pending=2), True, active=np.array([True, False]))
    assert outcome.accepted_len[1] == 0 and outcome.bonus[1] == 0


def test_oracle_examples(target):
    prompt = [3, 4, 5]
    assert oracle_accept(target, prompt, []) == (0, continuation(target, prompt, 1)[0])
    cont = continuation(target, prompt, 6)
    assert oracle_accept(target, prompt, cont[:5]) == (5, cont[5])


def test_eqspec_batch1_clone(target, prompts):
    params = DecodeParams(k=5, max_new_tokens=18)
    ref = reference_outputs(target, prompts, 18)
    out, report = eqspec_decode(target, target, prompts, params, batch_size=1)
    assert out == ref
    assert report.mean_accepted == 5.0
    # Clone drafts emit K+1 tokens per round until the row ends.
    assert report.verify_calls == sum(math.ceil(len(r) / 6) for r in ref)


@pytest.mark.parametrize("b", [1, 2, 4, 8])
def test_eqspec_matches_baseline(target, draft, prompts, b):
    params = DecodeParams(k=5, max_new_tokens=16)
    out, report = eqspec_decode(target, draft, prompts, params, batch_size=b)
    assert out == reference_outputs(target, prompts, 16)
    assert report.verify_calls > 0 and report.draft_calls == report.verify_calls


def test_eqspec_recompute_draft(target, draft, prompts):
    params = DecodeParams(k=3, max_new_tokens=12, draft_cache_mode="recompute")
    out, _ = eqspec_decode(target, draft, prompts, params, batch_size=4)
    assert out == reference_outputs(target, prompts, 12)


def test_eqspec_max_new_tokens_one(target, draft, prompts):
    out, report = eqspec_decode(target, draft, prompts[:4], DecodeParams(max_new_tokens=1), batch_size=4)
    assert report.verify_calls == 1
    assert all(len(o) == 1 for o in out)


def test_eqspec_alignment_and_oracle_hold_every_round(target, draft):
    prompts = random_prompts(8, seed=5)
    disagreements, misaligned = [], []

    def on_verify(seqs, drafts, outcome, active):
        for i in np.flatnonzero(active):
            got = (int(outcome.accepted_len[i]), int(outcome.bonus[i]))
            if oracle_accept(target, seqs[i], drafts[i].tolist()) != got:
                disagreements.append(i)

    def on_realign(model, batch, state, positions):
        if not check_alignment(model, batch, state, positions):
            misaligned.append(batch.width)

    eqspec_decode(target, draft, prompts, DecodeParams(max_new_tokens=12), batch_size=4,
                  on_verify=on_verify, on_realign=on_realign)
    assert disagreements == [] and misaligned == []


def test_eqspec_verify_call_bounds(target, draft, prompts):
    params = DecodeParams(k=5, max_new_tokens=16)
    ref = reference_outputs(target, prompts, 16)
    _, report = eqspec_decode(target, draft, prompts, params, batch_size=1)
    assert sum(math.ceil(len(r) / 6) for r in ref) <= report.verify_calls <= sum(len(r) for r in ref)


def test_eqspec_wrong_mode(target, prompts):
    with pytest.raises(ValueError):
        eqspec_decode(target, target, prompts, DecodeParams(mode="exspec"))


def test_baseline_batch_invariance(target, prompts):
    a, _ = baseline_decode(target, prompts, 1, 16)
    b, _ = baseline_decode(target, prompts, 8, 16)
    assert a == b


def test_baseline_stops_at_eos(target):
    model = target
    rng = np.random.default_rng(0)
    for _ in range(500):
        prompt = rng.integers(2, 32, size=5).tolist()
        cont = continuation(model, prompt, 3)
        if cont[2] == EOS and EOS not in cont[:2]:
            break
    else:
        pytest.fail("no prompt found whose greedy run ends at step 3")
    out, _ = baseline_decode(model, [prompt], 1, 10)
    assert out == [cont]


def test_baseline_rejects_zero_tokens(target):
    with pytest.raises(ValueError):
        baseline_decode(target, [[3, 4]], 1, 0)
