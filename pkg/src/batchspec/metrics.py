"""Run reports, equivalence scoring and the analytic speedup models."""

from __future__ import annotations

import time
from collections import Counter
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Hashable, Mapping, Sequence

import numpy as np

from batchspec.batch_align import OpCounters

PHASES = ("draft", "verify", "overhead")

# Report fields that are pure functions of (config, seed); timings excluded.
COUNTER_FIELDS = (
    "n_sequences",
    "tokens_generated",
    "verify_calls",
    "draft_calls",
    "draft_forwards",
    "realign_ops",
    "repads",
    "pad_deltas",
    "zero_fill_allocs",
    "cache_stacks",
    "same_length_rounds",
    "fallback_rounds",
    "grouping_rate",
    "mean_accepted",
)


@dataclass
class RunReport:
    method: str
    batch_size: int
    k: int = 0
    window: int | None = None
    fault: str = "none"
    n_sequences: int = 0
    tokens_generated: int = 0
    wall_time: float = 0.0
    tokens_per_second: float = 0.0
    verify_calls: int = 0
    draft_calls: int = 0
    draft_forwards: int = 0
    realign_ops: int = 0
    repads: int = 0
    pad_deltas: int = 0
    zero_fill_allocs: int = 0
    cache_stacks: int = 0
    same_length_rounds: int = 0
    fallback_rounds: int = 0
    grouping_rate: float = 0.0
    phase_times: dict[str, float] = field(default_factory=lambda: dict.fromkeys(PHASES, 0.0))
    accepted_hist: dict[int, int] = field(default_factory=dict)
    mean_accepted: float = 0.0

    def phase_fractions(self) -> dict[str, float]:
        if self.wall_time <= 0:
            return dict.fromkeys(PHASES, 0.0)
        return {p: self.phase_times[p] / self.wall_time for p in PHASES}

    @property
    def overhead_fraction(self) -> float:
        return self.phase_fractions()["overhead"]

    @property
    def overhead_per_round(self) -> float:
        return self.phase_times["overhead"] / self.verify_calls if self.verify_calls else 0.0

    def counters(self) -> dict:
        return {name: getattr(self, name) for name in COUNTER_FIELDS}

    def to_dict(self) -> dict:
        out = asdict(self)
        out["accepted_hist"] = {str(k): v for k, v in sorted(self.accepted_hist.items())}
        out["phase_fractions"] = self.phase_fractions()
        return out


class RunRecorder:
    """Accumulates timings and counters over one decode loop."""

    def __init__(self, method: str, batch_size: int, k: int = 0, window: int | None = None, fault: str = "none"):
        self.report = RunReport(method=method, batch_size=batch_size, k=k, window=window, fault=fault)
        self.ops = OpCounters()
        self._hist: Counter[int] = Counter()
        self._t0 = time.perf_counter()

    @contextmanager
    def phase(self, name: str):
        t = time.perf_counter()
        try:
            yield
        finally:
            self.report.phase_times[name] += time.perf_counter() - t

    def record_acceptance(self, accepted_lengths) -> None:
        self._hist.update(int(a) for a in accepted_lengths)

    def finish(self, outputs: Sequence[Sequence[int]]) -> RunReport:
        r = self.report
        r.wall_time = time.perf_counter() - self._t0
        r.phase_times["overhead"] = max(0.0, r.wall_time - r.phase_times["draft"] - r.phase_times["verify"])
        r.n_sequences = len(outputs)
        r.tokens_generated = sum(len(o) for o in outputs)
        r.tokens_per_second = r.tokens_generated / r.wall_time if r.wall_time > 0 else 0.0
        for name, value in self.ops.as_dict().items():
            setattr(r, name, value)
        r.accepted_hist = dict(sorted(self._hist.items()))
        total = sum(self._hist.values())
        r.mean_accepted = sum(a * c for a, c in self._hist.items()) / total if total else 0.0
        rounds = r.same_length_rounds + r.fallback_rounds
        r.grouping_rate = r.same_length_rounds / rounds if rounds else 0.0
        return r


@dataclass(frozen=True)
class EquivalenceScore:
    exact: float
    partial: float
    per_sequence: tuple[float, ...] = ()


def _common_prefix(a: Sequence[int], b: Sequence[int]) -> int:
    n = 0
    for x, y in zip(a, b):
        if x != y:
            break
        n += 1
    return n


def score_equivalence(candidate, reference) -> EquivalenceScore:
    """Exact-match fraction and mean first-divergence ratio.

    Both arguments are either mappings from sequence id to tokens or
    equally long lists aligned by position.
    """
    cand = _as_mapping(candidate)
    ref = _as_mapping(reference)
    if set(cand) != set(ref):
        missing = sorted(map(str, set(ref) ^ set(cand)))
        raise ValueError(f"sequence ids differ between candidate and reference: {missing[:5]}")
    if not ref:
        raise ValueError("nothing to score")
    exact = 0
    partial = []
    for key, r in ref.items():
        c = cand[key]
        exact += list(c) == list(r)
        partial.append(min(1.0, _common_prefix(c, r) / len(r)) if len(r) else float(len(c) == 0))
    return EquivalenceScore(exact=exact / len(ref), partial=float(np.mean(partial)), per_sequence=tuple(partial))


def _as_mapping(outputs) -> Mapping[Hashable, Sequence[int]]:
    if isinstance(outputs, Mapping):
        return outputs
    return dict(enumerate(outputs))


def expected_tokens_per_iteration(alpha: float, k: int) -> float:
    """Mean tokens emitted per round, ``(1 - alpha**(k+1)) / (1 - alpha)``."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    if k < 0:
        raise ValueError("k must be nonnegative")
    return (1.0 - alpha ** (k + 1)) / (1.0 - alpha)


def modeled_speedup(alpha: float, k: int, c_draft: float, c_verify: float, c_overhead: float) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    denom = c_draft + c_verify + c_overhead
    if denom <= 0:
        raise ValueError("cost denominator must be positive")
    return alpha * k / denom


def simulate_bernoulli_rounds(alpha: float, k: int, rounds: int, seed: int = 0) -> np.ndarray:
    """Tokens per round when each draft token is accepted independently.

    A round accepts drafts until the first rejection, then adds the bonus
    token, so it yields between 1 and ``k + 1`` tokens.
    """
    rng = np.random.default_rng(seed)
    accept = rng.random((rounds, k)) < alpha
    prefix = np.where(accept.all(axis=1), k, np.argmin(accept, axis=1))
    return prefix + 1


def empirical_alpha(reports: Sequence[RunReport] | RunReport) -> float:
    """Mean accepted length over draft length, across every round and row."""
    if isinstance(reports, RunReport):
        reports = [reports]
    accepted = rows = 0
    for r in reports:
        if r.verify_calls <= 0 or r.k <= 0:
            raise ValueError("empirical_alpha needs speculative reports with verify_calls > 0")
        for a, c in r.accepted_hist.items():
            accepted += int(a) * c
            rows += c * r.k
    return accepted / rows if rows else 0.0


@dataclass(frozen=True)
class OverheadRow:
    batch_size: int
    overhead_fraction: float
    overhead_per_round: float


def fit_overhead_curve(reports: Sequence[tuple[int, RunReport]], require_monotone: bool = False) -> list[OverheadRow]:
    """Tabulate OH% and OH per round by batch size.

    Reports sharing a batch size are pooled by summing their times.  With
    ``require_monotone`` a decrease in overhead fraction across increasing
    batch sizes raises ``ValueError``.
    """
    pooled: dict[int, list[float]] = {}
    for b, r in reports:
        acc = pooled.setdefault(int(b), [0.0, 0.0, 0.0])
        acc[0] += r.phase_times["overhead"]
        acc[1] += r.wall_time
        acc[2] += r.verify_calls
    rows = [
        OverheadRow(b, oh / wall if wall else 0.0, oh / calls if calls else 0.0)
        for b, (oh, wall, calls) in sorted(pooled.items())
    ]
    if require_monotone and len(rows) >= 2:
        for prev, cur in zip(rows, rows[1:]):
            if cur.overhead_fraction < prev.overhead_fraction:
                raise ValueError(
                    f"overhead fraction fell from {prev.overhead_fraction:.3f} at B={prev.batch_size} "
                    f"to {cur.overhead_fraction:.3f} at B={cur.batch_size}"
                )
    return rows
