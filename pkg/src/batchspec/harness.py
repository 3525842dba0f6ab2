"""Corpora, experiment configs, sweeps and result tables."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from batchspec.exspec import exspec_decode
from batchspec.faults import FaultMode, run_with_fault
from batchspec.metrics import COUNTER_FIELDS, EquivalenceScore, RunReport, score_equivalence
from batchspec.spec_core import DecodeParams, baseline_decode, reference_outputs
from batchspec.toy_lm import Model, ModelConfig, init_model

log = logging.getLogger(__name__)

CORPUS_KINDS = ("random_lengths", "uniform_length", "bucketed")
METHODS = ("baseline", "eqspec", "exspec")
PAIRINGS = ("independent", "clone")
# Faults expected to break equivalence; rollback_min must preserve it.
CORRUPTING_FAULTS = frozenset(m.value for m in FaultMode) - {"none", "rollback_min"}

DEFAULT_TARGET = ModelConfig(num_layers=2, num_heads=2, head_dim=8, vocab_size=32, seed=7,
                             eos_bias=3.5, prior_weight=3.0)
DEFAULT_DRAFT = ModelConfig(num_layers=1, num_heads=1, head_dim=8, vocab_size=32, seed=8,
                            eos_bias=3.5, prior_weight=3.0)

SUMMARY_COLUMNS = (
    "method", "batch_size", "window", "rep", "fault", "corpus_kind", "exact", "partial", "gate_ok",
    *COUNTER_FIELDS, "wall_time", "tokens_per_second", "overhead_fraction", "overhead_per_round",
)


@dataclass(frozen=True)
class Corpus:
    entries: tuple[tuple[str, tuple[int, ...]], ...]
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        ids = [i for i, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("corpus ids must be unique")
        for seq_id, tokens in self.entries:
            if not tokens:
                raise ValueError(f"prompt {seq_id!r} is empty")

    @property
    def ids(self) -> list[str]:
        return [i for i, _ in self.entries]

    @property
    def prompts(self) -> list[list[int]]:
        return [list(t) for _, t in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def validate(self, vocab_size: int) -> None:
        for seq_id, tokens in self.entries:
            if min(tokens) < 2 or max(tokens) >= vocab_size:
                raise ValueError(f"prompt {seq_id!r} has ids outside [2, {vocab_size})")

    def to_jsonl(self) -> str:
        return "".join(json.dumps({"id": i, "tokens": list(t)}) + "\n" for i, t in self.entries)

    def save(self, path: str | Path) -> None:
        atomic_write(path, self.to_jsonl())

    @classmethod
    def load(cls, path: str | Path) -> "Corpus":
        entries = []
        with open(path) as f:
            for n, line in enumerate(f, 1):
                if not line.strip():
                    continue
                rec = json.loads(line)
                if "id" not in rec or "tokens" not in rec:
                    raise ValueError(f"{path}:{n}: expected fields 'id' and 'tokens'")
                entries.append((str(rec["id"]), tuple(int(t) for t in rec["tokens"])))
        return cls(tuple(entries), {"kind": "file", "path": str(path)})


def gen_corpus(kind: str, n: int, min_len: int = 8, max_len: int = 40, length: int | None = None,
               buckets: Sequence[int] | None = None, vocab: int = 32, seed: int = 0) -> Corpus:
    """Synthetic prompts with a controlled length distribution.

    ``uniform_length`` uses ``length`` (default the midpoint of the range);
    ``bucketed`` draws from ``buckets`` (default four evenly spaced lengths).
    """
    if kind not in CORPUS_KINDS:
        raise ValueError(f"corpus kind must be one of {CORPUS_KINDS}, got {kind!r}")
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 1 <= min_len <= max_len:
        raise ValueError(f"invalid length range [{min_len}, {max_len}]")
    if vocab < 3:
        raise ValueError("vocab must leave room for content ids >= 2")
    rng = np.random.default_rng(seed)
    if kind == "random_lengths":
        lengths = rng.integers(min_len, max_len + 1, size=n)
        meta = {"min_len": min_len, "max_len": max_len}
    elif kind == "uniform_length":
        length = (min_len + max_len) // 2 if length is None else length
        if length < 1:
            raise ValueError("length must be >= 1")
        lengths = np.full(n, length)
        meta = {"length": length}
    else:
        buckets = list(buckets) if buckets else np.linspace(min_len, max_len, 4).round().astype(int).tolist()
        if min(buckets) < 1:
            raise ValueError("bucket lengths must be >= 1")
        lengths = rng.choice(buckets, size=n)
        meta = {"buckets": buckets}
    entries = tuple(
        (f"p{i:05d}", tuple(int(t) for t in rng.integers(2, vocab, size=int(m))))
        for i, m in enumerate(lengths)
    )
    return Corpus(entries, {"kind": kind, "n": n, "vocab": vocab, "seed": seed, **meta})


@dataclass
class ExperimentConfig:
    target: ModelConfig = DEFAULT_TARGET
    draft: ModelConfig = DEFAULT_DRAFT
    draft_pairing: str = "independent"
    k: int = 5
    max_new_tokens: int = 16
    draft_cache_mode: str = "cached"
    methods: list[str] = field(default_factory=lambda: ["baseline", "eqspec", "exspec"])
    batch_sizes: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    # Absolute window sizes override the per-B multipliers.
    windows: list[int] | None = None
    window_factors: list[int] = field(default_factory=lambda: [4])
    sort_by_length: bool = False
    fallback_policy: str = "front"
    starvation_guard: int = 8
    fault: str = "none"
    corpus: dict = field(default_factory=lambda: {"kind": "random_lengths", "n": 200, "min_len": 8, "max_len": 40})
    corpus_path: str | None = None
    out: str = "runs"
    reps: int = 1
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.target, dict):
            self.target = ModelConfig.from_dict(self.target)
        if isinstance(self.draft, dict):
            self.draft = ModelConfig.from_dict(self.draft)
        self.validate()

    def validate(self) -> None:
        self.target.validate()
        self.draft.validate()
        if self.draft_pairing not in PAIRINGS:
            raise ValueError(f"draft_pairing must be one of {PAIRINGS}")
        if self.draft.vocab_size != self.target.vocab_size:
            raise ValueError("draft and target must share a vocabulary")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ValueError(f"methods must be a nonempty subset of {METHODS}, got {self.methods}")
        if not self.batch_sizes or min(self.batch_sizes) < 1:
            raise ValueError("batch_sizes must be a nonempty list of positive counts")
        if self.windows is not None and (not self.windows or min(self.windows) < 1):
            raise ValueError("windows must be positive")
        if not self.window_factors or min(self.window_factors) < 1:
            raise ValueError("window_factors must be positive")
        FaultMode(self.fault)
        if self.reps < 1:
            raise ValueError("reps must be >= 1")
        DecodeParams(k=self.k, max_new_tokens=self.max_new_tokens, draft_cache_mode=self.draft_cache_mode)
        if self.corpus_path is None and self.corpus.get("kind") not in CORPUS_KINDS:
            raise ValueError(f"corpus kind must be one of {CORPUS_KINDS}")

    def params(self, mode: str) -> DecodeParams:
        return DecodeParams(k=self.k, max_new_tokens=self.max_new_tokens, mode=mode,
                            draft_cache_mode=self.draft_cache_mode)

    def windows_for(self, b: int) -> list[int]:
        ws = self.windows if self.windows is not None else [f * b for f in self.window_factors]
        return sorted({w for w in ws if w >= b})

    def to_dict(self) -> dict:
        out = asdict(self)
        out["target"] = self.target.to_dict()
        out["draft"] = self.draft.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def load_corpus(config: ExperimentConfig) -> Corpus:
    if config.corpus_path is not None:
        corpus = Corpus.load(config.corpus_path)
    else:
        spec = dict(config.corpus)
        kind = spec.pop("kind")
        spec.setdefault("vocab", config.target.vocab_size)
        spec.setdefault("seed", config.seed)
        corpus = gen_corpus(kind, **spec)
    corpus.validate(config.target.vocab_size)
    return corpus


def build_models(config: ExperimentConfig) -> tuple[Model, Model]:
    target = init_model(config.target)
    draft = target if config.draft_pairing == "clone" else init_model(config.draft)
    return target, draft


@dataclass
class CellResult:
    method: str
    batch_size: int
    window: int | None
    rep: int
    fault: str
    corpus_kind: str
    report: RunReport
    score: EquivalenceScore
    outputs: dict[str, list[int]]

    @property
    def name(self) -> str:
        w = f"_w{self.window}" if self.window is not None else ""
        f = f"_{self.fault}" if self.fault != "none" else ""
        return f"{self.method}_b{self.batch_size}{w}{f}_r{self.rep}"

    @property
    def gate_ok(self) -> bool:
        """Correctness gate with expected-failure semantics for faults."""
        if self.fault in CORRUPTING_FAULTS:
            return self.score.exact < 1.0
        return self.score.exact == 1.0

    def summary_row(self) -> dict:
        r = self.report
        row = {
            "method": self.method, "batch_size": self.batch_size, "window": self.window, "rep": self.rep,
            "fault": self.fault, "corpus_kind": self.corpus_kind, "exact": self.score.exact,
            "partial": self.score.partial, "gate_ok": self.gate_ok,
        }
        row.update(r.counters())
        row.update(wall_time=r.wall_time, tokens_per_second=r.tokens_per_second,
                   overhead_fraction=r.overhead_fraction, overhead_per_round=r.overhead_per_round)
        return row


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    cells: list[CellResult]

    @property
    def passed(self) -> bool:
        return all(c.gate_ok for c in self.cells)

    @property
    def exit_status(self) -> int:
        return 0 if self.passed else 1


def atomic_write(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def _csv_text(rows: Iterable[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({c: row[c] for c in columns})
    return buf.getvalue()


def _outputs_jsonl(outputs: dict[str, list[int]]) -> str:
    return "".join(json.dumps({"id": i, "tokens": t}) + "\n" for i, t in outputs.items())


def _decode(method: str, config: ExperimentConfig, target: Model, draft: Model, prompts, b: int,
            window: int | None, fault: str) -> tuple[list[list[int]], RunReport]:
    if method == "baseline":
        return baseline_decode(target, prompts, b, config.max_new_tokens)
    if method == "eqspec":
        return run_with_fault(fault, target, draft, prompts, config.params("eqspec"), batch_size=b)
    return exspec_decode(target, draft, prompts, config.params("exspec"), window, b,
                         sort_by_length=config.sort_by_length, fallback_policy=config.fallback_policy,
                         starvation_guard=config.starvation_guard)


def run_experiment(config: ExperimentConfig, write: bool = True) -> ExperimentResult:
    """Decode the corpus for every (method, batch size, window) cell.

    Each cell is scored against batch-1 baseline outputs computed here.  The
    fault, if any, applies to eqspec cells only.  With ``write`` the per-cell
    reports, output tokens, ``summary.csv`` and plot tables land in
    ``config.out``.
    """
    corpus = load_corpus(config)
    target, draft = build_models(config)
    prompts = corpus.prompts
    reference = dict(zip(corpus.ids, reference_outputs(target, prompts, config.max_new_tokens)))
    kind = corpus.metadata.get("kind", "unknown")
    out = Path(config.out)
    cells = []
    for rep in range(config.reps):
        for method in config.methods:
            for b in config.batch_sizes:
                windows = config.windows_for(b) if method == "exspec" else [None]
                for w in windows:
                    fault = config.fault if method == "eqspec" else "none"
                    outputs, report = _decode(method, config, target, draft, prompts, b, w, fault)
                    by_id = dict(zip(corpus.ids, outputs))
                    cell = CellResult(method, b, w, rep, fault, kind, report,
                                      score_equivalence(by_id, reference), by_id)
                    cells.append(cell)
                    log.info("%s exact=%.3f partial=%.3f verify_calls=%d", cell.name, cell.score.exact,
                             cell.score.partial, report.verify_calls)
                    if write:
                        _write_cell(out, cell)
    result = ExperimentResult(config, cells)
    if write:
        atomic_write(out / "config.json", json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
        atomic_write(out / "summary.csv", _csv_text((c.summary_row() for c in cells), SUMMARY_COLUMNS))
        emit_plotdata(cells, out)
    return result


def _write_cell(out: Path, cell: CellResult) -> None:
    record = cell.report.to_dict()
    record.update(rep=cell.rep, corpus_kind=cell.corpus_kind, gate_ok=cell.gate_ok,
                  equivalence={"exact": cell.score.exact, "partial": cell.score.partial})
    atomic_write(out / "reports" / f"{cell.name}.json", json.dumps(record, indent=2, sort_keys=True) + "\n")
    atomic_write(out / "outputs" / f"{cell.name}.jsonl", _outputs_jsonl(cell.outputs))


SCALING_COLUMNS = ("method", "batch_size", "window", "tokens_per_second", "normalized")
OVERHEAD_COLUMNS = ("method", "batch_size", "window", "overhead_fraction", "overhead_per_round")
GROUPING_COLUMNS = ("batch_size", "window", "corpus_kind", "grouping_rate")


def _pooled(cells: Sequence[CellResult]):
    groups: dict[tuple, list[CellResult]] = {}
    for c in cells:
        groups.setdefault((c.method, c.batch_size, c.window, c.corpus_kind), []).append(c)
    return groups


def plot_tables(cells: Sequence[CellResult]) -> dict[str, list[dict]]:
    """Scaling, overhead and grouping rows pooled over repetitions.

    Throughput is normalized to the same method at B=1 (mean over windows
    for exspec); cells without a B=1 run get an empty ``normalized``.
    """
    if not cells:
        raise ValueError("no reports to tabulate")
    groups = _pooled(cells)
    tps = {}
    for key, cs in groups.items():
        tokens = sum(c.report.tokens_generated for c in cs)
        wall = sum(c.report.wall_time for c in cs)
        tps[key] = tokens / wall if wall > 0 else 0.0
    base = {}
    for (method, b, _, kind), v in tps.items():
        if b == 1:
            base.setdefault((method, kind), []).append(v)
    scaling, overhead, grouping = [], [], []
    for key in sorted(groups, key=lambda k: (k[0], k[1], k[2] or 0, k[3])):
        method, b, w, kind = key
        cs = groups[key]
        ref = base.get((method, kind))
        norm = tps[key] / float(np.mean(ref)) if ref and np.mean(ref) > 0 else ""
        scaling.append({"method": method, "batch_size": b, "window": w, "tokens_per_second": tps[key],
                        "normalized": norm})
        oh = sum(c.report.phase_times["overhead"] for c in cs)
        wall = sum(c.report.wall_time for c in cs)
        calls = sum(c.report.verify_calls for c in cs)
        overhead.append({"method": method, "batch_size": b, "window": w,
                         "overhead_fraction": oh / wall if wall else 0.0,
                         "overhead_per_round": oh / calls if calls else 0.0})
        if method == "exspec":
            same = sum(c.report.same_length_rounds for c in cs)
            rounds = same + sum(c.report.fallback_rounds for c in cs)
            grouping.append({"batch_size": b, "window": w, "corpus_kind": kind,
                             "grouping_rate": same / rounds if rounds else 0.0})
    return {"scaling": scaling, "overhead": overhead, "grouping": grouping}


def emit_plotdata(cells: Sequence[CellResult], out_dir: str | Path) -> dict[str, Path]:
    """Write ``scaling.csv``, ``overhead.csv`` and ``grouping.csv``."""
    tables = plot_tables(cells)
    out_dir = Path(out_dir)
    paths = {}
    for name, columns in (("scaling", SCALING_COLUMNS), ("overhead", OVERHEAD_COLUMNS),
                          ("grouping", GROUPING_COLUMNS)):
        paths[name] = out_dir / f"{name}.csv"
        atomic_write(paths[name], _csv_text(tables[name], columns))
    return paths


def with_overrides(config: ExperimentConfig, **overrides) -> ExperimentConfig:
    """Copy of ``config`` with the non-None overrides applied and revalidated."""
    return replace(config, **{k: v for k, v in overrides.items() if v is not None})


__all__ = [
    "CORPUS_KINDS",
    "CellResult",
    "Corpus",
    "DEFAULT_DRAFT",
    "DEFAULT_TARGET",
    "ExperimentConfig",
    "ExperimentResult",
    "SUMMARY_COLUMNS",
    "build_models",
    "emit_plotdata",
    "gen_corpus",
    "load_corpus",
    "plot_tables",
    "run_experiment",
    "with_overrides",
]
