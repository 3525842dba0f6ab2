"""Command-line driver for decoding sweeps.

Every flag overrides the matching key of the JSON config given by
``--config``; the exit status is the correctness gate.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from batchspec.faults import FaultMode
from batchspec.harness import CORPUS_KINDS, METHODS, PAIRINGS, ExperimentConfig, run_experiment, with_overrides


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return values


def _methods(text: str) -> list[str]:
    values = [v.strip() for v in text.split(",") if v.strip()]
    bad = [v for v in values if v not in METHODS]
    if bad or not values:
        raise argparse.ArgumentTypeError(f"methods must be drawn from {METHODS}, got {text!r}")
    return values


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="batchspec", description=__doc__.splitlines()[0])
    p.add_argument("--config", type=Path, help="JSON experiment config")
    p.add_argument("--method", type=_methods, help=f"comma-separated subset of {','.join(METHODS)}")
    p.add_argument("--batch-size", type=_int_list, help="comma-separated batch sizes")
    p.add_argument("--window", type=_int_list, help="comma-separated exspec window sizes (default 4*B)")
    p.add_argument("--k", type=int, help="draft tokens per round")
    p.add_argument("--max-new-tokens", type=int)
    p.add_argument("--corpus", type=Path, help="JSONL corpus with fields id and tokens")
    p.add_argument("--gen-corpus", choices=CORPUS_KINDS, help="generate a synthetic corpus of this kind")
    p.add_argument("--n-prompts", type=int, help="size of a generated corpus")
    p.add_argument("--sort-by-length", action="store_true", default=None, help="admit shortest prompts first")
    p.add_argument("--fault", choices=[m.value for m in FaultMode], help="inject a fault into eqspec cells")
    p.add_argument("--draft", choices=PAIRINGS, help="independent draft weights or a clone of the target")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--reps", type=int, help="repetitions per cell")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    corpus = None
    if args.gen_corpus is not None or args.n_prompts is not None:
        corpus = dict(config.corpus)
        if args.gen_corpus is not None:
            corpus["kind"] = args.gen_corpus
        if args.n_prompts is not None:
            corpus["n"] = args.n_prompts
    return with_overrides(
        config,
        methods=args.method,
        batch_sizes=args.batch_size,
        windows=args.window,
        k=args.k,
        max_new_tokens=args.max_new_tokens,
        corpus=corpus,
        corpus_path=str(args.corpus) if args.corpus is not None else None,
        sort_by_length=args.sort_by_length,
        fault=args.fault,
        draft_pairing=args.draft,
        seed=args.seed,
        out=str(args.out) if args.out is not None else None,
        reps=args.reps,
    )


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        config = config_from_args(args)
    except (ValueError, OSError) as exc:
        parser.error(str(exc))
    result = run_experiment(config)
    for cell in result.cells:
        status = "ok" if cell.gate_ok else "GATE FAILED"
        print(f"{cell.name:<40} exact={cell.score.exact:.3f} partial={cell.score.partial:.3f} "
              f"verify_calls={cell.report.verify_calls:<5d} {status}")
    print(f"results in {config.out}; gate {'passed' if result.passed else 'failed'}")
    return result.exit_status


if __name__ == "__main__":
    sys.exit(main())
