"""Command-line surface tying the pipeline together.

Every command validates its inputs up front, writes JSON/CSV artifacts
atomically (temp file + rename), and exits with a distinct status per error
class: 2 usage, 3 missing input file, 4 malformed input, 5 constraint or
validation failure.  All randomness flows from the single --seed value.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from tinyquant import corpus as corpus_mod
from tinyquant.checkpoint import (
    MalformedCheckpointError,
    atomic_write_bytes,
    load_checkpoint,
    save_checkpoint,
)
from tinyquant.compress import (
    CompressError,
    StructuralPlan,
    apply_structural_plan,
    sensitivity_scan,
)
from tinyquant.decode import CascadePolicy, cascade_run, speculative_decode
from tinyquant.evaluate import (
    profile_run,
    perplexity,
    reports_to_csv,
)
from tinyquant.explore import (
    ExploreError,
    NoFeasiblePoint,
    PrecisionAssignment,
    explore_exhaustive,
    greedy_search,
    select_under_constraint,
)
from tinyquant.fixture import FixtureSpec, make_fixture
from tinyquant.model import ModelError, decode_greedy
from tinyquant.quantized import QuantizedModel, calibrate

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3
EXIT_MALFORMED = 4
EXIT_CONSTRAINT = 5

CORPUS_ENV = "TINYQUANT_CORPUS_DIR"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _require_file(path: str | None, what: str) -> Path:
    if path is None:
        raise CliError(f"missing required {what}", EXIT_USAGE)
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {p}", EXIT_MISSING_INPUT)
    return p


def _resolve_corpus(path: str | None) -> Path:
    if path is None:
        root = os.environ.get(CORPUS_ENV)
        if root:
            candidate = Path(root) / "corpus.txt"
            if candidate.is_file():
                return candidate
            raise CliError(
                f"corpus not found under ${CORPUS_ENV}: {candidate}",
                EXIT_MISSING_INPUT)
        raise CliError(f"no --corpus given and ${CORPUS_ENV} unset", EXIT_USAGE)
    return _require_file(path, "corpus")


def _load_model(path: str | None):
    p = _require_file(path, "checkpoint")
    try:
        return load_checkpoint(p)
    except MalformedCheckpointError as exc:
        raise CliError(f"malformed checkpoint {p}: {exc}", EXIT_MALFORMED)


def _load_json(path: str | None, what: str) -> dict:
    p = _require_file(path, what)
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"malformed {what} {p}: {exc}", EXIT_MALFORMED)


def _parse_precisions(text: str) -> tuple:
    try:
        values = tuple(sorted({int(v) for v in text.split(",") if v}))
    except ValueError:
        raise CliError(f"bad --precisions value {text!r}", EXIT_USAGE)
    if not values:
        raise CliError("empty --precisions", EXIT_USAGE)
    return values


def _weight_quant_ppl(model, assignment, sequences):
    from tinyquant.compress import apply_assignment
    return perplexity(apply_assignment(model, assignment), sequences)


def cmd_make_fixture(args) -> int:
    spec = FixtureSpec(seed=args.seed, quick=args.quick,
                       corpus_bytes=args.corpus_kb * 1000,
                       target_steps=args.target_steps,
                       draft_steps=args.draft_steps)
    manifest = make_fixture(args.out_dir, spec)
    print(json.dumps(manifest, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_scan(args) -> int:
    model = _load_model(args.checkpoint)
    tokens = corpus_mod.load_corpus(_resolve_corpus(args.corpus))
    try:
        sequences = corpus_mod.validation_slice(tokens)
        precisions = _parse_precisions(args.precisions) + (16,)
        profile = sensitivity_scan(
            model, sequences, lambda m, s: perplexity(m, s),
            precision_set=precisions)
    except (CompressError, ValueError) as exc:
        raise CliError(str(exc), EXIT_CONSTRAINT)
    out = Path(args.out)
    _atomic_write_text(out, profile.to_json())
    print(f"wrote {out} (baseline perplexity {profile.baseline_metric:.4f})")
    return EXIT_OK


def cmd_explore(args) -> int:
    model = _load_model(args.checkpoint)
    tokens = corpus_mod.load_corpus(_resolve_corpus(args.corpus))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        sequences = corpus_mod.validation_slice(tokens)
        precisions = _parse_precisions(args.precisions)
        blocks = None
        if args.blocks:
            from tinyquant.model import BlockId
            blocks = [BlockId.parse(b) for b in args.blocks.split(",") if b]
        if args.strategy == "exhaustive":
            report = explore_exhaustive(
                model, sequences, _weight_quant_ppl,
                blocks=blocks, precision_set=precisions)
        else:
            profile = None
            if args.profile:
                from tinyquant.compress import SensitivityProfile
                profile = SensitivityProfile.from_json(
                    _require_file(args.profile, "profile").read_text())
            report = greedy_search(
                model, sequences, _weight_quant_ppl, budget=args.budget,
                precision_set=precisions, profile=profile)
    except (ExploreError, CompressError, ModelError, ValueError) as exc:
        raise CliError(str(exc), EXIT_CONSTRAINT)
    _atomic_write_text(out_dir / "report.json", report.to_json())
    _atomic_write_text(out_dir / "report.csv", report.to_csv())
    msg = (f"wrote {out_dir}/report.json and report.csv "
           f"({len(report.points)} points, {len(report.front)} on front)")
    if args.max_degradation is not None:
        try:
            chosen = select_under_constraint(report, args.max_degradation)
        except NoFeasiblePoint as exc:
            raise CliError(str(exc), EXIT_CONSTRAINT)
        _atomic_write_text(out_dir / "selected.json",
                           json.dumps(chosen.to_dict(), indent=2,
                                      sort_keys=True))
        msg += f"; selected saving {chosen.memory_saving:.2%}"
    print(msg)
    return EXIT_OK


def cmd_compress(args) -> int:
    model = _load_model(args.checkpoint)
    plan_data = _load_json(args.plan, "plan")
    try:
        plan = StructuralPlan.from_json(json.dumps(plan_data))
        compressed = apply_structural_plan(model, plan)
    except (CompressError, ModelError, KeyError, TypeError, ValueError) as exc:
        raise CliError(f"invalid plan: {exc}", EXIT_MALFORMED
                       if isinstance(exc, (KeyError, TypeError)) else
                       EXIT_CONSTRAINT)
    save_checkpoint(compressed, args.out)
    msg = f"wrote {args.out}"
    if args.corpus:
        tokens = corpus_mod.load_corpus(_resolve_corpus(args.corpus))
        sequences = corpus_mod.validation_slice(tokens)
        report = profile_run(compressed, sequences,
                             descriptor=f"plan:{Path(args.plan).name}")
        if args.report:
            _atomic_write_text(Path(args.report), report.to_json())
            msg += f" and {args.report}"
        print(f"perplexity {report.value:.4f}, MACs {report.mac_count}")
    print(msg)
    return EXIT_OK


def cmd_decode(args) -> int:
    model = _load_model(args.checkpoint)
    rng = np.random.default_rng(args.seed)
    if args.prompt is not None:
        prompt = corpus_mod.tokenize_text(args.prompt)
    elif args.prompt_file:
        prompt = corpus_mod.load_corpus(
            _require_file(args.prompt_file, "prompt file"))
    else:
        raise CliError("need --prompt or --prompt-file", EXIT_USAGE)
    if prompt.size == 0:
        raise CliError("prompt is empty", EXIT_CONSTRAINT)
    try:
        if args.draft:
            draft = _load_model(args.draft)
            tokens, stats = speculative_decode(
                draft, model, prompt, args.steps, draft_len=args.gamma)
            result = {
                "mode": "speculative",
                "continuation": corpus_mod.detokenize(tokens),
                "stats": stats.to_dict(),
            }
        else:
            cache = model.new_cache() if not args.no_cache else None
            tokens = decode_greedy(model, prompt, args.steps, cache=cache)
            result = {
                "mode": "greedy",
                "continuation": corpus_mod.detokenize(tokens),
                "stats": {"steps": int(tokens.size)},
            }
    except ModelError as exc:
        raise CliError(str(exc), EXIT_CONSTRAINT)
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.out:
        _atomic_write_text(Path(args.out), text)
    print(text)
    return EXIT_OK


def cmd_cascade(args) -> int:
    small = _load_model(args.small)
    large = _load_model(args.checkpoint)
    tokens = corpus_mod.load_corpus(_resolve_corpus(args.corpus))
    rng = np.random.default_rng(args.seed)
    try:
        policy = CascadePolicy(confidence_threshold=args.threshold,
                               self_test=args.self_test,
                               escalation_budget=args.budget)
    except ModelError as exc:
        raise CliError(str(exc), EXIT_CONSTRAINT)
    prompts = corpus_mod.sample_prompts(tokens, args.count, rng,
                                        min_len=8, max_len=16)
    inputs = [p[:-1] for p in prompts]
    labels = [int(p[-1]) for p in prompts]
    _, stats = cascade_run(small, large, inputs, policy, labels=labels)
    text = json.dumps(stats.to_dict(), indent=2, sort_keys=True)
    if args.out:
        _atomic_write_text(Path(args.out), text)
    print(text)
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    tokens = corpus_mod.load_corpus(_resolve_corpus(args.corpus))
    try:
        sequences = corpus_mod.validation_slice(tokens)
        descriptor = f"checkpoint:{Path(args.checkpoint).name}"
        target = model
        structure = None
        if args.plan:
            plan = StructuralPlan.from_json(
                json.dumps(_load_json(args.plan, "plan")))
            target = apply_structural_plan(model, plan)
            descriptor += f"+plan:{Path(args.plan).name}"
        if args.assignment:
            mapping = _load_json(args.assignment, "assignment")
            assignment = PrecisionAssignment.from_dict(mapping)
            calib = calibrate(target, corpus_mod.calibration_slice(tokens),
                              clip_percentile=args.clip_percentile)
            target = QuantizedModel.build(target, assignment, calib)
            structure = model
            descriptor += f"+assignment:{Path(args.assignment).name}"
        report = profile_run(target, sequences, descriptor=descriptor,
                             structure_model=structure)
    except (ModelError, ExploreError, ValueError) as exc:
        raise CliError(str(exc), EXIT_CONSTRAINT)
    _atomic_write_text(Path(args.out), report.to_json())
    print(f"wrote {args.out} (perplexity {report.value:.4f})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tinyquant",
        description="toy integer-only transformer compression toolkit")
    parser.add_argument("--seed", type=int, default=1234,
                        help="seed for all run randomness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-fixture", help="generate corpus and checkpoints")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--quick", action="store_true",
                   help="tiny config for smoke tests")
    p.add_argument("--corpus-kb", type=int, default=220)
    p.add_argument("--target-steps", type=int, default=600)
    p.add_argument("--draft-steps", type=int, default=250)
    p.set_defaults(func=cmd_make_fixture)

    p = sub.add_parser("scan", help="block-wise sensitivity scan")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus")
    p.add_argument("--precisions", default="2,3,4,8")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("explore", help="mixed-precision pareto exploration")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus")
    p.add_argument("--precisions", default="4,8,16")
    p.add_argument("--blocks", help="comma-separated block ids to vary")
    p.add_argument("--strategy", choices=("exhaustive", "greedy"),
                   default="exhaustive")
    p.add_argument("--budget", type=int, default=64,
                   help="evaluation budget for greedy search")
    p.add_argument("--profile", help="sensitivity profile JSON for greedy")
    p.add_argument("--max-degradation", type=float, default=None,
                   help="also select a point within this metric degradation")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_explore)

    p = sub.add_parser("compress", help="apply a structural plan")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--corpus")
    p.add_argument("--report")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decode", help="greedy or speculative decoding")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--draft", help="draft checkpoint enables speculation")
    p.add_argument("--gamma", type=int, default=4)
    p.add_argument("--prompt")
    p.add_argument("--prompt-file")
    p.add_argument("--steps", type=int, default=64)
    p.add_argument("--no-cache", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("cascade", help="confidence-gated model cascade")
    p.add_argument("--checkpoint", required=True,
                   help="large model checkpoint")
    p.add_argument("--small", required=True)
    p.add_argument("--corpus")
    p.add_argument("--threshold", type=float, default=0.7)
    p.add_argument("--self-test", choices=("max_prob", "entropy"),
                   default="max_prob")
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--out")
    p.set_defaults(func=cmd_cascade)

    p = sub.add_parser("eval", help="perplexity / MAC evaluation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus")
    p.add_argument("--assignment", help="JSON {block: bits} for integer eval")
    p.add_argument("--plan", help="structural plan JSON")
    p.add_argument("--clip-percentile", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except MalformedCheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MALFORMED
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_INPUT


if __name__ == "__main__":
    sys.exit(main())
