"""Command-line entry point: prepare, train, evaluate, generate, pipeline, selfcheck."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import errors
from .conditions import SlotLexicon
from .data import (
    build_stage_datasets,
    load_knowledge_bases,
    load_style_corpus,
    read_jsonl,
    read_turns,
    write_jsonl,
    write_turns,
)
from .evaluation import evaluate_corpus
from .pipeline import StageModels, run_three_stage
from .selfcheck import run_selfcheck
from .synthetic import CarCorpusConfig, generate_car_corpus, generate_style_corpus
from .training import RunConfig, generate_texts, load_generator, run_training

log = logging.getLogger("memgat")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

_EXIT_FOR = [
    (errors.ConfigError, EXIT_CONFIG),
    (errors.DeterminismError, EXIT_NUMERIC),
    ((errors.MemGatError, OSError, ValueError), EXIT_DATA),
]


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage errors share the config exit code
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _write_manifest(out: Path, **extra) -> None:
    files = sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    (out / "manifest.json").write_text(json.dumps({"files": files, **extra}, indent=2, sort_keys=True), encoding="utf-8")


def _lexicon(path: str | None) -> SlotLexicon:
    return SlotLexicon.from_file(path) if path else SlotLexicon.default()


def cmd_prepare(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lexicon = _lexicon(args.lexicon)
    if args.synthetic == "style" or args.style:
        if args.style:
            turns = load_style_corpus(args.style)
        else:
            raw = generate_style_corpus(args.style_turns, args.seed)
            write_jsonl(out / "style_raw.jsonl", raw)
            turns = load_style_corpus(out / "style_raw.jsonl")
        if not turns:
            raise errors.DegenerateBatchError("the style corpus is empty")
        write_turns(out / "style.jsonl", turns)
        _write_manifest(out, rows={"style": len(turns)})
        print(f"style: {len(turns)} rows")
        return EXIT_OK
    if args.synthetic == "car":
        corpus = generate_car_corpus(CarCorpusConfig(seed=args.seed))
        dialogues = corpus.dialogues()
        write_jsonl(out / "corpus.jsonl", dialogues)
        write_jsonl(out / "kb.jsonl", [kb.to_record() for kb in corpus.kbs.values()])
        kbs = corpus.kbs
    else:
        if not args.corpus or not args.kb:
            raise errors.ConfigError("prepare needs --corpus and --kb, or --synthetic")
        for path in (args.corpus, args.kb):
            if not Path(path).exists():
                raise errors.IngestionError(f"file not found: {path}")
        dialogues = [rec for _, rec in read_jsonl(args.corpus)]
        kbs = load_knowledge_bases(args.kb, lexicon)
    if not dialogues:
        raise errors.DegenerateBatchError(f"the dialogue corpus {args.corpus or 'synthetic'} is empty")
    stages = build_stage_datasets(dialogues, kbs, lexicon)
    rows = {}
    for stage, turns in stages.by_stage().items():
        write_turns(out / f"stage{stage}.jsonl", turns)
        rows[f"stage{stage}"] = len(turns)
    (out / "quality.json").write_text(json.dumps(stages.report.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    _write_manifest(out, rows=rows)
    for name, n in rows.items():
        print(f"{name}: {n} rows")
    return EXIT_OK


def cmd_train(args) -> int:
    run = RunConfig.from_file(args.config)
    overrides = {k: v for k, v in (("epochs", args.epochs), ("seed", args.seed), ("output_dir", args.output_dir), ("max_steps", args.max_steps)) if v is not None}
    if args.ablate_memory:
        overrides["ablate_memory"] = True
    if overrides:
        run = RunConfig.from_dict({**run.to_dict(), **overrides})
    result = run_training(run)
    last = result.history[-1]
    print(f"trained {run.task} for {last['epoch']} epochs ({last['steps']} steps); outputs in {result.output_dir}")
    return EXIT_OK


def _read_predictions(path: str) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    return text.split("\n")[:-1] if text.endswith("\n") else text.split("\n")


def cmd_evaluate(args) -> int:
    model, vocab = load_generator(args.checkpoint, args.vocab)
    turns = read_turns(args.test)
    if not turns:
        raise errors.DegenerateBatchError(f"{args.test} has no rows")
    predictions = generate_texts(model, vocab, [t.input_text for t in turns], [t.memory_items for t in turns], args.max_len)
    references = [t.target_text for t in turns]
    baseline = None
    if args.baseline:
        baseline = ("baseline", _read_predictions(args.baseline))
    report = evaluate_corpus(predictions, references, "system", _lexicon(args.lexicon), baseline, args.resamples, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json(), encoding="utf-8")
    out.with_suffix(".predictions.txt").write_text("".join(p + "\n" for p in predictions), encoding="utf-8")
    print(report.table())
    return EXIT_OK


def cmd_generate(args) -> int:
    model, vocab = load_generator(args.checkpoint, args.vocab)
    if args.test:
        turns = read_turns(args.test)
        inputs, memories = [t.input_text for t in turns], [t.memory_items for t in turns]
    elif args.input is not None:
        inputs, memories = [args.input], [args.memory or []]
    else:
        raise errors.ConfigError("generate needs --input or --test")
    outputs = generate_texts(model, vocab, inputs, memories, args.max_len)
    text = "".join(o + "\n" for o in outputs)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_pipeline(args) -> int:
    lexicon = _lexicon(args.lexicon)
    loaded = [load_generator(p) for p in (args.stage1, args.stage2, args.stage3)]
    vocab = loaded[0][1]
    if any(v != vocab for _, v in loaded[1:]):
        raise errors.CompatibilityError("the three stage checkpoints carry different vocabularies")
    models = StageModels(loaded[0][0], loaded[1][0], loaded[2][0], vocab)
    kbs = load_knowledge_bases(args.kb, lexicon)
    if args.questions:
        queries = [(str(rec["scenario"]), str(rec["question"])) for _, rec in read_jsonl(args.questions)]
    elif args.question and args.scenario:
        queries = [(args.scenario, args.question)]
    else:
        raise errors.ConfigError("pipeline needs --questions, or --question with --scenario")
    traces = []
    for scenario, question in queries:
        if scenario not in kbs:
            raise errors.IngestionError(f"no knowledge base for scenario {scenario!r}")
        result = run_three_stage(question, kbs[scenario], models, lexicon, max_len=args.max_len)
        traces.append({"scenario": scenario, **result.to_dict()})
        print(result.answer)
    if args.out:
        write_jsonl(args.out, traces)
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    results = run_selfcheck()
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_NUMERIC if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="memgat", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", help="build stage datasets from raw dialogues and knowledge bases")
    p.add_argument("--corpus", help="dialogue JSONL")
    p.add_argument("--kb", help="knowledge-base JSONL")
    p.add_argument("--style", help="raw style JSONL {question, gender, age, answer}")
    p.add_argument("--synthetic", choices=["car", "style"], help="generate a synthetic corpus instead")
    p.add_argument("--style-turns", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lexicon")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train one stage or task model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir")
    p.add_argument("--ablate-memory", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score greedy generations on a test file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--baseline", help="baseline predictions, one line per test row")
    p.add_argument("--vocab", help="vocabulary file that must match the checkpoint")
    p.add_argument("--lexicon")
    p.add_argument("--resamples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-len", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("generate", help="greedy generation for one input or a test file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input")
    p.add_argument("--memory", nargs="*", help="memory items such as poi:oak garage")
    p.add_argument("--test")
    p.add_argument("--vocab")
    p.add_argument("--max-len", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("pipeline", help="answer factual questions with the three stage models")
    p.add_argument("--stage1", required=True)
    p.add_argument("--stage2", required=True)
    p.add_argument("--stage3", required=True)
    p.add_argument("--kb", required=True)
    p.add_argument("--question")
    p.add_argument("--scenario")
    p.add_argument("--questions", help="JSONL of {scenario, question}")
    p.add_argument("--lexicon")
    p.add_argument("--max-len", type=int)
    p.add_argument("--out", help="trace JSONL")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("selfcheck", help="gradient checks, metric and POI oracles, empty-memory equivalence")
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        for kinds, code in _EXIT_FOR:
            if isinstance(exc, kinds):
                print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
