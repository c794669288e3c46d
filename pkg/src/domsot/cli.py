"""``domsot`` command line: gen, mix, train, eval, score, dominance, analyze.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .analysis import adherence_from, encoder_scores, factor_analysis
from .core import ConfigError, ExperimentConfig, Vocabulary, VocabularyError, substream
from .data import (DataError, MixPolicy, SynthSpec, balanced_pairs, build_eval_conditions,
                   generate_corpus, mix_corpus, read_corpus, read_manifest, seconds_to_frames,
                   write_corpus, write_manifest)
from .metrics import MetricError, dumps_report, score_corpus
from .model import ModelError, load_checkpoint, save_checkpoint
from .serialization import SerializationError, dom_order
from .trainer import NumericError, evaluate, read_hypotheses, train, write_hypotheses

log = logging.getLogger("domsot")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DATA_ERRORS = (DataError, VocabularyError, ConfigError, ModelError, MetricError,
               SerializationError, FileNotFoundError, json.JSONDecodeError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _global_flags(p: argparse.ArgumentParser, top: bool) -> None:
    default = None if top else argparse.SUPPRESS
    p.add_argument("--seed", type=int, default=default, help="global seed (u64)")
    p.add_argument("--config", type=Path, default=default, help="experiment config file")
    p.add_argument("--out-dir", type=Path, default=default, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="domsot", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    _global_flags(parser, top=True)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic single-talker corpus")
    _global_flags(p, top=False)
    p.add_argument("--count", type=int, default=1200)
    p.add_argument("--vocab-size", type=int, default=8)
    p.add_argument("--feature-dim", type=int, default=12)
    p.add_argument("--noise-std", type=float, default=0.05)
    p.add_argument("--loudness", type=float, nargs=2, default=(0.7, 1.3), metavar=("LO", "HI"))
    p.add_argument("--tokens", type=int, nargs=2, default=(2, 4), metavar=("MIN", "MAX"))
    p.add_argument("--frames-per-token", type=int, nargs=2, default=(20, 30), metavar=("MIN", "MAX"))

    p = sub.add_parser("mix", help="build mixture manifests from a corpus")
    _global_flags(p, top=False)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--n-speakers", type=int, default=2)
    p.add_argument("--offset", type=float, action="append",
                   help="fixed offset in seconds (repeatable; one manifest per offset)")
    p.add_argument("--mode", choices=("always_offset", "partial_offset"), default="partial_offset",
                   help="offset protocol for training manifests (ignored with --offset)")
    p.add_argument("--count", type=int, default=2000)
    p.add_argument("--pool", default=None, metavar="START:END",
                   help="slice of corpus utterances to draw from")
    p.add_argument("--balanced", action="store_true",
                   help="emit a factor-balanced two-talker set (one per --offset)")
    p.add_argument("--loudness-ratio", type=float, default=2.0)
    p.add_argument("--name", default=None, help="manifest file stem")

    p = sub.add_parser("train", help="train a model")
    _global_flags(p, top=False)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--strategy", choices=("fifo", "pit", "dom"))
    p.add_argument("--alpha", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("eval", help="greedy-decode a manifest")
    _global_flags(p, top=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--output", type=Path, default=None)

    p = sub.add_parser("score", help="speaker-blind and speaker-aware WER")
    _global_flags(p, top=False)
    p.add_argument("--hyps", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--condition", default=None)
    p.add_argument("--output", type=Path, default=None)

    p = sub.add_parser("dominance", help="per-component CTC dominance scores")
    _global_flags(p, top=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--output", type=Path, default=None)

    p = sub.add_parser("analyze", help="adherence rate and factor report")
    _global_flags(p, top=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--hyps", type=Path, default=None)
    p.add_argument("--strategy", choices=("fifo", "pit", "dom"), default=None)
    return parser


def find_vocab(*anchors: Path) -> Vocabulary:
    for anchor in anchors:
        for d in (anchor.parent, anchor.parent.parent):
            cand = d / "vocab.txt"
            if cand.exists():
                return Vocabulary.load(cand)
    raise DataError(f"no vocab.txt next to {anchors[0]} or its parent directory")


def _pool(spec: str | None, n: int) -> slice:
    if spec is None:
        return slice(0, n)
    try:
        lo, hi = (int(x) if x else None for x in spec.split(":"))
    except ValueError as exc:
        raise UsageError(f"bad --pool {spec!r}") from exc
    return slice(lo, hi)


def _provenance(args, out_dir: Path, outputs: list) -> None:
    record = {
        "command": args.command,
        "argv": args.argv,
        "seed": args.seed,
        "flags": {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
                  if k not in ("argv",)},
        "outputs": [str(o) for o in outputs],
        "version": __version__,
    }
    (out_dir / f"provenance_{args.command}.json").write_text(
        json.dumps(record, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def cmd_gen(args, out: Path) -> list:
    spec = SynthSpec(vocab_size=args.vocab_size, feature_dim=args.feature_dim,
                     frames_per_token=tuple(args.frames_per_token), prototype_noise_std=args.noise_std,
                     loudness_range=tuple(args.loudness), utterance_length_range=tuple(args.tokens),
                     seed=args.seed)
    corpus = generate_corpus(spec, args.count, substream(args.seed, "corpus"))
    spec.vocabulary().save(out / "vocab.txt")
    write_corpus(out / "corpus.jsonl", corpus)
    (out / "synth.json").write_text(json.dumps(dataclasses.asdict(spec), indent=2) + "\n")
    return [out / "vocab.txt", out / "corpus.jsonl", out / "synth.json"]


def cmd_mix(args, out: Path) -> list:
    vocab = find_vocab(args.corpus)
    corpus = read_corpus(args.corpus, vocab)
    pool = corpus[_pool(args.pool, len(corpus))]
    # training mixtures and evaluation sets draw from separate substreams
    rng = substream(args.seed, "eval" if args.balanced or args.offset else "mixing")
    vocab.save(out / "vocab.txt")
    written = [out / "vocab.txt"]
    n = args.n_speakers
    if args.balanced:
        if n != 2:
            raise UsageError("--balanced builds two-talker sets only")
        for off in args.offset or [0.0]:
            samples = balanced_pairs(pool, args.count, rng, seconds_to_frames(off), args.loudness_ratio,
                                     prefix=f"bal{off:g}s-")
            path = out / f"{args.name or 'balanced'}_{off:g}s.jsonl"
            write_manifest(path, samples)
            written.append(path)
    elif args.offset:
        if len(pool) < n * args.count:
            raise DataError(f"pool of {len(pool)} utterances too small for {args.count} x {n} speakers")
        groups = [pool[i * n:(i + 1) * n] for i in range(args.count)]
        conds = build_eval_conditions(groups, args.offset, rng)
        for (k, off), samples in conds.items():
            path = out / f"{args.name or 'test'}_{k}mix_{off:g}s.jsonl"
            write_manifest(path, samples)
            written.append(path)
    else:
        samples = mix_corpus(pool, MixPolicy(num_speakers=n, offset_mode=args.mode), args.count, rng)
        path = out / f"{args.name or 'train'}.jsonl"
        write_manifest(path, samples)
        written.append(path)
    return written


def _config(args) -> ExperimentConfig:
    """Config file values, overridden by explicit flags."""
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    changes = {}
    if not args.seed_default:
        changes["seed"] = args.seed
    for flag, key in (("strategy", "strategy"), ("alpha", "alpha"), ("epochs", "epochs"),
                      ("lr", "learning_rate")):
        val = getattr(args, flag, None)
        if val is not None:
            changes[key] = val
    epochs = changes.get("epochs", cfg.epochs)
    changes["warmup_epochs"] = min(cfg.warmup_epochs, epochs)
    changes["checkpoint_average_last"] = min(cfg.checkpoint_average_last, epochs)
    return cfg.replace(**changes)


def cmd_train(args, out: Path) -> list:
    vocab = find_vocab(args.manifest)
    samples = read_manifest(args.manifest, vocab)
    cfg = _config(args)
    result = train(cfg, samples, vocab, log_path=out / "train_log.jsonl")
    save_checkpoint(out / "model.sotm", result.params)
    cfg.save(out / "config.txt")
    return [out / "model.sotm", out / "train_log.jsonl", out / "config.txt"]


def cmd_eval(args, out: Path) -> list:
    vocab = find_vocab(args.manifest)
    samples = read_manifest(args.manifest, vocab)
    params = load_checkpoint(args.checkpoint)
    hyps = evaluate(params, samples, vocab, args.max_len)
    path = args.output or out / f"{args.manifest.stem}.hyps.txt"
    write_hypotheses(path, hyps)
    n_sc = sum(sum(1 for t in h.ids if t == vocab.sc_id) for _, h in hyps)
    log.info("decoded %d mixtures, %d <sc> tokens", len(hyps), n_sc)
    return [path]


def cmd_score(args, out: Path) -> list:
    vocab = find_vocab(args.manifest)
    samples = read_manifest(args.manifest, vocab, load_features=False)
    hyps = read_hypotheses(args.hyps, vocab)
    report = score_corpus(hyps, {s.id: s.transcripts for s in samples}, vocab,
                          condition=args.condition or args.manifest.stem)
    text = dumps_report(report)
    path = args.output or out / f"{args.manifest.stem}.score.json"
    path.write_text(text, encoding="utf-8")
    print(json.dumps({k: report[k] for k in ("condition", "n_samples", "speaker_blind_wer",
                                             "speaker_aware_wer")}))
    return [path]


def cmd_dominance(args, out: Path) -> list:
    vocab = find_vocab(args.manifest)
    samples = read_manifest(args.manifest, vocab)
    params = load_checkpoint(args.checkpoint)
    path = args.output or out / f"{args.manifest.stem}.dominance.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        for s, scores in zip(samples, encoder_scores(params, samples)):
            fh.write(json.dumps({"id": s.id, "scores": scores, "order": list(dom_order(scores))}) + "\n")
    return [path]


def cmd_analyze(args, out: Path) -> list:
    vocab = find_vocab(args.manifest)
    samples = read_manifest(args.manifest, vocab)
    params = load_checkpoint(args.checkpoint)
    if args.hyps:
        table = read_hypotheses(args.hyps, vocab)
        hyps = [table[s.id] for s in samples]
    else:
        hyps = [h for _, h in evaluate(params, samples, vocab)]
    adherence = adherence_from([h.ids for h in hyps], samples, encoder_scores(params, samples), vocab)
    report = factor_analysis(hyps, samples, vocab, strategy=args.strategy or "",
                             condition=args.manifest.stem)
    payload = {"adherence_rate": adherence.rate, "adherence_used": adherence.n_used,
               "adherence_undecidable": adherence.n_undecidable, **report.to_json()}
    jpath = out / f"{args.manifest.stem}.analysis.json"
    tpath = out / f"{args.manifest.stem}.analysis.txt"
    jpath.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    rate = "n/a" if adherence.rate is None else f"{adherence.rate:.3f}"
    tpath.write_text(f"adherence {rate} over {adherence.n_used} samples\n" + report.render(),
                     encoding="utf-8")
    print(tpath.read_text(encoding="utf-8"), end="")
    return [jpath, tpath]


COMMANDS = {"gen": cmd_gen, "mix": cmd_mix, "train": cmd_train, "eval": cmd_eval,
            "score": cmd_score, "dominance": cmd_dominance, "analyze": cmd_analyze}


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
    except UsageError as exc:
        parser.print_help(sys.stderr)
        print(f"domsot: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.argv = argv
    args.seed_default = args.seed is None
    if args.seed is None:
        args.seed = 0
    if not 0 <= args.seed < 2**64:
        print("domsot: error: --seed must be a 64-bit unsigned integer", file=sys.stderr)
        return EXIT_USAGE
    out = args.out_dir or Path(".")
    try:
        out.mkdir(parents=True, exist_ok=True)
        outputs = COMMANDS[args.command](args, out)
        _provenance(args, out, outputs)
    except UsageError as exc:
        print(f"domsot: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"domsot: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DATA_ERRORS as exc:
        print(f"domsot: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"domsot: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
