"""polyseq command line: tokenize, pretrain, advtrain, sample, bleu, toygen, stats."""

from __future__ import annotations

import argparse
import contextlib
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import neural_core as nc
from . import toygen
from .adv_trainer import DivergenceDetected
from .config import ConfigError, RunConfig, defaults_text, load_config, replace
from .evaluation import EmptyCorpus, bleu4, corpus_stats
from .generator import GeneratorError, StartMode
from .midi_codec import MidiError, read_midi, write_midi
from .tokenizer import (DEFAULT_MIN_COUNT, START_ID, TokenizerError, Vocabulary, build_vocab, load_corpus,
                        save_corpus, tokenize_piece, words_to_streams)
from .training import DataError, load_generator, run_adversarial, run_pretrain, windows

OUTPUT_TPQ = 480
MIDI_SUFFIXES = (".mid", ".midi")

# errors that mean "bad input", reported with exit status 1
INPUT_ERRORS = (ConfigError, DataError, MidiError, TokenizerError, nc.CheckpointError, GeneratorError,
                EmptyCorpus, OSError)


def err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _midi_files(root: Path) -> list[Path]:
    return sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in MIDI_SUFFIXES)


def cmd_tokenize(args) -> int:
    root = Path(args.midi_dir)
    if not root.is_dir():
        err(f"error: {root} is not a directory")
        return 1
    files = _midi_files(root)
    if not files:
        err(f"error: no .mid files under {root}")
        return 1
    classify = {}
    if args.melody_track is not None:
        classify["melody_track"] = args.melody_track
    if args.chord_track is not None:
        classify["chord_track"] = args.chord_track
    if args.channel_split is not None:
        classify["channel_split"] = tuple(args.channel_split)

    pieces, names, failed = [], [], 0
    for path in files:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            try:
                words = tokenize_piece(read_midi(path), **classify)
            except (MidiError, TokenizerError, OSError) as exc:
                failed += 1
                err(f"warning: skipping {path}: {exc}")
                if args.strict:
                    err("error: aborting (--strict)")
                    return 1
                continue
        for w in caught:
            err(f"warning: {path}: {w.message}")
        pieces.append(words)
        names.append(path)
    if not pieces:
        err("error: no file could be tokenized")
        return 1
    try:
        vocab, kept = build_vocab(pieces, args.min_count)
    except TokenizerError as exc:
        err(f"error: {exc}")
        return 1
    corpus = [vocab.encode(pieces[i]) for i in kept]
    vocab.save(args.vocab)
    save_corpus(args.corpus, corpus)
    print(f"files: {len(files)} read, {failed} skipped")
    print(f"pieces: {len(kept)} kept, {len(pieces) - len(kept)} excluded (rare words)")
    print(f"vocabulary size: {len(vocab)}")
    print(f"tokens: {sum(len(p) for p in corpus)}")
    return 0


def _print_config(cfg: RunConfig) -> None:
    defaults = RunConfig()
    err("# effective configuration (* = default)")
    for line, dline in zip(cfg.dumps().splitlines(), defaults.dumps().splitlines()):
        err(f"#  {line}{'  *' if line == dline else ''}")


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config)
    cfg = replace(cfg, seed=args.seed, loss=args.loss, mode=args.mode)
    _print_config(cfg)
    return cfg


def cmd_pretrain(args) -> int:
    cfg = _run_config(args)
    path = run_pretrain(cfg, resume=args.resume)
    print(f"checkpoint: {path}")
    return 0


def cmd_advtrain(args) -> int:
    cfg = _run_config(args)
    try:
        path = run_adversarial(cfg, resume=args.resume)
    except DivergenceDetected as exc:
        err(f"error: divergence detected: {exc}")
        err(f"last good checkpoint: {getattr(exc, 'last_checkpoint', 'none')}")
        return 2
    print(f"checkpoint: {path}")
    return 0


def cmd_sample(args) -> int:
    meta, gen = load_generator(args.checkpoint)
    vocab = Vocabulary.load(args.vocab)
    if len(vocab) != gen.config.vocab_size:
        err(f"error: checkpoint vocabulary size {gen.config.vocab_size} does not match "
            f"vocabulary file size {len(vocab)}")
        return 1
    if args.mode is not None:
        gen.mode = StartMode(args.mode)
    pool = None
    if gen.mode is StartMode.CONDITIONAL:
        if not args.corpus:
            err("error: conditional sampling needs --corpus for start tokens")
            return 1
        pool = np.array([[p[0]] for p in load_corpus(args.corpus) if p], dtype=np.int64)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples = gen.sample(args.n, seed=args.seed, start_pool=pool)
    save_corpus(out / "samples.txt", samples.tolist())
    for i, row in enumerate(samples):
        # a sampled start token carries no content
        words = vocab.decode([int(t) for t in row if t != START_ID])
        melody, chords = words_to_streams(words, OUTPUT_TPQ)
        write_midi(out / f"sample_{i:04d}.mid", melody, chords, OUTPUT_TPQ)
    print(f"wrote {args.n} MIDI files and samples.txt to {out}")
    return 0


def cmd_bleu(args) -> int:
    refs = load_corpus(args.reference)
    if args.checkpoint:
        _, gen = load_generator(args.checkpoint)
        if args.mode is not None:
            gen.mode = StartMode(args.mode)
        window = args.window or gen.config.seq_len
        refs = windows(refs, window).tolist()
        cands = gen.sample(args.n, seed=args.seed, start_pool=np.asarray(refs) if refs else None)
    else:
        cands = load_corpus(args.tokens)
        if args.window:
            refs = windows(refs, args.window).tolist()
    report = bleu4(cands, refs)
    print(report.summary())
    print(report.tsv())
    return 0


def cmd_toygen(args) -> int:
    seq_len = args.seq_len or {"markov": 20, "chords": 40, "motif": 16}[args.grammar]
    data = toygen.generate(args.grammar, args.n, seq_len, args.seed)
    save_corpus(args.out, data.tolist())
    print(f"grammar {args.grammar}: {args.n} pieces of {seq_len} tokens, vocab size {toygen.vocab_size(args.grammar)}")
    print(f"entropy rate {toygen.entropy_rate(args.grammar):.6f} nats/token; "
          f"optimal NLL at this length {toygen.optimal_nll(args.grammar, seq_len):.6f}")
    return 0


def cmd_stats(args) -> int:
    corpus = load_corpus(args.corpus)
    vocab = Vocabulary.load(args.vocab) if args.vocab else None
    stats = corpus_stats(corpus, vocab, args.top)
    print(f"pieces {stats.pieces}  tokens {stats.tokens}  vocab size {stats.vocab_size}")
    for token, count in stats.top_words:
        print(f"  token {token}: {count}")
    for bucket, names in stats.chord_histogram.items():
        print(f"{bucket}\t{' '.join(names)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polyseq", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tokenize", help="MIDI directory -> vocabulary + encoded corpus")
    p.add_argument("midi_dir")
    p.add_argument("--corpus", required=True, help="output token file")
    p.add_argument("--vocab", required=True, help="output vocabulary file")
    p.add_argument("--min-count", type=int, default=DEFAULT_MIN_COUNT)
    p.add_argument("--strict", action="store_true", help="abort on the first unreadable file")
    p.add_argument("--melody-track", type=int)
    p.add_argument("--chord-track", type=int)
    p.add_argument("--channel-split", type=int, nargs=2, metavar=("MELODY_CH", "CHORD_CH"))
    p.set_defaults(func=cmd_tokenize)

    for name, func, what in (("pretrain", cmd_pretrain, "NLL pretraining"),
                             ("advtrain", cmd_advtrain, "adversarial training")):
        p = sub.add_parser(name, help=what)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--loss", choices=("ce", "ls"))
        p.add_argument("--mode", choices=("uncond", "cond"))
        p.add_argument("--resume", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("sample", help="generate sequences and MIDI files")
    p.add_argument("checkpoint")
    p.add_argument("--vocab", required=True)
    p.add_argument("-n", type=int, default=8)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=("uncond", "cond"))
    p.add_argument("--corpus", help="real corpus supplying start tokens in cond mode")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("bleu", help="corpus BLEU-4 against a validation token file")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--tokens")
    p.add_argument("--reference", required=True)
    p.add_argument("-n", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=("uncond", "cond"))
    p.add_argument("--window", type=int, default=0, help="cut references into windows of this length")
    p.set_defaults(func=cmd_bleu)

    p = sub.add_parser("toygen", help="synthetic corpus with known entropy")
    p.add_argument("grammar", choices=toygen.GRAMMARS)
    p.add_argument("-n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_toygen)

    p = sub.add_parser("stats", help="token and chord-set statistics")
    p.add_argument("corpus")
    p.add_argument("--vocab")
    p.add_argument("--top", type=int, default=10)
    p.set_defaults(func=cmd_stats)

    sub.add_parser("defaults", help="print the default configuration").set_defaults(
        func=lambda args: print(defaults_text(), end="") or 0)
    return parser


def _thread_limit():
    value = os.environ.get("POLYSEQ_THREADS")
    if not value:
        return contextlib.nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        err("warning: POLYSEQ_THREADS set but threadpoolctl is not installed")
        return contextlib.nullcontext()
    return threadpool_limits(int(value))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    with _thread_limit():
        try:
            return args.func(args)
        except INPUT_ERRORS as exc:
            err(f"error: {exc}")
            return 1


if __name__ == "__main__":
    sys.exit(main())
