"""``pgner`` command line: gen, align, train-pg, train-tagger, decode, eval.

Every flag can also be set in an INI file passed with ``--config``; each
subcommand reads the section of the same name, and keys are the flag names
with dashes turned into underscores.  Flags given on the command line win.
Exit status: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import contextlib
import json
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .align import DEFAULT_GRID, align_entities, coverage_curve, select_cutoff, write_coverage_csv
from .corpus import (PARTY_LABELS, ConfigError, Document, EntityLabel, NoiseConfig, generate_corpus, read_jsonl,
                     write_jsonl)
from .decode import DEFAULT_MAX_LEN, DecodePenalties
from .metrics import entity_prf, tolerance_curve, write_curve_csv, write_metrics_json
from .model import PointerGenConfig, TaggerConfig
from .pipeline import (case_number_strings, encode_all, gold_entities, labels_for, pg_decode, source_vocab,
                       tagger_predict, tagger_targets)
from .textproc import CHAR, DEFAULT_CUTOFF, MARKER_LABEL, SPACE, WORD, Vocabulary, linearize_targets, parse_generated
from .train import CheckpointError, TrainConfig, load_checkpoint, save_checkpoint, train_pointer_generator, train_tagger

logger = logging.getLogger("pgner")


class UsageError(Exception):
    """Bad flags, config keys or missing inputs (exit code 2)."""


def _grid(text: str) -> list[int]:
    """``start:stop:step`` (inclusive stop) or a comma list."""
    try:
        if ":" in text:
            a, b, c = (int(x) for x in text.split(":"))
            return list(range(a, b + 1, c))
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}") from None


def _triple(text: str) -> tuple[int, int, int]:
    parts = [int(x) for x in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated integers")
    return tuple(parts)  # type: ignore[return-value]


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="INI file; the section named after the subcommand")
    p.add_argument("--seed", type=int, default=0, help="seed for every random choice")
    p.add_argument("--threads", type=int, default=1, help="worker processes for data-parallel stages")
    p.add_argument("--fast", action="store_true", default=False,
                   help="let BLAS use all cores (training results may then vary run to run)")
    p.add_argument("--verbose", action="store_true", default=False, help="log progress to stderr")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--train", type=Path, required=False, default=None, help="training corpus JSONL")
    p.add_argument("--valid", type=Path, required=False, default=None, help="validation corpus JSONL")
    p.add_argument("--out", type=Path, default=None, help="checkpoint path; the vocabulary goes to <out>.vocab")
    p.add_argument("--log-csv", type=Path, default=None, help="training log (default <out>.log.csv)")
    p.add_argument("--cutoff", type=int, default=None,
                   help=f"source length in units (default {DEFAULT_CUTOFF[WORD]} word / 4000 char)")
    p.add_argument("--vocab-size", type=int, default=2000, help="vocabulary size including specials")
    p.add_argument("--labels", choices=["parties", "casenumber", "all"], default="parties",
                   help="entity labels the model extracts")
    p.add_argument("--embedding-dim", type=int, default=32, help="embedding width")
    p.add_argument("--hidden-dim", type=int, default=64, help="LSTM width per direction")
    p.add_argument("--dropout", type=float, default=0.0, help="dropout probability")
    p.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    p.add_argument("--batch-size", type=int, default=16, help="examples per batch")
    p.add_argument("--max-epochs", type=int, default=30, help="epoch budget")
    p.add_argument("--clip-norm", type=float, default=2.0, help="global gradient-norm clip")
    p.add_argument("--patience", type=int, default=3, help="early-stop after this many non-improving epochs")
    p.add_argument("--precision", type=int, choices=[32, 64], default=32, help="float width")
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to continue from")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="pgner", description="Entity extraction as sequence generation.",
                                     formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"pgner {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("gen", help="generate a synthetic corpus", formatter_class=fmt)
    _common(p)
    p.add_argument("--n-docs", type=int, default=100, help="number of documents")
    p.add_argument("--out", type=Path, default=None, help="output JSONL")
    p.add_argument("--char-sub-prob", type=float, default=0.0, help="per-unit OCR confusion probability")
    p.add_argument("--interleave-prob", type=float, default=0.0, help="caption column interleave probability")
    p.add_argument("--variant-prob", type=float, default=0.0, help="shortened person-name probability")
    p.add_argument("--length-percentiles", type=_triple, default=(80, 300, 1600),
                   help="p5,p50,p95 of document length in tokens")
    p.add_argument("--duplicate-mention-prob", type=float, default=0.3, help="chance a party is named again")
    p.add_argument("--max-tokens", type=int, default=None, help="hard cap on document length")
    p.add_argument("--case-number-prob", type=float, default=1.0, help="chance a document has a case number")

    p = sub.add_parser("align", help="weak BILOU labels and the coverage curve", formatter_class=fmt)
    _common(p)
    p.add_argument("--corpus", type=Path, default=None, help="corpus JSONL")
    p.add_argument("--grid", type=_grid, default=list(DEFAULT_GRID), help="cutoffs, start:stop:step or a,b,c")
    p.add_argument("--slope-threshold", type=float, default=0.005, help="coverage percent per token")
    p.add_argument("--labels", choices=["parties", "casenumber", "all"], default="parties", help="labels to tag")
    p.add_argument("--out", type=Path, default=None, help="aligned JSONL")
    p.add_argument("--coverage-csv", type=Path, default=None, help="coverage curve (default <out>.coverage.csv)")

    p = sub.add_parser("train-pg", help="train the pointer-generator", formatter_class=fmt)
    _common(p)
    _model_flags(p)
    p.add_argument("--mode", choices=["word", "char"], default="word", help="unit type")
    p.add_argument("--encoder-layers", type=int, default=1, help="BiLSTM encoder depth")
    p.add_argument("--decoder-layers", type=int, default=1, help="decoder LSTM depth")
    p.add_argument("--copy", action=argparse.BooleanOptionalAction, default=True,
                   help="enable the copy gate (always off in char mode)")

    p = sub.add_parser("train-tagger", help="train the BiLSTM tagger", formatter_class=fmt)
    _common(p)
    _model_flags(p)
    p.add_argument("--layers", type=int, default=1, help="BiLSTM depth")

    p = sub.add_parser("decode", help="predict entities for a corpus", formatter_class=fmt)
    _common(p)
    p.add_argument("--checkpoint", type=Path, default=None, help="trained checkpoint")
    p.add_argument("--corpus", type=Path, default=None, help="corpus JSONL")
    p.add_argument("--out", type=Path, default=None, help="predictions JSONL")
    p.add_argument("--beam-size", type=int, default=10, help="beam width")
    p.add_argument("--alpha", type=float, default=0.9, help="length-normalization exponent")
    p.add_argument("--beta", type=float, default=5.0, help="coverage-penalty weight")
    p.add_argument("--max-len", type=int, default=None, help="max generated units (default 64 word / 32 char)")
    p.add_argument("--block-bigrams", action=argparse.BooleanOptionalAction, default=True,
                   help="forbid repeating a bigram within a hypothesis")
    p.add_argument("--exempt-markers", action="store_true", default=False,
                   help="do not block bigrams that contain a label marker")

    p = sub.add_parser("eval", help="score predictions against gold", formatter_class=fmt)
    _common(p)
    p.add_argument("--predictions", type=Path, default=None, help="predictions JSONL")
    p.add_argument("--gold", type=Path, default=None, help="gold corpus JSONL")
    p.add_argument("--mode", choices=["parties", "casenumber"], default="parties", help="what to score")
    p.add_argument("--out", type=Path, default=None, help="metrics JSON")
    p.add_argument("--curve-csv", type=Path, default=None, help="tolerance curve (casenumber mode)")
    p.add_argument("--k-max", type=int, default=5, help="largest Levenshtein tolerance")
    p.add_argument("--units", choices=["auto", "word", "char"], default="auto",
                   help="unit type of the predictions; auto looks for char-mode separators")
    return parser


# ------------------------------------------------------------------ config


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _config_value(action: argparse.Action, raw: str):
    if isinstance(action, (argparse._StoreTrueAction, argparse.BooleanOptionalAction)):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{action.dest}: expected a boolean, got {raw!r}")
    if raw.strip() == "" and action.default is None:
        return None
    try:
        value = action.type(raw) if action.type else raw
    except (ValueError, argparse.ArgumentTypeError) as exc:
        raise UsageError(f"{action.dest}: {exc}") from None
    if action.choices is not None and value not in action.choices:
        raise UsageError(f"{action.dest}: {value!r} not in {list(action.choices)}")
    return value


def apply_config(sub: argparse.ArgumentParser, command: str, path: Path) -> None:
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise UsageError(f"cannot parse {path}: {exc}") from None
    unknown_sections = set(cp.sections()) - set(_COMMANDS)
    if unknown_sections:
        raise UsageError(f"unknown config sections: {sorted(unknown_sections)}")
    if not cp.has_section(command):
        return
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, raw in cp.items(command):
        key = key.replace("-", "_")  # accept the flag spelling as well as the dest
        if key not in actions:
            raise UsageError(f"unknown key {key!r} in [{command}]")
        defaults[key] = _config_value(actions[key], raw)
    sub.set_defaults(**defaults)


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is not None:
        sub = _subparser(parser, args.command)
        apply_config(sub, args.command, args.config)
        args = parser.parse_args(argv)
    return args


def _need(args, *names) -> None:
    missing = [n for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError("missing required setting(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _existing(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _load_vocab(path: Path) -> Vocabulary:
    try:
        return Vocabulary.load(_existing(path, "checkpoint vocabulary"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise UsageError(f"{path}: {exc}") from None


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    _need(args, "out")
    cfg = NoiseConfig(char_sub_prob=args.char_sub_prob, interleave_prob=args.interleave_prob,
                      variant_prob=args.variant_prob, length_percentiles=tuple(args.length_percentiles),
                      duplicate_mention_prob=args.duplicate_mention_prob, rng_seed=args.seed,
                      max_tokens=args.max_tokens, case_number_prob=args.case_number_prob)
    try:
        cfg.validate()
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    if args.n_docs < 1:
        raise UsageError("n_docs must be >= 1")
    write_jsonl(args.out, generate_corpus(cfg, args.n_docs, threads=args.threads))
    return 0


def cmd_align(args) -> int:
    _need(args, "corpus", "out")
    docs = read_jsonl(_existing(args.corpus, "corpus"))
    labels = labels_for(args.labels)
    try:
        curve = coverage_curve(docs, args.grid, labels)
        cutoff = select_cutoff(curve, args.slope_threshold)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        for d in docs:
            fh.write(align_entities(d, labels).to_json() + "\n")
    write_coverage_csv(args.coverage_csv or Path(str(args.out) + ".coverage.csv"), curve)
    print(cutoff)
    return 0


def _train_common(args, mode: str):
    _need(args, "train", "valid", "out")
    train_docs = read_jsonl(_existing(args.train, "training corpus"))
    valid_docs = read_jsonl(_existing(args.valid, "validation corpus"))
    if not train_docs or not valid_docs:
        raise UsageError("training and validation corpora must be non-empty")
    cutoff = args.cutoff or DEFAULT_CUTOFF[mode]
    labels = labels_for(args.labels)
    init = None
    vocab_path = Path(str(args.out) + ".vocab")
    if args.resume is not None:
        _existing(args.resume, "checkpoint")
        vocab = _load_vocab(Path(str(args.resume) + ".vocab"))
        init = load_checkpoint(args.resume, vocab.hash())
    else:
        vocab = source_vocab(train_docs, cutoff, mode, args.vocab_size)
    tcfg = TrainConfig(learning_rate=args.lr, batch_size=args.batch_size, max_epochs=args.max_epochs,
                       clip_norm=args.clip_norm, patience=args.patience, seed=args.seed, precision=args.precision)
    try:
        tcfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    meta = {"cutoff": cutoff, "labels": args.labels, "mode": mode}
    return train_docs, valid_docs, cutoff, labels, vocab, vocab_path, init, tcfg, meta


def cmd_train_pg(args) -> int:
    train_docs, valid_docs, cutoff, labels, vocab, vocab_path, init, tcfg, meta = _train_common(args, args.mode)
    mcfg = PointerGenConfig(vocab.size, embedding_dim=args.embedding_dim, hidden_dim=args.hidden_dim,
                            encoder_layers=args.encoder_layers, decoder_layers=args.decoder_layers,
                            mode=args.mode, copy_enabled=args.copy, dropout_prob=args.dropout)
    ckpt = train_pointer_generator(encode_all(train_docs, vocab, cutoff, args.mode, labels),
                                   encode_all(valid_docs, vocab, cutoff, args.mode, labels), mcfg, tcfg,
                                   vocab.hash(), init=init,
                                   log_path=args.log_csv or Path(str(args.out) + ".log.csv"), extra_meta=meta)
    save_checkpoint(args.out, ckpt)
    vocab.save(vocab_path)
    return 0


def cmd_train_tagger(args) -> int:
    train_docs, valid_docs, cutoff, labels, vocab, vocab_path, init, tcfg, meta = _train_common(args, WORD)
    if EntityLabel.CASENUMBER in labels:
        raise UsageError("the tagger only labels parties")
    mcfg = TaggerConfig(vocab.size, embedding_dim=args.embedding_dim, hidden_dim=args.hidden_dim,
                        layers=args.layers, dropout_prob=args.dropout)
    ckpt = train_tagger(encode_all(train_docs, vocab, cutoff), tagger_targets(train_docs, cutoff, labels),
                        encode_all(valid_docs, vocab, cutoff), tagger_targets(valid_docs, cutoff, labels),
                        mcfg, tcfg, vocab.hash(), init=init,
                        log_path=args.log_csv or Path(str(args.out) + ".log.csv"), extra_meta=meta)
    save_checkpoint(args.out, ckpt)
    vocab.save(vocab_path)
    return 0


def cmd_decode(args) -> int:
    _need(args, "checkpoint", "corpus", "out")
    _existing(args.checkpoint, "checkpoint")
    vocab = _load_vocab(Path(str(args.checkpoint) + ".vocab"))
    try:
        ckpt = load_checkpoint(args.checkpoint, vocab.hash())
    except CheckpointError as exc:
        raise UsageError(str(exc)) from None
    docs = read_jsonl(_existing(args.corpus, "corpus"))
    mode = ckpt.meta.get("mode", WORD)
    cutoff = int(ckpt.meta.get("cutoff", DEFAULT_CUTOFF[mode]))
    labels = labels_for(ckpt.meta.get("labels", "parties"))
    model = ckpt.build_model()
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        if ckpt.kind == "tagger":
            pred = tagger_predict(model, docs, vocab, cutoff)
            for d in docs:
                toks = linearize_targets(pred[d.id], WORD, labels, dedupe=True)
                fh.write(json.dumps({"id": d.id, "generated_tokens": toks, "score": 0.0, "copy_fraction": 0.0},
                                    ensure_ascii=False) + "\n")
            return 0
        pen = DecodePenalties(alpha=args.alpha, beta=args.beta, beam_size=args.beam_size,
                              max_len=args.max_len or DEFAULT_MAX_LEN[mode],
                              block_repeat_bigrams=args.block_bigrams, exempt_markers=args.exempt_markers)
        for dec in pg_decode(model, docs, vocab, cutoff, pen, labels, threads=args.threads):
            fh.write(dec.to_json() + "\n")
    return 0


def _read_predictions(path: Path) -> dict[str, list[str]]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out[str(obj["id"])] = list(obj["generated_tokens"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise UsageError(f"{path}:{n}: bad prediction record ({exc})") from None
    return out


def _units_of(tokens: list[str], units: str) -> str:
    if units != "auto":
        return units
    # char output uses "<sp>" between words; single-token char output is all one-character units
    body = [t for t in tokens if t not in MARKER_LABEL]
    if SPACE in body or (len(body) > 1 and all(len(t) == 1 for t in body)):
        return CHAR
    return WORD


def cmd_eval(args) -> int:
    _need(args, "predictions", "gold", "out")
    raw = _read_predictions(_existing(args.predictions, "predictions"))
    docs: list[Document] = read_jsonl(_existing(args.gold, "gold corpus"))
    gold_ids = {d.id for d in docs}
    extra = sorted(set(raw) - gold_ids)
    if extra:
        raise UsageError(f"predictions for unknown documents, e.g. {extra[:3]}")
    pred = {}
    for d in docs:
        toks = raw.get(d.id, [])
        pred[d.id] = parse_generated(toks, _units_of(toks, args.units))
    if args.mode == "parties":
        # case numbers in the predictions (labels=all models) are not party names
        pred = {k: [e for e in v if e.label in PARTY_LABELS] for k, v in pred.items()}
        m = entity_prf(pred, gold_entities(docs))
        write_metrics_json(args.out, {"mode": "parties", "documents": len(docs), **m.to_dict()})
        return 0
    preds, truths = case_number_strings(pred, docs)
    curve = tolerance_curve(preds, truths, args.k_max)
    write_metrics_json(args.out, {"mode": "casenumber", "documents": len(truths),
                                  "accuracy": dict(zip(map(str, curve.tolerances), curve.accuracy))})
    write_curve_csv(args.curve_csv or Path(str(args.out) + ".tolerance.csv"), ("tolerance", "accuracy"),
                    curve.tolerances, curve.accuracy)
    return 0


_COMMANDS = {"gen": cmd_gen, "align": cmd_align, "train-pg": cmd_train_pg, "train-tagger": cmd_train_tagger,
             "decode": cmd_decode, "eval": cmd_eval}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"pgner: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if getattr(args, "threads", 1) < 1:
        print("pgner: error: --threads must be >= 1", file=sys.stderr)
        return 2
    limits = contextlib.nullcontext() if args.fast else threadpool_limits(limits=1)
    try:
        with limits:
            return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"pgner: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, CheckpointError) as exc:
        print(f"pgner: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and fail
        logger.debug("failure", exc_info=True)
        print(f"pgner: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
