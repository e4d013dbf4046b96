"""Command-line pipeline: prep -> tokenize -> train -> eval / fill-mask.

Exit codes: 0 success, 1 user/input error, 2 internal invariant violation.
Every subcommand is deterministic given its inputs and --seed; one run
seed fans out into named sub-seeds (split/init/mask/dropout/eval-mask).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import corpus as cp
from . import metrics as mx
from . import tokenizer as tk
from . import training as tr
from .kvconfig import ConfigError, check_known_keys, coerce, format_kv, load_kv_file
from .model import ModelConfig, config_from_pairs, new_model, predict_topk

MODEL_KEYS = set(ModelConfig._KEY_MAP.values())
TRAIN_KEYS = set(tr.TrainConfig._TYPES)
INFO_KEYS = {"number_of_parameters"}  # derived; accepted and reported, never read

TRAIN_HELP_EPILOG = (
    "config keys (model): " + ", ".join(sorted(MODEL_KEYS | INFO_KEYS)) + "\n"
    "config keys (training): " + ", ".join(sorted(TRAIN_KEYS)) + "\n"
    "number_of_parameters is computed from the model config and written to "
    "the resolved config dump; a value supplied on input is ignored."
)


class UserError(Exception):
    """Bad input or arguments; maps to exit code 1."""


def _write_lines(path: Path, lines: list[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")


def _read_lines(path: Path) -> list[str]:
    if not path.exists():
        raise UserError(f"missing file: {path}")
    text = path.read_text(encoding="utf-8")
    return [cp.normalize_line(l) for l in text.split("\n") if l.strip()]


def _load_pairs(args, allowed: set[str], context: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    if getattr(args, "config", None):
        config_path = Path(args.config)
        if not config_path.exists():
            raise UserError(f"missing config file: {config_path}")
        pairs.update(load_kv_file(config_path))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UserError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        pairs[key.strip()] = value.strip()
    check_known_keys(pairs, allowed, context)
    return pairs


def _parse_inputs(specs: list[str]) -> list[tuple[Path, cp.LanguageTag]]:
    tags = {t.value: t for t in cp.LanguageTag}
    out = []
    for spec in specs:
        if "=" in spec:
            tag_name, path = spec.split("=", 1)
            if tag_name not in tags:
                raise UserError(
                    f"unknown language tag {tag_name!r}; expected one of {sorted(tags)}"
                )
            out.append((Path(path), tags[tag_name]))
        else:
            out.append((Path(spec), cp.LanguageTag.UNKNOWN))
    return out


def cmd_prep(args) -> int:
    pairs = _load_pairs(args, cp.FilterConfig._KEYS, "filter")
    rules = cp.FilterConfig.from_pairs(pairs)
    try:
        ratios = tuple(float(x) for x in args.ratios.split(","))
    except ValueError:
        raise UserError(f"--ratios expects three comma-separated fractions, got {args.ratios!r}")
    if len(ratios) != 3:
        raise UserError(f"--ratios expects three fractions, got {args.ratios!r}")

    docs = []
    replaced_total = 0
    for path, tag in _parse_inputs(args.input):
        if not path.exists():
            raise UserError(f"missing input file: {path}")
        doc, replaced = cp.load_corpus(path, tag)
        docs.append(doc)
        replaced_total += replaced
    corpus, dropped = cp.build_corpus(docs, rules)
    if len(corpus) == 0:
        raise UserError("empty corpus after filtering")
    seed = 0 if args.seed is None else args.seed
    corpus = cp.split_corpus(corpus, ratios, tr.derive_seed(seed, "split"))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split, name in (
        (cp.Split.TRAIN, "train.txt"),
        (cp.Split.VALID, "valid.txt"),
        (cp.Split.TEST, "test.txt"),
    ):
        _write_lines(out / name, corpus.lines_in_split(split))
    stats = cp.corpus_stats(corpus)
    (out / "stats.txt").write_text(stats.render_table(), encoding="utf-8")
    (out / "stats.kv").write_text(format_kv(stats.to_key_values()), encoding="utf-8")
    print(stats.render_table(), end="")
    print(f"kept {len(corpus)} lines, dropped {len(dropped)}, replaced {replaced_total} bad bytes")
    return 0


def cmd_tokenize(args) -> int:
    lines = _read_lines(Path(args.input))
    if not lines:
        raise UserError(f"no usable lines in {args.input}")
    tok = tk.train_bpe(lines, args.vocab_size)
    out = Path(args.out)
    tk.save_tokenizer(tok, out)
    print(f"vocab size: {tok.vocab_size} ({len(tok.merges)} merges)")
    return 0


def _load_tokenizer(tokenizer_dir: str) -> tk.TokenizerModel:
    directory = Path(tokenizer_dir)
    for name in ("vocab.txt", "merges.txt"):
        if not (directory / name).exists():
            raise UserError(f"missing tokenizer file: {directory / name}")
    return tk.load_tokenizer(directory)


def cmd_train(args) -> int:
    tok = _load_tokenizer(args.tokenizer_dir)
    pairs = _load_pairs(args, MODEL_KEYS | TRAIN_KEYS | INFO_KEYS, "train")

    if "vocab_size" in pairs and int(pairs["vocab_size"]) != tok.vocab_size:
        raise UserError(
            f"config vocab_size {pairs['vocab_size']} does not match "
            f"tokenizer vocab size {tok.vocab_size}"
        )
    base = ModelConfig.desk_scale(vocab_size=tok.vocab_size)
    model_cfg = config_from_pairs(pairs, base=base)
    train_pairs = {k: v for k, v in pairs.items() if k in TRAIN_KEYS}
    if args.seed is not None:
        train_pairs["seed"] = str(args.seed)
    train_cfg = tr.TrainConfig.from_pairs(train_pairs)

    corpus_dir = Path(args.corpus_dir)
    train_lines = _read_lines(corpus_dir / "train.txt")
    valid_lines = _read_lines(corpus_dir / "valid.txt")
    corpus = cp.Corpus(
        train_lines + valid_lines,
        [cp.LanguageTag.UNKNOWN] * (len(train_lines) + len(valid_lines)),
        [cp.Split.TRAIN] * len(train_lines) + [cp.Split.VALID] * len(valid_lines),
    )

    model = new_model(model_cfg, tr.derive_seed(train_cfg.seed, "init"))
    print(f"parameters: {model.num_parameters}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = dict(model_cfg.to_pairs())
    resolved["number_of_parameters"] = model.num_parameters
    for key in sorted(TRAIN_KEYS):
        resolved[key] = getattr(train_cfg, key)
    (out / "config.kv").write_text(format_kv(resolved), encoding="utf-8")

    model, log = tr.train(model, tok, corpus, train_cfg, checkpoint_dir=out)
    if train_cfg.max_steps == 0:
        tr.save_checkpoint(model, out / "checkpoint.bin")
    log.write_csv(out)
    final = log.train_losses[-1] if log.train_losses else float("nan")
    print(f"trained {len(log.steps)} steps; final loss {final:.4f}")
    print(f"checkpoint: {out / 'checkpoint.bin'}")
    return 0


def _load_checkpoint(path: str):
    checkpoint = Path(path)
    if not checkpoint.exists():
        raise UserError(f"missing checkpoint: {checkpoint}")
    return tr.load_checkpoint(checkpoint)


def _resolve_k_seed(args, default_k: int) -> tuple[int, int]:
    """Flag > config key > default for the k/seed pair."""
    pairs = _load_pairs(args, {"k", "seed"}, "eval")
    k = args.k if args.k is not None else coerce(pairs.get("k", str(default_k)), int, "k")
    if args.seed is not None:
        seed = args.seed
    else:
        seed = coerce(pairs.get("seed", "0"), int, "seed")
    return k, seed


def cmd_eval(args) -> int:
    tok = _load_tokenizer(args.tokenizer_dir)
    model = _load_checkpoint(args.checkpoint)
    k, seed = _resolve_k_seed(args, default_k=10)
    if k < 1 or k > tok.vocab_size:
        raise UserError(f"k must be in [1, {tok.vocab_size}], got {k}")
    test_lines = _read_lines(Path(args.test))
    if not test_lines:
        raise UserError(f"test file {args.test} has no usable lines")

    report, records = mx.evaluate_model(model, tok, test_lines, k=k, seed=seed)
    table = mx.render_report({Path(args.checkpoint).stem: report})
    print(table, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(table, encoding="utf-8")
        (out / "report.kv").write_text(
            format_kv({k: f"{v:.6f}" for k, v in report.to_key_values().items()}),
            encoding="utf-8",
        )
        mx.write_prediction_dump(records, out / "predictions.tsv")
    return 0


def cmd_fill_mask(args) -> int:
    tok = _load_tokenizer(args.tokenizer_dir)
    model = _load_checkpoint(args.checkpoint)
    k, _ = _resolve_k_seed(args, default_k=5)
    if tk.SPECIAL_TOKENS[tk.MASK] not in args.text.split():
        raise UserError(
            "no <MASK> in input text; write the slot as a standalone word, "
            'e.g. "wíčhaša <MASK> oyáte"'
        )
    result = predict_topk(model, tok, args.text, k)

    lines = []
    for i, mask in enumerate(result.masks, start=1):
        lines.append(f"mask {i} (position {mask.position}):")
        for token, prob, rank in mask.candidates:
            lines.append(f"  {rank}. {token}  p={prob:.4f}")
        lines.append(f"  top-1 perplexity: {mask.perplexity:.4f}")
    lines.append(f"filled: {result.filled_text}")
    lines.append(
        "per-token perplexity: "
        + " ".join(f"{token}({ppl:.2f})" for token, ppl in result.token_perplexities)
    )
    lines.append(f"sequence perplexity: {result.sequence_perplexity:.4f}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "fill_mask.txt").write_text(text, encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mlmkit",
        description="Masked-language-model toolkit: corpus prep, BPE tokenizer, "
        "encoder training, evaluation, and fill-mask queries.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, out_required: bool) -> None:
        p.add_argument("--seed", type=int, default=None,
                       help="run seed; all randomness derives from it (default 0)")
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser(
        "prep",
        help="normalize, filter, and split raw corpus files",
        epilog="config keys (filter): min_chars, min_letter_ratio",
    )
    p.add_argument("--input", action="append", required=True, metavar="[TAG=]PATH",
                   help="raw UTF-8 file, optionally tagged lakota/english/parallel")
    p.add_argument("--ratios", default="0.8,0.1,0.1",
                   help="train,valid,test fractions (must sum to 1)")
    common(p, out_required=True)
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("tokenize", help="train the BPE tokenizer on a corpus file")
    p.add_argument("--input", required=True, help="corpus text file (one sentence per line)")
    p.add_argument("--vocab-size", type=int, default=2000)
    common(p, out_required=True)
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser(
        "train",
        help="train the encoder with masked language modeling",
        epilog=TRAIN_HELP_EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--corpus-dir", required=True, help="directory with train.txt and valid.txt")
    p.add_argument("--tokenizer-dir", required=True, help="directory with vocab.txt and merges.txt")
    common(p, out_required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a test file (seven metrics)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokenizer-dir", required=True)
    p.add_argument("--test", required=True, help="test split text file")
    p.add_argument("--k", type=int, default=None,
                   help="cutoff for hit@k and the prediction dump (default 10)")
    common(p, out_required=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fill-mask", help="rank candidate tokens for <MASK> slots")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokenizer-dir", required=True)
    p.add_argument("--text", required=True, help='input containing "<MASK>" words')
    p.add_argument("--k", type=int, default=None, help="candidates per mask (default 5)")
    common(p, out_required=False)
    p.set_defaults(func=cmd_fill_mask)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses exit code 2 for usage errors
        return 0 if exc.code == 0 else 1
    try:
        return args.func(args)
    except (
        UserError,
        ConfigError,
        tk.TokenizerFormatError,
        tr.CheckpointFormatError,
        ValueError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # internal invariant violation
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
