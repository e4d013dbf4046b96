"""Walk through corpus ingestion: normalize, filter OCR junk, split, count.

Run: python3 demos/demo_corpus_prep.py
"""

import tempfile
from pathlib import Path

from mlmkit.corpus import (
    FilterConfig,
    LanguageTag,
    Split,
    build_corpus,
    corpus_stats,
    load_corpus,
    normalize_line,
    split_corpus,
)

# A messy raw file: inconsistent whitespace, decomposed accents, OCR junk.
RAW = """\
  Ehánni   hékta waníyetu   óta
wičháša kiŋ yá yeló
@@##%%1234
x
šúŋka kiŋ tȟáŋka héčha
"""

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "lakota_raw.txt"
    path.write_bytes(RAW.encode("utf-8") + b"oy\xffte\n")  # plus one bad byte

    doc, replaced = load_corpus(path, LanguageTag.LAKOTA)
    print(f"loaded {len(doc.lines)} raw lines, {replaced} invalid byte(s) replaced")

    # Normalization collapses whitespace and precomposes accents (NFC),
    # so the decomposed "wičháša" above becomes identical to the usual form.
    print("\nnormalized:")
    for line in doc.lines:
        print(f"  {normalize_line(line)!r}")

    corpus, dropped = build_corpus([doc], FilterConfig(min_letter_ratio=0.5, min_chars=2))
    print("\ndropped by the junk filter:")
    for line, reason in dropped:
        print(f"  {line!r:24} -> {reason}")

    corpus = split_corpus(corpus, (0.8, 0.1, 0.1), seed=7)
    print("\nsplit assignment (seeded, deterministic):")
    for line, split in zip(corpus.lines, corpus.split):
        print(f"  {split.value:7} {line}")

    stats = corpus_stats(corpus)
    print("\nword-count report:")
    print(stats.render_table())
    print("machine-readable dump:", stats.to_key_values())
