"""Word-boundary byte-pair-encoding tokenizer.

Training splits lines into whitespace words, appends an end-of-word marker
symbol to each, and repeatedly merges the most frequent adjacent symbol
pair (ties broken by the lexicographically smallest pair) until the vocab
budget is exhausted or no pair occurs at least twice. Encoding replays the
recorded merges greedily; characters never seen in training become UNK.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .corpus import Corpus

PAD, UNK, BOS, EOS, MASK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("<PAD>", "<UNK>", "<BOS>", "<EOS>", "<MASK>")
WORD_END = "</w>"
MIN_MERGE_FREQ = 2

_MERGES_HEADER_PREFIX = "#version: 1 vocab: "


class TokenizerFormatError(ValueError):
    """Malformed or inconsistent vocab/merges files."""


@dataclass
class TokenizerModel:
    """Frozen result of BPE training: alphabet, ordered merges, id tables."""

    alphabet: set[str]
    merges: list[tuple[str, str]]
    token_to_id: dict[str, int]
    id_to_token: list[str]
    _ranks: dict[tuple[str, str], int] = field(default_factory=dict, repr=False)
    _word_cache: dict[str, tuple[int, ...]] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if not self._ranks:
            self._ranks = {pair: i for i, pair in enumerate(self.merges)}

    @property
    def vocab_size(self) -> int:
        return len(self.id_to_token)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TokenizerModel):
            return NotImplemented
        return (
            self.alphabet == other.alphabet
            and self.merges == other.merges
            and self.token_to_id == other.token_to_id
            and self.id_to_token == other.id_to_token
        )


def _word_frequencies(lines: Iterable[str]) -> Counter:
    freqs: Counter = Counter()
    for line in lines:
        freqs.update(line.split())
    return freqs


def _count_pairs(
    word_syms: dict[str, tuple[str, ...]], word_freqs: Counter
) -> tuple[Counter, dict[tuple[str, str], set[str]]]:
    pair_counts: Counter = Counter()
    pair_words: dict[tuple[str, str], set[str]] = {}
    for word, syms in word_syms.items():
        freq = word_freqs[word]
        for pair in zip(syms, syms[1:]):
            pair_counts[pair] += freq
            pair_words.setdefault(pair, set()).add(word)
    return pair_counts, pair_words


def _merge_word(syms: tuple[str, ...], pair: tuple[str, str], merged: str) -> tuple[str, ...]:
    out: list[str] = []
    i = 0
    while i < len(syms):
        if i + 1 < len(syms) and syms[i] == pair[0] and syms[i + 1] == pair[1]:
            out.append(merged)
            i += 2
        else:
            out.append(syms[i])
            i += 1
    return tuple(out)


def train_bpe(corpus: Corpus | Iterable[str], vocab_size: int) -> TokenizerModel:
    """Learn a BPE vocabulary of at most ``vocab_size`` tokens.

    Deterministic for a fixed corpus: pair counts are exact occurrence
    counts, and equal-frequency ties go to the lexicographically smallest
    pair. Merges stop once every remaining pair occurs fewer than
    ``MIN_MERGE_FREQ`` times.
    """
    lines = corpus.lines if isinstance(corpus, Corpus) else list(corpus)
    word_freqs = _word_frequencies(lines)
    if not word_freqs:
        raise ValueError("cannot train a tokenizer on an empty corpus")

    alphabet = sorted({ch for word in word_freqs for ch in word})
    base_tokens = list(SPECIAL_TOKENS) + alphabet + [WORD_END]
    if vocab_size < len(base_tokens):
        raise ValueError(
            f"vocab_size {vocab_size} is too small: need at least {len(base_tokens)} "
            f"({len(SPECIAL_TOKENS)} specials + {len(alphabet)} alphabet chars + word-end marker)"
        )

    word_syms = {word: tuple(word) + (WORD_END,) for word in word_freqs}
    pair_counts, pair_words = _count_pairs(word_syms, word_freqs)

    tokens = list(base_tokens)
    token_set = set(tokens)
    merges: list[tuple[str, str]] = []
    while len(tokens) < vocab_size and pair_counts:
        best_count = max(pair_counts.values())
        if best_count < MIN_MERGE_FREQ:
            break
        best = min(pair for pair, n in pair_counts.items() if n == best_count)
        merged = best[0] + best[1]
        if merged in token_set:  # guards special-token collisions
            del pair_counts[best]
            pair_words.pop(best, None)
            continue
        merges.append(best)
        tokens.append(merged)
        token_set.add(merged)

        # Incremental recount: only words containing the merged pair change.
        for word in sorted(pair_words.pop(best, ())):
            freq = word_freqs[word]
            old = word_syms[word]
            new = _merge_word(old, best, merged)
            word_syms[word] = new
            for pair in zip(old, old[1:]):
                pair_counts[pair] -= freq
                if pair_counts[pair] <= 0:
                    del pair_counts[pair]
                words = pair_words.get(pair)
                if words is not None:
                    words.discard(word)
                    if not words:
                        del pair_words[pair]
            for pair in zip(new, new[1:]):
                pair_counts[pair] += freq
                pair_words.setdefault(pair, set()).add(word)

    return TokenizerModel(
        alphabet=set(alphabet),
        merges=merges,
        token_to_id={tok: i for i, tok in enumerate(tokens)},
        id_to_token=tokens,
    )


def _encode_word(tok: TokenizerModel, word: str) -> tuple[int, ...]:
    cached = tok._word_cache.get(word)
    if cached is not None:
        return cached
    # Unknown characters become an UNK sentinel that no merge can touch.
    syms: list[str | None] = [ch if ch in tok.alphabet else None for ch in word]
    syms.append(WORD_END)
    while len(syms) > 1:
        best_rank = None
        best_pair = None
        for left, right in zip(syms, syms[1:]):
            if left is None or right is None:
                continue
            rank = tok._ranks.get((left, right))
            if rank is not None and (best_rank is None or rank < best_rank):
                best_rank = rank
                best_pair = (left, right)
        if best_pair is None:
            break
        syms = list(_merge_word(tuple(syms), best_pair, best_pair[0] + best_pair[1]))
    ids = tuple(UNK if s is None else tok.token_to_id[s] for s in syms)
    tok._word_cache[word] = ids
    return ids


def encode(tok: TokenizerModel, text: str, add_bos_eos: bool = False) -> list[int]:
    """Encode normalized text to token ids; never fails (unknowns -> UNK)."""
    ids: list[int] = []
    for word in text.split():
        ids.extend(_encode_word(tok, word))
    if add_bos_eos:
        ids = [BOS] + ids + [EOS]
    return ids


def encode_with_masks(tok: TokenizerModel, text: str) -> list[int]:
    """Encode text in which the literal word ``<MASK>`` marks a masked slot."""
    ids: list[int] = []
    for word in text.split():
        if word == SPECIAL_TOKENS[MASK]:
            ids.append(MASK)
        else:
            ids.extend(_encode_word(tok, word))
    return ids


def decode(tok: TokenizerModel, ids: Iterable[int]) -> str:
    """Invert ``encode``: markers become spaces, PAD/BOS/EOS are stripped.

    MASK and UNK render as their literal ``<MASK>`` / ``<UNK>`` strings so
    masked or lossy positions stay visible.
    """
    pieces: list[str] = []
    for i in ids:
        if not 0 <= i < tok.vocab_size:
            raise ValueError(f"token id {i} out of range (vocab size {tok.vocab_size})")
        if i in (PAD, BOS, EOS):
            continue
        if i in (MASK, UNK):
            pieces.append(tok.id_to_token[i] + " ")
            continue
        pieces.append(tok.id_to_token[i].replace(WORD_END, " "))
    return "".join(pieces).strip()


def save_tokenizer(tok: TokenizerModel, out_dir: str | Path) -> tuple[Path, Path]:
    """Write ``vocab.txt`` (one token per line, line number - 1 = id) and
    ``merges.txt`` (version/vocab header, then one pair per line)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab_path = out_dir / "vocab.txt"
    merges_path = out_dir / "merges.txt"
    vocab_path.write_text("".join(t + "\n" for t in tok.id_to_token), encoding="utf-8")
    merges_path.write_text(
        f"{_MERGES_HEADER_PREFIX}{tok.vocab_size}\n"
        + "".join(f"{a} {b}\n" for a, b in tok.merges),
        encoding="utf-8",
    )
    return vocab_path, merges_path


def load_tokenizer(in_dir: str | Path) -> TokenizerModel:
    """Load a saved tokenizer; ``load(save(t))`` reproduces ``t`` exactly."""
    in_dir = Path(in_dir)
    vocab_path = in_dir / "vocab.txt"
    merges_path = in_dir / "merges.txt"

    vocab_text = vocab_path.read_text(encoding="utf-8")
    tokens = vocab_text.split("\n")
    if tokens and tokens[-1] == "":
        tokens.pop()
    if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
        raise TokenizerFormatError(
            f"{vocab_path}: first {len(SPECIAL_TOKENS)} vocab entries must be the "
            f"special tokens {SPECIAL_TOKENS}"
        )
    token_to_id: dict[str, int] = {}
    for i, token in enumerate(tokens):
        if not token:
            raise TokenizerFormatError(f"{vocab_path}: line {i + 1}: empty token")
        if token in token_to_id:
            raise TokenizerFormatError(f"{vocab_path}: line {i + 1}: duplicate token {token!r}")
        token_to_id[token] = i

    merges_lines = merges_path.read_text(encoding="utf-8").splitlines()
    if not merges_lines or not merges_lines[0].startswith(_MERGES_HEADER_PREFIX):
        raise TokenizerFormatError(
            f"{merges_path}: line 1: expected header {_MERGES_HEADER_PREFIX!r}<count>"
        )
    try:
        declared = int(merges_lines[0][len(_MERGES_HEADER_PREFIX) :])
    except ValueError as exc:
        raise TokenizerFormatError(f"{merges_path}: line 1: bad vocab count") from exc
    if declared != len(tokens):
        raise TokenizerFormatError(
            f"{merges_path}: declared vocab count {declared} does not match "
            f"{len(tokens)} entries in {vocab_path.name}"
        )

    merges: list[tuple[str, str]] = []
    for lineno, line in enumerate(merges_lines[1:], start=2):
        parts = line.split(" ")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise TokenizerFormatError(
                f"{merges_path}: line {lineno}: expected 'left right', got {line!r}"
            )
        pair = (parts[0], parts[1])
        if pair[0] + pair[1] not in token_to_id:
            raise TokenizerFormatError(
                f"{merges_path}: line {lineno}: merge result {pair[0] + pair[1]!r} not in vocab"
            )
        merges.append(pair)

    alphabet = {
        t for t in tokens if len(t) == 1 and t not in SPECIAL_TOKENS and t != WORD_END
    }
    return TokenizerModel(
        alphabet=alphabet,
        merges=merges,
        token_to_id=token_to_id,
        id_to_token=tokens,
    )
