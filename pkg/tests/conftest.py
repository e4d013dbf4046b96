"""Shared fixtures: a small synthetic corpus in a Lakota-like orthography.

The toy generator composes templated sentences from a fixed word bank so
that held-out lines share vocabulary and structure with the training
lines; a small model can memorize the train split and still rank tokens
sensibly on the test split.
"""

from __future__ import annotations

import numpy as np
import pytest

from mlmkit.corpus import Corpus, LanguageTag, Split

SUBJECTS = ["wičháša", "wíŋyaŋ", "hokšíla", "oyáte", "šúŋka", "čhaŋté", "makȟá", "wakȟáŋ"]
ARTICLE = "kiŋ"  # fixed second word, like a real corpus's dominant function word
MODIFIERS = ["waŋ", "óta", "tȟáŋka", "čík'ala", "wašté", "šíča", "ehánni", "waŋží"]
VERBS = ["yá", "hí", "kte", "uŋspé", "wačhíŋ", "káǧa", "ománi", "wóglaka"]
TAILS = ["yeló", "kštó", "héčha", "škhé", "s'a", "kta", "šni", "na"]


def _zipf_weights(n: int) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1)
    return w / w.sum()


def _pick(rng, bank) -> str:
    """Zipf-weighted draw: corpora are head-heavy, and the skew gives a
    trained model marginal statistics that transfer to held-out lines."""
    return bank[rng.choice(len(bank), p=_zipf_weights(len(bank)))]


def _template_line(rng) -> str:
    # the tail particle is a deterministic function of the verb: a rule a
    # small model can learn exactly and apply to held-out lines
    verb_idx = int(rng.choice(len(VERBS), p=_zipf_weights(len(VERBS))))
    words = [_pick(rng, SUBJECTS), ARTICLE, VERBS[verb_idx], TAILS[verb_idx]]
    if rng.random() < 0.5:
        words.insert(2, _pick(rng, MODIFIERS))
    return " ".join(words)


def toy_lines(n_lines: int, seed: int) -> list[str]:
    rng = np.random.default_rng(seed)
    return [_template_line(rng) for _ in range(n_lines)]


def toy_corpus(
    n_train: int = 64, n_valid: int = 8, n_test: int = 16, seed: int = 5
) -> Corpus:
    lines = toy_lines(n_train + n_valid + n_test, seed)
    split = (
        [Split.TRAIN] * n_train + [Split.VALID] * n_valid + [Split.TEST] * n_test
    )
    return Corpus(lines, [LanguageTag.LAKOTA] * len(lines), split)


@pytest.fixture(scope="session")
def small_corpus() -> Corpus:
    return toy_corpus()
