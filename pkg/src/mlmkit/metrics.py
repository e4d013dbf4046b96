"""Evaluation harness: ranking metrics, character error rate, BLEU, and
the comparison-report renderer.

All metric functions are pure and operate on PredictionRecords; one
record is one masked position with the true token and the model's full
ranking (ties broken by ascending token id).
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tokenizer as tk
from .model import Model, forward, rank_tokens
from .training import derive_seed, encode_stream, mask_batch, pack_blocks


@dataclass
class PredictionRecord:
    """One masked position: the truth, the ranked guesses, and decoded text."""

    instance_id: int
    true_id: int
    true_token: str
    topk_ids: list[int]
    topk_probs: list[float]
    rank: int  # 1-based rank of the true token in the full ordering
    true_string: str
    pred_string: str

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if len(set(self.topk_ids)) != len(self.topk_ids):
            raise ValueError("ranked prediction list contains duplicates")


@dataclass
class EvalReport:
    """One comparison-table row: all seven metrics."""

    accuracy: float  # percent
    precision: float
    f1: float
    mrr: float
    cer: float
    hit_at_k: float
    k: int
    bleu: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.accuracy <= 100.0:
            raise ValueError("accuracy is a percentage")
        for name in ("precision", "f1", "mrr", "cer", "hit_at_k", "bleu"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")

    def to_key_values(self) -> dict[str, float]:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "f1": self.f1,
            "mrr": self.mrr,
            "cer": self.cer,
            f"hit_at_{self.k}": self.hit_at_k,
            "bleu": self.bleu,
        }


def _require_records(records: Sequence[PredictionRecord]) -> None:
    if not records:
        raise ValueError("no prediction records")


def accuracy(records: Sequence[PredictionRecord]) -> float:
    """Percent of records whose rank-1 prediction equals the truth."""
    _require_records(records)
    correct = sum(1 for r in records if r.topk_ids[0] == r.true_id)
    return correct / len(records) * 100.0


def precision_recall_f1(records: Sequence[PredictionRecord]) -> tuple[float, float, float]:
    """Macro-averaged precision/recall over token classes, F1 of the two.

    Per class c: TP = #(pred=c and true=c), FP = #(pred=c, true!=c),
    FN = #(true=c, pred!=c). Precision averages over classes that were
    predicted at least once, recall over classes that occur in the truths;
    0/0 classes are skipped entirely.
    """
    _require_records(records)
    tp: Counter = Counter()
    fp: Counter = Counter()
    fn: Counter = Counter()
    for r in records:
        pred = r.topk_ids[0]
        if pred == r.true_id:
            tp[pred] += 1
        else:
            fp[pred] += 1
            fn[r.true_id] += 1
    pred_classes = set(tp) | set(fp)
    true_classes = set(tp) | set(fn)
    precisions = [tp[c] / (tp[c] + fp[c]) for c in pred_classes]
    recalls = [tp[c] / (tp[c] + fn[c]) for c in true_classes]
    precision = sum(precisions) / len(precisions) if precisions else 0.0
    recall = sum(recalls) / len(recalls) if recalls else 0.0
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f1


def mrr(records: Sequence[PredictionRecord]) -> float:
    """Mean reciprocal rank of the true token."""
    _require_records(records)
    return sum(1.0 / r.rank for r in records) / len(records)


def levenshtein(a: str, b: str) -> int:
    """Minimum insert/delete/substitute edits between two strings,
    counted over Unicode scalar values."""
    if len(a) < len(b):
        a, b = b, a
    previous = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        current = [i]
        for j, cb in enumerate(b, start=1):
            cost = 0 if ca == cb else 1
            current.append(min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + cost))
        previous = current
    return previous[len(b)]


def cer(records: Sequence[PredictionRecord]) -> float:
    """Mean edit distance between decoded true/predicted strings,
    normalized by the longer length; a both-empty pair contributes 0."""
    _require_records(records)
    total = 0.0
    for r in records:
        longest = max(len(r.true_string), len(r.pred_string))
        if longest == 0:
            continue
        total += levenshtein(r.true_string, r.pred_string) / longest
    return total / len(records)


def hit_at_k(records: Sequence[PredictionRecord], k: int) -> float:
    """Fraction of records whose true token sits within the top k."""
    _require_records(records)
    if k < 1:
        raise ValueError("k must be >= 1")
    return sum(1 for r in records if r.rank <= k) / len(records)


def _ngram_counts(seq: Sequence[int], n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def bleu(
    candidates: Sequence[Sequence[int]],
    references: Sequence[Sequence[int]],
    max_n: int = 4,
) -> float:
    """Corpus BLEU with uniform 1..4-gram weights and a brevity penalty.

    Clipped n-gram matches are pooled over the corpus; precisions for
    n >= 2 get add-one smoothing ((matches+1)/(total+1)); a zero unigram
    precision stays zero, making the score 0.
    """
    if len(candidates) != len(references):
        raise ValueError("candidate/reference counts differ")
    if not candidates:
        raise ValueError("no candidate/reference pairs")
    matches = [0] * (max_n + 1)
    totals = [0] * (max_n + 1)
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(candidates, references):
        cand = list(cand)
        ref = list(ref)
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            cand_counts = _ngram_counts(cand, n)
            ref_counts = _ngram_counts(ref, n)
            totals[n] += sum(cand_counts.values())
            matches[n] += sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
    if cand_len == 0:
        return 0.0
    if totals[1] == 0 or matches[1] == 0:
        return 0.0
    log_sum = math.log(matches[1] / totals[1])
    for n in range(2, max_n + 1):
        log_sum += math.log((matches[n] + 1) / (totals[n] + 1))
    log_sum /= max_n
    brevity = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return brevity * math.exp(log_sum)


def build_records(
    tok: tk.TokenizerModel,
    truths: Iterable[tuple[int, np.ndarray]],
    k: int,
) -> list[PredictionRecord]:
    """Turn (true id, probability vector) pairs into PredictionRecords."""
    records = []
    for instance_id, (true_id, probs) in enumerate(truths):
        order = rank_tokens(probs)
        rank = int(np.nonzero(order == true_id)[0][0]) + 1
        top = order[:k]
        pred_id = int(top[0])
        records.append(
            PredictionRecord(
                instance_id=instance_id,
                true_id=true_id,
                true_token=tok.id_to_token[true_id],
                topk_ids=[int(i) for i in top],
                topk_probs=[float(probs[i]) for i in top],
                rank=rank,
                true_string=tk.decode(tok, [true_id]),
                pred_string=tk.decode(tok, [pred_id]),
            )
        )
    return records


def evaluate_model(
    model: Model,
    tok: tk.TokenizerModel,
    test_lines: list[str],
    k: int = 10,
    seed: int = 0,
) -> tuple[EvalReport, list[PredictionRecord]]:
    """Mask the test split (fixed eval seed), predict, and score everything.

    BLEU compares each block with its masked slots filled by the top-1
    predictions against the original block (PAD positions excluded).
    """
    if not test_lines:
        raise ValueError("test split is empty")
    if k < 1 or k > tok.vocab_size:
        raise ValueError(f"k must be in [1, {tok.vocab_size}], got {k}")
    if tok.vocab_size > model.config.vocab_size:
        raise ValueError(
            f"tokenizer vocab {tok.vocab_size} exceeds model vocab {model.config.vocab_size}"
        )

    blocks, pads = pack_blocks(encode_stream(tok, test_lines), model.config.context_size)
    batch = mask_batch(
        blocks, model.config.mask_probability, derive_seed(seed, "eval-mask"), pads
    )

    truths: list[tuple[int, np.ndarray]] = []
    candidates: list[list[int]] = []
    references: list[list[int]] = []
    for b in range(blocks.shape[0]):
        # rankings live in the tokenizer's vocabulary; spare embedding rows
        # beyond it are not candidate tokens
        logits = forward(
            model, batch.input_ids[b], pad_mask=batch.pad_mask[b], mode="eval"
        ).data[:, : tok.vocab_size].astype(np.float64)
        filled = batch.input_ids[b].copy()
        for pos, true_id in batch.labels[b]:
            row = logits[pos] - logits[pos].max()
            probs = np.exp(row)
            probs /= probs.sum()
            truths.append((true_id, probs))
            filled[pos] = int(rank_tokens(probs)[0])
        keep = ~batch.pad_mask[b]
        candidates.append([int(i) for i in filled[keep]])
        references.append([int(i) for i in blocks[b][keep]])

    records = build_records(tok, truths, k)
    precision, _, f1 = precision_recall_f1(records)
    report = EvalReport(
        accuracy=accuracy(records),
        precision=precision,
        f1=f1,
        mrr=mrr(records),
        cer=cer(records),
        hit_at_k=hit_at_k(records, k),
        k=k,
        bleu=bleu(candidates, references),
    )
    return report, records


def render_report(reports: dict[str, EvalReport]) -> str:
    """Comparison table: one row per model, the seven metric columns."""
    if not reports:
        raise ValueError("nothing to render")
    k = next(iter(reports.values())).k
    header = (
        f"{'Model':<16} {'Accuracy':>9} {'Precision':>10} {'F1-Score':>9} "
        f"{'MRR':>6} {'CER':>6} {f'Hit@{k}':>7} {'BLEU':>6}"
    )
    lines = [header, "-" * len(header)]
    for name, r in reports.items():
        lines.append(
            f"{name:<16} {r.accuracy:>8.2f}% {r.precision:>10.2f} {r.f1:>9.2f} "
            f"{r.mrr:>6.2f} {r.cer:>6.2f} {r.hit_at_k:>7.2f} {r.bleu:>6.2f}"
        )
    return "\n".join(lines) + "\n"


def write_prediction_dump(records: Sequence[PredictionRecord], path: str | Path) -> Path:
    """One record per line: instance id, true id, rank, then tab-separated
    ``id:probability`` pairs for the top-k predictions."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for r in records:
        pairs = "\t".join(f"{i}:{p:.8f}" for i, p in zip(r.topk_ids, r.topk_probs))
        lines.append(f"{r.instance_id}\t{r.true_id}\t{r.rank}\t{pairs}\n")
    path.write_text("".join(lines), encoding="utf-8")
    return path


def read_prediction_dump(path: str | Path, tok: tk.TokenizerModel) -> list[PredictionRecord]:
    """Parse a dump written by ``write_prediction_dump`` (or by an external
    model following the same format) back into records."""
    records = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        parts = line.split("\t")
        if len(parts) < 4:
            raise ValueError(f"{path}: line {lineno}: expected at least 4 tab-separated fields")
        instance_id, true_id, rank = int(parts[0]), int(parts[1]), int(parts[2])
        topk_ids = []
        topk_probs = []
        for pair in parts[3:]:
            token_id, prob = pair.split(":")
            topk_ids.append(int(token_id))
            topk_probs.append(float(prob))
        pred_id = topk_ids[0]
        records.append(
            PredictionRecord(
                instance_id=instance_id,
                true_id=true_id,
                true_token=tok.id_to_token[true_id],
                topk_ids=topk_ids,
                topk_probs=topk_probs,
                rank=rank,
                true_string=tk.decode(tok, [true_id]),
                pred_string=tk.decode(tok, [pred_id]),
            )
        )
    return records
