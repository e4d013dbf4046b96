import math
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlmkit.metrics import (
    EvalReport,
    PredictionRecord,
    accuracy,
    bleu,
    cer,
    evaluate_model,
    hit_at_k,
    levenshtein,
    mrr,
    precision_recall_f1,
    read_prediction_dump,
    render_report,
    write_prediction_dump,
)
from mlmkit.model import ModelConfig, new_model
from mlmkit.tokenizer import train_bpe
from mlmkit.corpus import Split
from tests.conftest import toy_corpus

# ---------------------------------------------------------------------------
# Independent brute-force oracles. These share no code with the library:
# the edit-distance oracle is top-down recursion (library is bottom-up
# rows), BLEU re-counts n-grams from scratch, and the classification
# oracle walks explicit contingency dicts.
# ---------------------------------------------------------------------------


def oracle_accuracy(preds, truths):
    hits = 0
    for p, t in zip(preds, truths):
        if p == t:
            hits += 1
    return hits * 100.0 / len(truths)


def oracle_macro_prf(preds, truths):
    classes = set(preds) | set(truths)
    per_class = {}
    for c in classes:
        tp = sum(1 for p, t in zip(preds, truths) if p == c and t == c)
        fp = sum(1 for p, t in zip(preds, truths) if p == c and t != c)
        fn = sum(1 for p, t in zip(preds, truths) if t == c and p != c)
        per_class[c] = (tp, fp, fn)
    ps = [tp / (tp + fp) for tp, fp, _ in per_class.values() if tp + fp > 0]
    rs = [tp / (tp + fn) for tp, _, fn in per_class.values() if tp + fn > 0]
    p = sum(ps) / len(ps) if ps else 0.0
    r = sum(rs) / len(rs) if rs else 0.0
    f1 = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return p, r, f1


def oracle_mrr(ranks):
    total = 0.0
    for rank in ranks:
        total += 1.0 / rank
    return total / len(ranks)


def oracle_levenshtein(a, b):
    @lru_cache(maxsize=None)
    def dist(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        sub = dist(i - 1, j - 1) + (0 if a[i - 1] == b[j - 1] else 1)
        return min(dist(i - 1, j) + 1, dist(i, j - 1) + 1, sub)

    return dist(len(a), len(b))


def oracle_cer(pairs):
    total = 0.0
    for true, pred in pairs:
        longest = max(len(true), len(pred))
        if longest:
            total += oracle_levenshtein(true, pred) / longest
    return total / len(pairs)


def oracle_hit_at_k(ranks, k):
    return sum(1 for r in ranks if r <= k) / len(ranks)


def oracle_bleu(candidates, references):
    def grams(seq, n):
        out = {}
        for i in range(len(seq) - n + 1):
            g = tuple(seq[i : i + n])
            out[g] = out.get(g, 0) + 1
        return out

    match = {n: 0 for n in range(1, 5)}
    total = {n: 0 for n in range(1, 5)}
    c_len = sum(len(c) for c in candidates)
    r_len = sum(len(r) for r in references)
    for cand, ref in zip(candidates, references):
        for n in range(1, 5):
            cg = grams(cand, n)
            rg = grams(ref, n)
            total[n] += sum(cg.values())
            for g, count in cg.items():
                match[n] += min(count, rg.get(g, 0))
    if c_len == 0 or match[1] == 0:
        return 0.0
    precisions = [match[1] / total[1]] + [
        (match[n] + 1) / (total[n] + 1) for n in range(2, 5)
    ]
    geo = math.exp(sum(math.log(p) for p in precisions) / 4)
    bp = 1.0 if c_len > r_len else math.exp(1 - r_len / c_len)
    return bp * geo


def make_records(preds, truths, ranks=None, vocab=50):
    """Records where rank-1 prediction and full rank are set explicitly."""
    records = []
    for i, (p, t) in enumerate(zip(preds, truths)):
        rank = ranks[i] if ranks else (1 if p == t else 2)
        rest = [x for x in range(vocab) if x != p][:4]
        records.append(
            PredictionRecord(
                instance_id=i,
                true_id=t,
                true_token=f"tok{t}",
                topk_ids=[p] + rest,
                topk_probs=[0.5, 0.2, 0.15, 0.1, 0.05],
                rank=rank,
                true_string=f"tok{t}",
                pred_string=f"tok{p}",
            )
        )
    return records


class TestAccuracy:
    def test_two_of_three(self):
        records = make_records([1, 2, 3], [1, 2, 4])
        assert accuracy(records) == pytest.approx(66.6667, abs=1e-3)

    def test_all_correct(self):
        assert accuracy(make_records([1, 2], [1, 2])) == 100.0

    def test_headline_format_arithmetic(self):
        preds = [1] * 5148 + [2] * 4852
        truths = [1] * 5148 + [3] * 4852
        assert accuracy(make_records(preds, truths)) == pytest.approx(51.48)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            accuracy([])


class TestPrecisionRecallF1:
    def test_hand_worked_contingency(self):
        # truths [a,a,b], preds [a,b,b]:
        # class a: P=1, R=0.5; class b: P=0.5, R=1 -> macro 0.75/0.75, F1 0.75
        records = make_records([10, 11, 11], [10, 10, 11])
        p, r, f1 = precision_recall_f1(records)
        assert (p, r, f1) == (0.75, 0.75, 0.75)

    def test_perfect_predictions(self):
        p, r, f1 = precision_recall_f1(make_records([1, 2, 3], [1, 2, 3]))
        assert (p, r, f1) == (1.0, 1.0, 1.0)

    def test_single_wrong_class_everywhere(self):
        # all predictions land on a class never in the truths
        p, r, f1 = precision_recall_f1(make_records([9, 9, 9], [1, 2, 3]))
        assert p == 0.0 and r == 0.0 and f1 == 0.0


class TestMrr:
    def test_direct_average(self):
        records = make_records([1, 2, 3], [1, 2, 3], ranks=[1, 2, 4])
        assert mrr(records) == pytest.approx((1 + 0.5 + 0.25) / 3)

    def test_all_rank_one(self):
        assert mrr(make_records([1, 2], [1, 2], ranks=[1, 1])) == 1.0

    def test_rank_one_mass_bounds(self):
        # rank-1 records contribute exactly 1; everything else is in (0, 1/2]
        rng = np.random.default_rng(5)
        for _ in range(20):
            n = int(rng.integers(1, 60))
            ranks = [int(r) for r in rng.integers(1, 40, size=n)]
            preds = [1 if r == 1 else 2 for r in ranks]
            records = make_records(preds, [1] * n, ranks=ranks)
            value = mrr(records)
            hit1 = hit_at_k(records, 1)
            assert value >= accuracy(records) / 100.0 - 1e-12
            assert value <= hit1 + (1.0 - hit1) * 0.5 + 1e-12


class TestLevenshtein:
    def test_kitten_sitting(self):
        assert levenshtein("kitten", "sitting") == 3
        assert oracle_levenshtein("kitten", "sitting") == 3

    def test_identity(self):
        assert levenshtein("wičháša", "wičháša") == 0

    def test_pure_insertion(self):
        assert levenshtein("", "abc") == 3

    def test_unicode_scalars_not_bytes(self):
        # each accented character is one edit, not several bytes
        assert levenshtein("čšž", "csz") == 3
        assert levenshtein("ȟó", "ȟó") == 0

    @given(st.text(max_size=12), st.text(max_size=12))
    @settings(max_examples=150, deadline=None)
    def test_matches_recursive_oracle(self, a, b):
        assert levenshtein(a, b) == oracle_levenshtein(a, b)

    @given(st.text(max_size=8), st.text(max_size=8), st.text(max_size=8))
    @settings(max_examples=100, deadline=None)
    def test_metric_axioms(self, a, b, c):
        assert levenshtein(a, b) == levenshtein(b, a)
        assert (levenshtein(a, b) == 0) == (a == b)
        assert levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c)


class TestCer:
    def _record(self, true_s, pred_s):
        return PredictionRecord(
            instance_id=0, true_id=1, true_token=true_s, topk_ids=[2],
            topk_probs=[1.0], rank=2, true_string=true_s, pred_string=pred_s,
        )

    def test_kitten_sitting_normalization(self):
        assert cer([self._record("kitten", "sitting")]) == pytest.approx(3 / 7)

    def test_exact_matches_zero(self):
        records = [self._record("abc", "abc"), self._record("x", "x")]
        assert cer(records) == 0.0

    def test_empty_true_full_error(self):
        assert cer([self._record("", "ab")]) == 1.0

    def test_both_empty_contributes_zero(self):
        assert cer([self._record("", ""), self._record("ab", "ab")]) == 0.0

    @given(st.lists(st.tuples(st.text(max_size=6), st.text(max_size=6)), min_size=1, max_size=20))
    @settings(max_examples=100, deadline=None)
    def test_bounded_and_matches_oracle(self, pairs):
        records = [self._record(t, p) for t, p in pairs]
        value = cer(records)
        assert 0.0 <= value <= 1.0
        assert value == pytest.approx(oracle_cer(pairs), abs=1e-12)


class TestHitAtK:
    def test_thirty_one_percent_format(self):
        ranks = [5] * 31 + [11] * 69
        records = make_records([1] * 100, [2] * 100, ranks=ranks)
        assert hit_at_k(records, 10) == pytest.approx(0.31)

    def test_k_equals_one_is_accuracy(self):
        rng = np.random.default_rng(0)
        preds = rng.integers(0, 5, size=50).tolist()
        truths = rng.integers(0, 5, size=50).tolist()
        records = make_records(preds, truths)
        assert hit_at_k(records, 1) == pytest.approx(accuracy(records) / 100.0)

    def test_rank_exactly_k_counts(self):
        records = make_records([1], [2], ranks=[10])
        assert hit_at_k(records, 10) == 1.0

    def test_monotone_in_k(self):
        rng = np.random.default_rng(1)
        ranks = rng.integers(1, 30, size=100).tolist()
        records = make_records([1] * 100, [2] * 100, ranks=ranks)
        values = [hit_at_k(records, k) for k in range(1, 31)]
        assert all(a <= b for a, b in zip(values, values[1:]))
        assert values[-1] == 1.0


class TestBleu:
    def test_perfect_match(self):
        seqs = [[1, 2, 3, 4, 5], [6, 7, 8, 9]]
        assert bleu(seqs, seqs) == pytest.approx(1.0)

    def test_disjoint_unigrams_zero(self):
        assert bleu([[1, 2, 3]], [[4, 5, 6]]) == 0.0

    def test_hand_tabulated_case(self):
        # candidate a b c d vs reference a b c e:
        # p1 = 3/4 (raw), smoothed p2 = (2+1)/(3+1), p3 = (1+1)/(2+1),
        # p4 = (0+1)/(1+1); brevity penalty 1.
        expected = (0.75 * 0.75 * (2 / 3) * 0.5) ** 0.25
        value = bleu([[1, 2, 3, 4]], [[1, 2, 3, 5]])
        assert value == pytest.approx(expected, rel=1e-12)
        assert value == pytest.approx(oracle_bleu([[1, 2, 3, 4]], [[1, 2, 3, 5]]), rel=1e-12)

    def test_short_candidate_brevity_penalty(self):
        value = bleu([[1, 2]], [[1, 2, 3, 4]])
        oracle = oracle_bleu([[1, 2]], [[1, 2, 3, 4]])
        assert value == pytest.approx(oracle, rel=1e-12)
        assert value < 1.0

    def test_empty_candidate_contributes_via_brevity(self):
        assert bleu([[], [1, 2]], [[3, 4], [1, 2]]) == pytest.approx(
            oracle_bleu([[], [1, 2]], [[3, 4], [1, 2]]), rel=1e-12
        )

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError):
            bleu([], [])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="counts differ"):
            bleu([[1]], [[1], [2]])


@pytest.fixture(scope="module")
def data():
    rng = np.random.default_rng(2024)
    vocab = 40
    n = 1000
    preds = rng.integers(0, vocab, size=n).tolist()
    truths = rng.integers(0, vocab, size=n).tolist()
    ranks = [
        1 if p == t else int(rng.integers(2, 200))
        for p, t in zip(preds, truths)
    ]
    records = make_records(preds, truths, ranks=ranks, vocab=vocab)
    return records, preds, truths, ranks


class TestOracleEquivalenceRandomized:
    """Each metric equals its brute-force oracle on 1,000 random instances."""

    def test_accuracy(self, data):
        records, preds, truths, _ = data
        assert accuracy(records) == pytest.approx(oracle_accuracy(preds, truths), abs=1e-9)

    def test_precision_recall_f1(self, data):
        records, preds, truths, _ = data
        lib = precision_recall_f1(records)
        orc = oracle_macro_prf(preds, truths)
        assert lib == pytest.approx(orc, abs=1e-9)

    def test_mrr(self, data):
        records, _, _, ranks = data
        assert mrr(records) == pytest.approx(oracle_mrr(ranks), abs=1e-9)

    def test_hit_at_k(self, data):
        records, _, _, ranks = data
        for k in (1, 5, 10, 50):
            assert hit_at_k(records, k) == pytest.approx(oracle_hit_at_k(ranks, k), abs=1e-12)

    def test_cer(self, data):
        records, *_ = data
        pairs = [(r.true_string, r.pred_string) for r in records]
        assert cer(records) == pytest.approx(oracle_cer(pairs), abs=1e-9)

    def test_bleu_on_random_sequences(self):
        rng = np.random.default_rng(7)
        candidates = [rng.integers(0, 12, size=rng.integers(1, 15)).tolist() for _ in range(200)]
        references = [rng.integers(0, 12, size=rng.integers(1, 15)).tolist() for _ in range(200)]
        assert bleu(candidates, references) == pytest.approx(
            oracle_bleu(candidates, references), abs=1e-9
        )


class TestEvalReport:
    def test_accuracy_bounds_enforced(self):
        with pytest.raises(ValueError, match="percentage"):
            EvalReport(accuracy=101, precision=0, f1=0, mrr=0, cer=0, hit_at_k=0, k=10, bleu=0)

    def test_unit_interval_enforced(self):
        with pytest.raises(ValueError, match="mrr"):
            EvalReport(accuracy=50, precision=0, f1=0, mrr=1.5, cer=0, hit_at_k=0, k=10, bleu=0)

    def test_render_has_all_seven_columns_in_order(self):
        report = EvalReport(
            accuracy=51.48, precision=0.56, f1=0.49, mrr=0.51, cer=0.43,
            hit_at_k=0.31, k=10, bleu=0.09,
        )
        table = render_report({"ours": report})
        header = table.splitlines()[0]
        columns = ["Accuracy", "Precision", "F1-Score", "MRR", "CER", "Hit@10", "BLEU"]
        positions = [header.index(c) for c in columns]
        assert positions == sorted(positions)
        assert "51.48%" in table and "0.56" in table


@pytest.fixture(scope="module")
def setup():
    corpus = toy_corpus(n_train=24, n_valid=4, n_test=8)
    tok = train_bpe(corpus.lines_in_split(Split.TRAIN), vocab_size=300)
    cfg = ModelConfig(
        num_layers=1, hidden_size=16, ffn_inner=32, num_heads=2, head_size=8,
        context_size=32, vocab_size=tok.vocab_size,
    )
    model = new_model(cfg, seed=0)
    return model, tok, corpus.lines_in_split(Split.TEST)


class TestEvaluateModel:

    def test_untrained_model_sanity_bounds(self, setup):
        model, tok, test_lines = setup
        report, records = evaluate_model(model, tok, test_lines, k=10, seed=0)
        # Monte-Carlo expectation for random rankings over ~290 tokens:
        # accuracy ~ 0.3%, mrr ~ (ln V + gamma)/V ~ 0.02; allow wide slack.
        assert report.accuracy < 10.0
        assert report.mrr < 0.15
        assert 0.0 <= report.hit_at_k <= 1.0
        assert records

    def test_fixed_seed_reproducible(self, setup):
        model, tok, test_lines = setup
        a, _ = evaluate_model(model, tok, test_lines, k=10, seed=3)
        b, _ = evaluate_model(model, tok, test_lines, k=10, seed=3)
        assert a == b

    def test_rank_consistent_with_topk(self, setup):
        model, tok, test_lines = setup
        _, records = evaluate_model(model, tok, test_lines, k=10, seed=1)
        for r in records:
            if r.rank <= 10:
                assert r.topk_ids[r.rank - 1] == r.true_id
            else:
                assert r.true_id not in r.topk_ids

    def test_empty_test_split_rejected(self, setup):
        model, tok, _ = setup
        with pytest.raises(ValueError, match="test split"):
            evaluate_model(model, tok, [], k=10)

    def test_dump_roundtrip(self, setup, tmp_path):
        model, tok, test_lines = setup
        _, records = evaluate_model(model, tok, test_lines, k=5, seed=2)
        path = write_prediction_dump(records, tmp_path / "predictions.tsv")
        loaded = read_prediction_dump(path, tok)
        assert len(loaded) == len(records)
        for a, b in zip(loaded, records):
            assert a.instance_id == b.instance_id
            assert a.true_id == b.true_id
            assert a.rank == b.rank
            assert a.topk_ids == b.topk_ids
