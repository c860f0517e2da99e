import json
import math
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualstream.metrics import (
    cider_d,
    lcs_length,
    predictions_to_tokens,
    read_references,
    rouge_l,
    triplet_average,
    write_references,
)

WORDS = "a b c d e f g".split()


def lcs_memo(a, b):
    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + go(i + 1, j + 1)
        return max(go(i + 1, j), go(i, j + 1))

    return go(0, 0)


def cider_oracle(cands, refs, sigma=6.0):
    """CIDEr-D written out with explicit per-order n-gram dictionaries."""
    n_docs = len(cands)
    df = {}
    for ref_set in refs:
        seen = set()
        for r in ref_set:
            for n in range(1, 5):
                for i in range(len(r) - n + 1):
                    seen.add(tuple(r[i:i + n]))
        for g in seen:
            df[g] = df.get(g, 0) + 1

    def vec(tokens, n):
        counts = {}
        for i in range(len(tokens) - n + 1):
            g = tuple(tokens[i:i + n])
            counts[g] = counts.get(g, 0) + 1
        return {g: c * (math.log(n_docs) - math.log(max(1.0, df.get(g, 0.0)))) for g, c in counts.items()}

    out = []
    for c, ref_set in zip(cands, refs):
        acc = 0.0
        for r in ref_set:
            per_n = []
            for n in range(1, 5):
                vc, vr = vec(c, n), vec(r, n)
                num = sum(min(vc[g], vr[g]) * vr[g] for g in vc if g in vr)
                nc = math.sqrt(sum(x * x for x in vc.values()))
                nr = math.sqrt(sum(x * x for x in vr.values()))
                sim = num / (nc * nr) if nc and nr else num
                per_n.append(sim * math.exp(-((len(c) - len(r)) ** 2) / (2 * sigma * sigma)))
            acc += sum(per_n) / 4
        out.append(10.0 * acc / len(ref_set))
    return out


def random_corpus(r, size, max_refs=3):
    sent = lambda: [WORDS[i] for i in r.integers(len(WORDS), size=int(r.integers(1, 9)))]  # noqa: E731
    cands = [sent() for _ in range(size)]
    refs = [[sent() for _ in range(int(r.integers(1, max_refs + 1)))] for _ in range(size)]
    return cands, refs


class TestRouge:
    def test_identical(self):
        assert rouge_l("a man walks".split(), ["a man walks".split()]) == 1.0

    def test_disjoint(self):
        assert rouge_l("a b".split(), ["c d".split()]) == 0.0

    def test_hand_computed(self):
        expected = (1 + 1.2**2) * 1.0 * 0.75 / (1.0 + 1.2**2 * 0.75)
        assert expected == pytest.approx(0.8798076923, abs=1e-10)
        assert rouge_l("a b c d".split(), ["a c d".split()]) == pytest.approx(expected, abs=1e-15)

    def test_best_reference(self):
        assert rouge_l("a b".split(), ["x y".split(), "a b".split()]) == 1.0

    def test_empty_candidate(self):
        assert rouge_l([], ["a".split()]) == 0.0

    def test_no_references(self):
        with pytest.raises(ValueError):
            rouge_l(["a"], [])

    @given(st.lists(st.sampled_from(WORDS[:4]), min_size=1, max_size=8),
           st.lists(st.lists(st.sampled_from(WORDS[:4]), min_size=1, max_size=8), min_size=1, max_size=3))
    @settings(max_examples=100, deadline=None)
    def test_bounds_and_perfect_iff_equal(self, cand, refs):
        s = rouge_l(cand, refs)
        assert 0.0 <= s <= 1.0 + 1e-15
        assert (abs(s - 1.0) < 1e-12) == any(cand == r for r in refs)


def test_lcs_matches_oracle_on_50_corpora():
    r = np.random.default_rng(0)
    for _ in range(50):
        cands, refs = random_corpus(r, 5)
        for c, rs in zip(cands, refs):
            for ref in rs:
                assert lcs_length(c, ref) == lcs_memo(tuple(c), tuple(ref))


class TestCider:
    def test_unique_exact_match_scores_ten(self):
        cands = ["the red car drives fast".split(), "dogs bark".split()]
        refs = [["the red car drives fast".split()], ["cats meow".split()]]
        mean, scores = cider_d(cands, refs)
        assert scores[0] == pytest.approx(10.0, abs=1e-12)
        assert scores[1] == 0.0

    def test_no_shared_ngrams(self):
        _, scores = cider_d([["x", "y"], ["a"]], [[["p", "q"]], [["b"]]])
        assert scores == [0.0, 0.0]

    def test_matches_brute_force(self):
        cands, refs = random_corpus(np.random.default_rng(5), 20)
        mean, scores = cider_d(cands, refs)
        expected = cider_oracle(cands, refs)
        np.testing.assert_allclose(scores, expected, rtol=0, atol=1e-9)
        assert mean == pytest.approx(sum(expected) / 20, abs=1e-9)

    @pytest.mark.parametrize("seed", range(5))
    def test_order_invariant_and_bounded(self, seed):
        r = np.random.default_rng(seed)
        cands, refs = random_corpus(r, 12)
        _, scores = cider_d(cands, refs)
        perm = r.permutation(12)
        _, moved = cider_d([cands[i] for i in perm], [refs[i] for i in perm])
        np.testing.assert_allclose(moved, [scores[i] for i in perm], rtol=0, atol=1e-12)
        assert all(0.0 <= s <= 10.0 + 1e-9 for s in scores)

    def test_empty_corpus(self):
        with pytest.raises(ValueError, match="nonempty"):
            cider_d([], [])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            cider_d([["a"]], [])


def triplets(texts):
    return {i: {f: t.split() for f, t in zip(("subject", "before", "after"), row)}
            for i, row in texts.items()}


def as_refs(preds):
    return {i: {f: [toks] for f, toks in row.items()} for i, row in preds.items()}


class TestTripletAverage:
    def setup_method(self):
        self.refs = triplets({"a": ("a man", "he is walking", "he starts running"),
                              "b": ("the dog", "dog sits", "dog jumps up")})

    def test_perfect(self):
        report = triplet_average(self.refs, as_refs(self.refs))
        assert report.metrics["rouge_l"]["average"] == 1.0
        assert report.corpus_size == 2

    def test_one_field_perfect(self):
        preds = {i: {"subject": row["subject"], "before": ["zzz"], "after": ["qqq"]}
                 for i, row in self.refs.items()}
        report = triplet_average(preds, as_refs(self.refs))
        assert report.metrics["rouge_l"]["average"] == pytest.approx(1 / 3, abs=1e-12)

    def test_average_is_mean_of_fields(self):
        preds = triplets({"a": ("a dog", "he walking", "running"), "b": ("dog", "dog sits", "up")})
        report = triplet_average(preds, as_refs(self.refs))
        for m, scores in report.metrics.items():
            fields = [scores[f] for f in ("subject", "before", "after")]
            assert abs(scores["average"] - sum(fields) / 3) <= 1e-12
        blob = report.to_json()
        assert set(blob["mean_over_fields"]) == {"rouge_l", "cider_d"}
        assert set(blob["mean_over_metrics"]) == {"subject", "before", "after"}
        assert blob["overall"] == pytest.approx(
            sum(blob["mean_over_fields"].values()) / 2, abs=1e-12)

    def test_missing_prediction(self):
        with pytest.raises(ValueError, match=r"\['b'\]"):
            triplet_average({"a": self.refs["a"]}, as_refs(self.refs))

    def test_unknown_prediction(self):
        preds = dict(self.refs, c=self.refs["a"])
        with pytest.raises(ValueError, match="absent"):
            triplet_average(preds, as_refs(self.refs))


class TestReferenceFiles:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "refs.jsonl"
        write_references(path, {"x": {"subject": ["A man."], "before": ["walks", "he walks"],
                                      "after": ["Runs!"]}})
        assert read_references(path) == {"x": {"subject": [["a", "man"]],
                                               "before": [["walks"], ["he", "walks"]],
                                               "after": [["runs"]]}}

    def test_dataset_file(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text(json.dumps({"schema_version": 1}) + "\n" + json.dumps(
            {"boundary_id": "q", "captions": {"subject": "Dog", "before": "sits", "after": "runs"}})
            + "\n")
        assert read_references(path)["q"]["subject"] == [["dog"]]

    def test_malformed(self, tmp_path):
        path = tmp_path / "r.jsonl"
        path.write_text('{"boundary_id": "x", "captions": {"subject": []}}\n')
        with pytest.raises(ValueError, match="r.jsonl:1"):
            read_references(path)

    def test_predictions_to_tokens(self):
        rows = [{"boundary_id": "x", "subject": "A man", "before": "", "after": "runs."}]
        assert predictions_to_tokens(rows) == {"x": {"subject": ["a", "man"], "before": [],
                                                     "after": ["runs"]}}
