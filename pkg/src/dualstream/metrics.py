"""ROUGE-L and CIDEr-D, scored separately on the subject / before / after fields.

Captions are token sequences (lists of strings or ints). Text inputs are
normalized with :func:`dualstream.data.normalize` first.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Mapping, Sequence

from . import kernels
from .data import FIELDS, normalize

log = logging.getLogger(__name__)

ROUGE_BETA = 1.2
CIDER_N = 4
CIDER_SIGMA = 6.0
METRICS = ("rouge_l", "cider_d")

Tokens = Sequence[Hashable]


def _encode_pair(a: Tokens, b: Tokens) -> tuple[list[int], list[int]]:
    ids: dict = {}
    return ([ids.setdefault(t, len(ids)) for t in a], [ids.setdefault(t, len(ids)) for t in b])


def lcs_length(a: Tokens, b: Tokens) -> int:
    x, y = _encode_pair(a, b)
    return kernels.lcs_length(x, y)


def rouge_l(candidate: Tokens, references: Sequence[Tokens], beta: float = ROUGE_BETA) -> float:
    """Best LCS F-measure of ``candidate`` against any reference."""
    if not references:
        raise ValueError("rouge_l needs at least one reference")
    if len(candidate) == 0:
        return 0.0
    best = 0.0
    for ref in references:
        if len(ref) == 0:
            continue
        lcs = lcs_length(candidate, ref)
        if lcs == 0:
            continue
        r, p = lcs / len(ref), lcs / len(candidate)
        best = max(best, (1 + beta**2) * r * p / (r + beta**2 * p))
    return best


def _ngrams(tokens: Tokens, n_max: int) -> Counter:
    tokens = tuple(tokens)
    return Counter(tokens[i:i + k] for k in range(1, n_max + 1) for i in range(len(tokens) - k + 1))


def cider_d(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]],
            n: int = CIDER_N, sigma: float = CIDER_SIGMA) -> tuple[float, list[float]]:
    """Corpus CIDEr-D: returns (mean, per-sample scores).

    Document frequencies come from the reference sets of the corpus itself.
    Per n-gram order the score is the clipped tf-idf cosine times a Gaussian
    length penalty; orders are averaged, references averaged, and the result
    scaled by 10.
    """
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates for {len(references)} reference sets")
    if not candidates:
        raise ValueError("cider_d needs a nonempty corpus")
    if len(candidates) == 1:
        log.warning("CIDEr-D on a single-sample corpus: every idf weight is 0")
    ref_counts = [[_ngrams(r, n) for r in refs] for refs in references]
    df: Counter = Counter()
    for refs in ref_counts:
        df.update(set().union(*refs) if refs else set())
    log_n = math.log(float(len(candidates)))

    def vectorize(counts: Counter):
        vec = [dict() for _ in range(n)]
        norm = [0.0] * n
        for gram, tf in counts.items():
            w = tf * (log_n - math.log(max(1.0, df[gram])))
            vec[len(gram) - 1][gram] = w
            norm[len(gram) - 1] += w * w
        return vec, [math.sqrt(x) for x in norm]

    scores = []
    for cand, ref_tokens_list, refs in zip(candidates, references, ref_counts):
        if not refs:
            raise ValueError("every sample needs at least one reference")
        vec_c, norm_c = vectorize(_ngrams(cand, n))
        len_c = len(cand)
        total = 0.0
        for ref_tokens, counts in zip(ref_tokens_list, refs):
            vec_r, norm_r = vectorize(counts)
            penalty = math.exp(-((len_c - len(ref_tokens)) ** 2) / (2.0 * sigma**2))
            per_order = 0.0
            for k in range(n):
                dot = sum(min(w, vec_r[k].get(g, 0.0)) * vec_r[k].get(g, 0.0)
                          for g, w in vec_c[k].items())
                if norm_c[k] != 0.0 and norm_r[k] != 0.0:
                    dot /= norm_c[k] * norm_r[k]
                per_order += dot * penalty
            total += per_order / n
        scores.append(10.0 * total / len(refs))
    return sum(scores) / len(scores), scores


@dataclass
class EvalReport:
    """Per-field and averaged scores.

    ``metrics[m]`` holds the three field scores of metric ``m`` plus their
    mean under ``"average"``. ``field_means`` groups the other way (mean over
    metrics per field) and ``overall`` is the mean of everything.
    """

    metrics: dict[str, dict[str, float]]
    field_means: dict[str, float]
    overall: float
    corpus_size: int
    per_sample: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "corpus_size": self.corpus_size,
            "metrics": self.metrics,
            "mean_over_fields": {m: s["average"] for m, s in self.metrics.items()},
            "mean_over_metrics": self.field_means,
            "overall": self.overall,
            "per_sample": self.per_sample,
        }


def triplet_average(predictions: Mapping[str, Mapping[str, Tokens]],
                    references: Mapping[str, Mapping[str, Sequence[Tokens]]]) -> EvalReport:
    """Score each caption field as its own corpus, then average the fields.

    ``predictions[id][field]`` is one token sequence; ``references[id][field]``
    a list of them. Every reference id needs a prediction and vice versa.
    """
    missing = sorted(set(references) - set(predictions))
    if missing:
        raise ValueError(f"no prediction for reference ids {missing}")
    unknown = sorted(set(predictions) - set(references))
    if unknown:
        raise ValueError(f"predictions for ids absent from the references: {unknown}")
    ids = sorted(references)
    metrics: dict[str, dict[str, float]] = {m: {} for m in METRICS}
    per_sample = {i: {"boundary_id": i, **{m: {} for m in METRICS}} for i in ids}
    for f in FIELDS:
        cands = [list(predictions[i][f]) for i in ids]
        refs = [[list(r) for r in references[i][f]] for i in ids]
        rl = [rouge_l(c, r) for c, r in zip(cands, refs)]
        metrics["rouge_l"][f] = sum(rl) / len(rl) if rl else 0.0
        if ids:
            metrics["cider_d"][f], cd = cider_d(cands, refs)
        else:
            metrics["cider_d"][f], cd = 0.0, []
        for i, a, b in zip(ids, rl, cd):
            per_sample[i]["rouge_l"][f] = a
            per_sample[i]["cider_d"][f] = b
    for m in METRICS:
        metrics[m]["average"] = sum(metrics[m][f] for f in FIELDS) / len(FIELDS)
    field_means = {f: sum(metrics[m][f] for m in METRICS) / len(METRICS) for f in FIELDS}
    overall = sum(metrics[m]["average"] for m in METRICS) / len(METRICS)
    return EvalReport(metrics, field_means, overall, len(ids), [per_sample[i] for i in ids])


def read_references(path: str | Path) -> dict[str, dict[str, list[list[str]]]]:
    """Load references from a reference file or a dataset file.

    Reference lines look like ``{"boundary_id": ..., "captions": {"subject":
    [...], "before": [...], "after": [...]}}``. A dataset file (first line
    carries ``schema_version``) contributes its single caption per field.
    """
    out: dict[str, dict[str, list[list[str]]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if lineno == 1 and "schema_version" in obj:
                continue
            try:
                sid = str(obj["boundary_id"])
                caps = obj["captions"]
                entry = {}
                for f in FIELDS:
                    texts = caps[f]
                    texts = [texts] if isinstance(texts, str) else list(texts)
                    if not texts:
                        raise ValueError(f"field {f!r} has no references")
                    entry[f] = [normalize(t) for t in texts]
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed reference ({exc})") from None
            out[sid] = entry
    return out


def write_references(path: str | Path, refs: Mapping[str, Mapping[str, Sequence[str]]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sid, caps in refs.items():
            fh.write(json.dumps({"boundary_id": sid,
                                 "captions": {f: list(caps[f]) for f in FIELDS}}) + "\n")


def predictions_to_tokens(rows: Sequence[Mapping[str, str]]) -> dict[str, dict[str, list[str]]]:
    return {r["boundary_id"]: {f: normalize(r[f]) for f in FIELDS} for r in rows}
