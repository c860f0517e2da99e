"""Greedy and word-level ensemble decoding.

A decodable model is anything with ``vocab_size``, ``max_prefix_len`` and
``next_token_probs(sample, prefix) -> ndarray[vocab_size]``;
:class:`~dualstream.model.DualStreamModel` returns the last row of its fused
distribution. At each step the ensemble sums the models' vectors (no
renormalization), takes the argmax with ties going to the lowest id, and feeds
the chosen word back to every model.
"""

from __future__ import annotations

import json
from concurrent.futures import Executor
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .data import BOS, EOS, FIELD_TAG_IDS, FIELDS, PAD, BoundarySample, Vocabulary, detokenize
from .model import DualStreamModel

# never emitted: PAD, BOS and the field tags
BANNED_IDS = (PAD, BOS, *FIELD_TAG_IDS.values())


class Decodable(Protocol):
    vocab_size: int
    max_prefix_len: int

    def next_token_probs(self, sample: BoundarySample, prefix: Sequence[int]) -> np.ndarray: ...


class ModelDecoder:
    """Adapts a DualStreamModel to the decoding protocol."""

    def __init__(self, model: DualStreamModel):
        self.model = model
        self.vocab_size = model.config.vocab_size
        self.max_prefix_len = model.config.max_caption_len

    def next_token_probs(self, sample, prefix):
        return self.model.forward(sample, prefix).fused.data[-1]


def _as_decodable(m) -> Decodable:
    return ModelDecoder(m) if isinstance(m, DualStreamModel) else m


def select_token(summed: np.ndarray, banned: Iterable[int] = ()) -> int:
    """Argmax with lowest-id tie-break, skipping ``banned`` ids."""
    scores = np.array(summed, dtype=np.float64)
    banned = [b for b in banned if b < scores.size]
    scores[banned] = -np.inf
    return int(np.argmax(scores))


def _start(field: str) -> list[int]:
    if field not in FIELD_TAG_IDS:
        raise KeyError(f"unknown caption field {field!r}; expected one of {FIELDS}")
    return [BOS, FIELD_TAG_IDS[field]]


def _resolve_max_len(max_len: int | None, limit: int) -> int:
    # the prefix <bos> <tag> w1 .. w_{k-1} must fit, so k <= limit - 1
    cap = limit - 1
    if max_len is None:
        return cap
    if max_len > cap:
        raise ValueError(f"max_len {max_len} needs prefixes longer than the model's {limit}")
    return max_len


def ensemble_decode(sample: BoundarySample, field: str, models: Sequence, max_len: int | None = None,
                    executor: Executor | None = None) -> list[int]:
    """Word-level ensemble: sum per-model next-word vectors, pick the argmax,
    append it to the shared prefix, repeat until ``<eos>`` or ``max_len``."""
    decoders = [_as_decodable(m) for m in models]
    if not decoders:
        raise ValueError("ensemble needs at least one model")
    sizes = {d.vocab_size for d in decoders}
    if len(sizes) != 1:
        raise ValueError(f"ensemble models disagree on vocabulary size: {sorted(sizes)}")
    max_len = _resolve_max_len(max_len, min(d.max_prefix_len for d in decoders))
    prefix = _start(field)
    out: list[int] = []
    while len(out) < max_len:
        if executor is not None and len(decoders) > 1:
            vectors = list(executor.map(lambda d: d.next_token_probs(sample, prefix), decoders))
        else:
            vectors = [d.next_token_probs(sample, prefix) for d in decoders]
        summed = vectors[0].copy()
        for v in vectors[1:]:
            summed += v
        token = select_token(summed, BANNED_IDS)
        if token == EOS:
            break
        out.append(token)
        prefix = prefix + [token]
    return out


def greedy_decode(sample: BoundarySample, field: str, model, max_len: int | None = None) -> list[int]:
    return ensemble_decode(sample, field, [model], max_len)


def predict_triplets(samples: Sequence[BoundarySample], models: Sequence, vocab: Vocabulary,
                     max_len: int | None = None, executor: Executor | None = None) -> list[dict]:
    """Prediction rows ``{boundary_id, subject, before, after}`` with detokenized text."""
    rows = []
    for s in samples:
        row = {"boundary_id": s.boundary_id}
        for f in FIELDS:
            row[f] = detokenize(ensemble_decode(s, f, models, max_len, executor), vocab)
        rows.append(row)
    return rows


def write_predictions(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps({k: r[k] for k in ("boundary_id", *FIELDS)}) + "\n")


def read_predictions(path: str | Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rows.append({"boundary_id": str(obj["boundary_id"]),
                             **{f: str(obj[f]) for f in FIELDS}})
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed prediction ({exc})") from None
    return rows
