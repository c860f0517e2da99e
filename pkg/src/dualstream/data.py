"""Boundary samples, vocabulary, dataset files and the synthetic generator.

Dataset files are JSON Lines. The first line is a header::

    {"schema_version": 1, "d_app": 16, "d_mot": 16, "d_reg": 16, "d_typ": 8,
     "boundary_types": ["change of action", ...], "max_regions": 10}

and each following line is one boundary::

    {"boundary_id": "b0", "appearance": [[...]], "motion": [[...]],
     "regions": [[...]], "boundary_type": "change of action",
     "captions": {"subject": "...", "before": "...", "after": "..."}}

``max_regions`` is optional and defaults to 10.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

SCHEMA_VERSION = 1
DEFAULT_MAX_REGIONS = 10
FIELDS = ("subject", "before", "after")

PAD, BOS, EOS, UNK = 0, 1, 2, 3
FIELD_TAG_TOKENS = {"subject": "<subj>", "before": "<bef>", "after": "<aft>"}
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>", "<subj>", "<bef>", "<aft>")
FIELD_TAG_IDS = {f: RESERVED_TOKENS.index(t) for f, t in FIELD_TAG_TOKENS.items()}

_WORD = re.compile(r"[^\W_]+")


class DatasetError(ValueError):
    """A dataset file does not conform to the schema."""


class Vocabulary:
    """Token inventory with fixed reserved ids.

    Ids 0-6 are ``<pad> <bos> <eos> <unk> <subj> <bef> <aft>``; words follow in
    order of first insertion.
    """

    def __init__(self, words: Sequence[str] = ()):
        self._tokens: list[str] = list(RESERVED_TOKENS)
        self._ids: dict[str, int] = {t: i for i, t in enumerate(self._tokens)}
        for w in words:
            self.add(w)

    def add(self, token: str) -> int:
        if token not in self._ids:
            self._ids[token] = len(self._tokens)
            self._tokens.append(token)
        return self._ids[token]

    def id(self, token: str) -> int:
        return self._ids.get(token, UNK)

    def token(self, idx: int) -> str:
        return self._tokens[idx]

    @property
    def tokens(self) -> list[str]:
        return list(self._tokens)

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._tokens == other._tokens

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> "Vocabulary":
        if tuple(tokens[: len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise DatasetError("token list does not start with the reserved tokens")
        return cls(tokens[len(RESERVED_TOKENS):])


def normalize(text: str) -> list[str]:
    """Lowercase and split on whitespace and punctuation."""
    return _WORD.findall(text.lower())


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    return [vocab.id(w) for w in normalize(text)]


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    """Inverse of :func:`tokenize` up to normalization; control tokens are dropped."""
    skip = {PAD, BOS, EOS, *FIELD_TAG_IDS.values()}
    return " ".join(vocab.token(i) for i in ids if i not in skip)


@dataclass(frozen=True)
class CaptionTriplet:
    subject: tuple[int, ...]
    before: tuple[int, ...]
    after: tuple[int, ...]

    def field(self, name: str) -> tuple[int, ...]:
        if name not in FIELDS:
            raise KeyError(f"unknown caption field {name!r}; expected one of {FIELDS}")
        return getattr(self, name)

    def as_dict(self) -> dict[str, tuple[int, ...]]:
        return {f: self.field(f) for f in FIELDS}


@dataclass(frozen=True, eq=False)
class BoundarySample:
    boundary_id: str
    appearance: np.ndarray
    motion: np.ndarray
    regions: np.ndarray
    boundary_type_id: int
    captions: CaptionTriplet
    # True marks a real detection row; None means every row is real
    region_mask: np.ndarray | None = None

    @property
    def valid_regions(self) -> np.ndarray:
        if self.region_mask is None:
            return np.ones(self.regions.shape[0], dtype=bool)
        return self.region_mask


def pad_regions(sample: BoundarySample, k: int) -> BoundarySample:
    """Pad region features to ``k`` rows with zeros and record a validity mask."""
    n = sample.regions.shape[0]
    if n > k:
        raise DatasetError(f"sample {sample.boundary_id!r} has {n} regions, more than {k}")
    padded = np.zeros((k, sample.regions.shape[1]))
    padded[:n] = sample.regions
    mask = np.zeros(k, dtype=bool)
    mask[:n] = sample.valid_regions
    return replace(sample, regions=padded, region_mask=mask)


@dataclass
class DatasetHeader:
    d_app: int
    d_mot: int
    d_reg: int
    d_typ: int
    boundary_types: list[str]
    max_regions: int = DEFAULT_MAX_REGIONS
    schema_version: int = SCHEMA_VERSION

    def to_json(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "d_app": self.d_app,
            "d_mot": self.d_mot,
            "d_reg": self.d_reg,
            "d_typ": self.d_typ,
            "boundary_types": list(self.boundary_types),
            "max_regions": self.max_regions,
        }


@dataclass
class Dataset:
    header: DatasetHeader | None
    samples: list[BoundarySample]
    vocab: Vocabulary
    texts: dict[str, dict[str, str]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[BoundarySample]:
        return iter(self.samples)


def _parse_header(obj: dict, lineno: int) -> DatasetHeader:
    try:
        version = obj["schema_version"]
        if version != SCHEMA_VERSION:
            raise DatasetError(f"line {lineno}: unsupported schema_version {version}")
        types = obj["boundary_types"]
        header = DatasetHeader(
            d_app=int(obj["d_app"]), d_mot=int(obj["d_mot"]), d_reg=int(obj["d_reg"]),
            d_typ=int(obj["d_typ"]), boundary_types=list(types),
            max_regions=int(obj.get("max_regions", DEFAULT_MAX_REGIONS)),
        )
    except (KeyError, TypeError) as exc:
        raise DatasetError(f"line {lineno}: malformed header ({exc})") from None
    if not header.boundary_types or len(set(header.boundary_types)) != len(header.boundary_types):
        raise DatasetError(f"line {lineno}: boundary_types must be a nonempty list of distinct names")
    return header


def _matrix(obj, width: int, what: str, sid: str) -> np.ndarray:
    try:
        arr = np.array(obj, dtype=np.float64)
    except (TypeError, ValueError):
        raise DatasetError(f"sample {sid!r}: {what} is not a rectangular numeric array") from None
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise DatasetError(f"sample {sid!r}: {what} must be a nonempty matrix, got shape {arr.shape}")
    if arr.shape[1] != width:
        raise DatasetError(
            f"sample {sid!r}: {what} width {arr.shape[1]} differs from header width {width}")
    if not np.isfinite(arr).all():
        raise DatasetError(f"sample {sid!r}: {what} contains non-finite values")
    return arr


def load_dataset(path: str | Path, vocab: Vocabulary | None = None) -> Dataset:
    """Read and validate a dataset file.

    Without ``vocab`` a vocabulary is built from the reference captions in
    order of first appearance (samples in file order, fields subject, before,
    after). With ``vocab`` captions are encoded against it and unknown words
    become ``<unk>``.
    """
    build_vocab = vocab is None
    vocab = Vocabulary() if build_vocab else vocab
    header: DatasetHeader | None = None
    samples: list[BoundarySample] = []
    texts: dict[str, dict[str, str]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise DatasetError(f"line {lineno}: expected a JSON object")
            if header is None:
                header = _parse_header(obj, lineno)
                continue
            samples.append(_parse_sample(obj, lineno, header, vocab, build_vocab, texts))
    ids = [s.boundary_id for s in samples]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise DatasetError(f"duplicate boundary ids: {dupes}")
    return Dataset(header, samples, vocab, texts)


def _parse_sample(obj, lineno, header, vocab, build_vocab, texts) -> BoundarySample:
    try:
        sid = str(obj["boundary_id"])
        type_name = obj["boundary_type"]
        caps = obj["captions"]
        raw = {f: caps[f] for f in FIELDS}
        app, mot, reg = obj["appearance"], obj["motion"], obj["regions"]
    except (KeyError, TypeError) as exc:
        raise DatasetError(f"line {lineno}: missing field {exc}") from None
    appearance = _matrix(app, header.d_app, "appearance", sid)
    motion = _matrix(mot, header.d_mot, "motion", sid)
    regions = _matrix(reg, header.d_reg, "regions", sid)
    if regions.shape[0] > header.max_regions:
        raise DatasetError(
            f"sample {sid!r}: {regions.shape[0]} region rows exceed declared max_regions "
            f"{header.max_regions}")
    if type_name not in header.boundary_types:
        raise DatasetError(f"sample {sid!r}: unknown boundary type {type_name!r}")
    encoded = {}
    for f in FIELDS:
        if not isinstance(raw[f], str):
            raise DatasetError(f"sample {sid!r}: caption {f!r} must be a string")
        words = normalize(raw[f])
        if not words:
            raise DatasetError(f"sample {sid!r}: caption {f!r} is empty after tokenization")
        if build_vocab:
            for w in words:
                vocab.add(w)
        encoded[f] = tuple(vocab.id(w) for w in words)
    texts[sid] = {f: " ".join(normalize(raw[f])) for f in FIELDS}
    return BoundarySample(
        boundary_id=sid, appearance=appearance, motion=motion, regions=regions,
        boundary_type_id=header.boundary_types.index(type_name),
        captions=CaptionTriplet(**encoded),
    )


def sample_to_json(sample: BoundarySample, header: DatasetHeader, texts: dict[str, str]) -> dict:
    n = int(sample.valid_regions.sum()) if sample.region_mask is not None else sample.regions.shape[0]
    return {
        "boundary_id": sample.boundary_id,
        "appearance": sample.appearance.tolist(),
        "motion": sample.motion.tolist(),
        "regions": sample.regions[:n].tolist(),
        "boundary_type": header.boundary_types[sample.boundary_type_id],
        "captions": {f: texts[f] for f in FIELDS},
    }


def write_dataset(path: str | Path, dataset: Dataset) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(dataset.header.to_json()) + "\n")
        for s in dataset.samples:
            fh.write(json.dumps(sample_to_json(s, dataset.header, dataset.texts[s.boundary_id])) + "\n")


# ---------------------------------------------------------------------------
# synthetic data

SYNTH_NOUNS = ("man", "woman", "dog", "child")
SYNTH_VERBS = ("walking", "running", "sitting", "jumping")
SYNTH_FUNCTION_WORDS = ("a", "is", "starts", "stops")
SYNTH_WORDS = SYNTH_FUNCTION_WORDS + SYNTH_NOUNS + SYNTH_VERBS

_SUBJECT_FORMS = ("a {noun}", "{noun} {verb_b}")
_BEFORE_FORMS = ("{noun} is {verb_b}", "a {noun} is {verb_b}", "a {noun} {verb_b}")
_AFTER_FORMS = ("{noun} starts {verb_a}", "a {noun} is {verb_a}",
                "a {noun} stops {verb_b} starts {verb_a}")

DEFAULT_BOUNDARY_TYPES = ("change of action", "change of subject", "change of object",
                          "change in environment")


@dataclass
class SynthConfig:
    t_app: int = 4
    t_mot: int = 2
    regions: int = 10
    d_app: int = 16
    d_mot: int = 16
    d_reg: int = 16
    d_typ: int = 8
    n_templates: int = 8
    boundary_types: tuple[str, ...] = DEFAULT_BOUNDARY_TYPES


def _templates(rng: np.random.Generator, cfg: SynthConfig) -> list[tuple[dict[str, str], int]]:
    out = []
    for _ in range(cfg.n_templates):
        noun = SYNTH_NOUNS[rng.integers(len(SYNTH_NOUNS))]
        vb, va = rng.choice(len(SYNTH_VERBS), size=2, replace=False)
        slots = {"noun": noun, "verb_b": SYNTH_VERBS[vb], "verb_a": SYNTH_VERBS[va]}
        caps = {
            "subject": _SUBJECT_FORMS[rng.integers(len(_SUBJECT_FORMS))].format(**slots),
            "before": _BEFORE_FORMS[rng.integers(len(_BEFORE_FORMS))].format(**slots),
            "after": _AFTER_FORMS[rng.integers(len(_AFTER_FORMS))].format(**slots),
        }
        out.append((caps, int(rng.integers(len(cfg.boundary_types)))))
    return out


def synth_lines(seed: int, n: int, config: SynthConfig | None = None) -> list[str]:
    """JSONL lines (header first) of a deterministic synthetic dataset.

    Each boundary gets a latent template id; its captions and boundary type
    are a function of that id alone, while its features are unit-normal noise.
    """
    if n < 1:
        raise ValueError("synthetic dataset needs n >= 1")
    cfg = config or SynthConfig()
    rng = np.random.default_rng(seed)
    templates = _templates(rng, cfg)
    header = DatasetHeader(cfg.d_app, cfg.d_mot, cfg.d_reg, cfg.d_typ,
                           list(cfg.boundary_types), max_regions=max(cfg.regions, 1))
    lines = [json.dumps(header.to_json())]
    for i in range(n):
        caps, type_id = templates[int(rng.integers(len(templates)))]
        obj = {
            "boundary_id": f"synth-{seed}-{i:04d}",
            "appearance": rng.standard_normal((cfg.t_app, cfg.d_app)).tolist(),
            "motion": rng.standard_normal((cfg.t_mot, cfg.d_mot)).tolist(),
            "regions": rng.standard_normal((cfg.regions, cfg.d_reg)).tolist(),
            "boundary_type": cfg.boundary_types[type_id],
            "captions": caps,
        }
        lines.append(json.dumps(obj))
    return lines


def synth_dataset(path: str | Path, seed: int, n: int, config: SynthConfig | None = None) -> Path:
    path = Path(path)
    path.write_text("\n".join(synth_lines(seed, n, config)) + "\n", encoding="utf-8")
    return path


def load_pretrained_embeddings(path: str | Path, vocab: Vocabulary,
                               dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Read a GloVe-style text file (``word v1 ... v_dim`` per line).

    Returns a ``len(vocab) x dim`` table and a boolean mask of the rows that
    were found in the file; rows not found are zero.
    """
    table = np.zeros((len(vocab), dim))
    found = np.zeros(len(vocab), dtype=bool)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip().split(" ")
            if len(parts) < 2:
                continue
            word, values = parts[0], parts[1:]
            if word not in vocab:
                continue
            if len(values) != dim:
                raise DatasetError(
                    f"{path}:{lineno}: embedding for {word!r} has {len(values)} values, expected {dim}")
            idx = vocab.id(word)
            table[idx] = np.array(values, dtype=np.float64)
            found[idx] = True
    return table, found
