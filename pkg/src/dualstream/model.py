"""The dual-stream transformer.

Two token streams are assembled per boundary:

* local:  ``[regions, boundary type, caption prefix]``
* global: ``[appearance, motion, boundary type, caption prefix]``

Every layer runs masked multi-head self-attention inside each stream, then
cross-attention in which each stream's rows query the other stream's feature
rows, then a position-wise feed-forward block. Each sublayer is wrapped as
``layer_norm(x + sublayer(x))``. The caption rows of each stream feed their
own vocabulary head; the two distributions are averaged with weights
``lambda1`` (local) and ``lambda2`` (global).

Masking keeps decoding autoregressive: caption rows attend causally among
themselves, feature rows never attend caption rows, and cross-attention never
exposes the other stream's caption rows.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import BOS, FIELD_TAG_IDS, BoundarySample
from .tensor import (
    ContractViolation,
    DimensionError,
    Tensor,
    concat_rows,
    gelu,
    layer_norm,
    matmul,
    multi_head_attention,
    slice_rows,
    softmax_rows,
    take_rows,
    weighted_sum,
)

STREAMS = ("local", "global")
ATTN_PARTS = ("q", "k", "v")


@dataclass
class ModelConfig:
    vocab_size: int
    n_types: int
    layers: int = 3
    d: int = 768
    heads: int = 12
    d_emb: int = 300
    d_app: int = 512
    d_mot: int = 768
    d_reg: int = 2048
    d_typ: int = 300
    max_caption_len: int = 32
    max_frames: int = 64
    max_regions: int = 10
    lambda1: float = 0.5
    lambda2: float = 0.5
    ffn_mult: int = 4
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.d % self.heads:
            raise ValueError(f"model width {self.d} is not divisible by {self.heads} heads")
        if self.lambda1 < 0 or self.lambda2 < 0 or self.lambda1 + self.lambda2 <= 0:
            raise ValueError(f"need lambda1, lambda2 >= 0 with a positive sum, "
                             f"got {self.lambda1}, {self.lambda2}")
        for name in ("vocab_size", "n_types", "layers", "d", "heads", "d_emb", "d_app", "d_mot",
                     "d_reg", "d_typ", "max_caption_len", "max_frames", "max_regions", "ffn_mult"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in known})


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    """Name → shape of every learnable tensor, in canonical order."""
    d, v = cfg.d, cfg.vocab_size
    shapes: dict[str, tuple[int, int]] = {
        "emb.token": (v, cfg.d_emb),
        "emb.type": (cfg.n_types, cfg.d_typ),
    }
    for name, width in (("app", cfg.d_app), ("mot", cfg.d_mot), ("reg", cfg.d_reg),
                        ("typ", cfg.d_typ), ("cap", cfg.d_emb)):
        shapes[f"proj.{name}.weight"] = (width, d)
        shapes[f"proj.{name}.bias"] = (1, d)
    shapes["pos.app"] = (cfg.max_frames, d)
    shapes["pos.mot"] = (cfg.max_frames, d)
    shapes["pos.cap"] = (cfg.max_caption_len, d)
    inner = cfg.ffn_mult * d
    for i in range(cfg.layers):
        for s in STREAMS:
            p = f"layer{i}.{s}"
            for block in ("self", "cross"):
                for part in ATTN_PARTS:
                    shapes[f"{p}.{block}.{part}.weight"] = (d, d)
                shapes[f"{p}.{block}.o.weight"] = (d, d)
                shapes[f"{p}.{block}.o.bias"] = (1, d)
                shapes[f"{p}.{block}_norm.gain"] = (1, d)
                shapes[f"{p}.{block}_norm.bias"] = (1, d)
            shapes[f"{p}.ffn.in.weight"] = (d, inner)
            shapes[f"{p}.ffn.in.bias"] = (1, inner)
            shapes[f"{p}.ffn.out.weight"] = (inner, d)
            shapes[f"{p}.ffn.out.bias"] = (1, d)
            shapes[f"{p}.ffn_norm.gain"] = (1, d)
            shapes[f"{p}.ffn_norm.bias"] = (1, d)
    for s in STREAMS:
        shapes[f"head.{s}.weight"] = (d, v)
        shapes[f"head.{s}.bias"] = (1, v)
    return shapes


def parameter_count(cfg: ModelConfig) -> int:
    return sum(r * c for r, c in parameter_shapes(cfg).values())


class ModelParams:
    """Ordered name → Tensor mapping of all learnable weights."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams({k: Tensor(t.data, requires_grad=t.requires_grad, name=k)
                            for k, t in self.tensors.items()})

    @classmethod
    def initialize(cls, cfg: ModelConfig, seed: int,
                   pretrained_tokens: tuple[np.ndarray, np.ndarray] | None = None) -> "ModelParams":
        """Seeded initialization.

        Matrices: U(±1/√fan_in). Embedding and positional tables: N(0, 0.02²).
        Biases and norm offsets 0, norm gains 1. ``pretrained_tokens`` is a
        ``(table, found_mask)`` pair whose found rows replace the token table.
        """
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in parameter_shapes(cfg).items():
            if name.startswith(("emb.", "pos.")):
                arr = rng.normal(0.0, 0.02, size=shape)
            elif name.endswith(".gain"):
                arr = np.ones(shape)
            elif name.endswith(".bias"):
                arr = np.zeros(shape)
            else:
                bound = 1.0 / np.sqrt(shape[0])
                arr = rng.uniform(-bound, bound, size=shape)
            tensors[name] = Tensor(arr, requires_grad=True, name=name)
        if pretrained_tokens is not None:
            table, found = pretrained_tokens
            if table.shape != tensors["emb.token"].shape:
                raise DimensionError(f"pretrained token table {table.shape} does not match "
                                     f"{tensors['emb.token'].shape}")
            tensors["emb.token"].data[found] = table[found]
        return cls(tensors)


# ---------------------------------------------------------------------------
# feature projection and stream assembly


@dataclass
class Projected:
    appearance: Tensor
    motion: Tensor
    regions: Tensor
    boundary_type: Tensor
    caption: Tensor
    region_valid: np.ndarray


def _linear(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    return matmul(x, params[f"{prefix}.weight"]) + params[f"{prefix}.bias"]


def _check_width(arr: np.ndarray, width: int, what: str) -> None:
    if arr.ndim != 2 or arr.shape[1] != width:
        raise DimensionError(f"{what} features have shape {arr.shape}, config expects width {width}")


def project_features(sample: BoundarySample, prefix: Sequence[int], params: ModelParams,
                     cfg: ModelConfig) -> Projected:
    """Map every modality to width ``d``; add positional encodings to the
    appearance, motion and caption rows."""
    _check_width(sample.appearance, cfg.d_app, "appearance")
    _check_width(sample.motion, cfg.d_mot, "motion")
    _check_width(sample.regions, cfg.d_reg, "region")
    t_app, t_mot = sample.appearance.shape[0], sample.motion.shape[0]
    if max(t_app, t_mot) > cfg.max_frames:
        raise DimensionError(f"{max(t_app, t_mot)} time steps exceed max_frames {cfg.max_frames}")
    if sample.regions.shape[0] > cfg.max_regions:
        raise DimensionError(
            f"{sample.regions.shape[0]} regions exceed max_regions {cfg.max_regions}")
    if not 0 <= sample.boundary_type_id < cfg.n_types:
        raise ContractViolation(f"boundary type {sample.boundary_type_id} outside [0, {cfg.n_types})")
    prefix = list(prefix)
    if not 1 <= len(prefix) <= cfg.max_caption_len:
        raise ContractViolation(
            f"caption prefix length {len(prefix)} outside [1, {cfg.max_caption_len}]")
    if min(prefix) < 0 or max(prefix) >= cfg.vocab_size:
        raise ContractViolation(f"caption ids {prefix} outside [0, {cfg.vocab_size})")

    x_a = _linear(Tensor(sample.appearance), params, "proj.app") + slice_rows(params["pos.app"], 0, t_app)
    x_m = _linear(Tensor(sample.motion), params, "proj.mot") + slice_rows(params["pos.mot"], 0, t_mot)
    x_r = _linear(Tensor(sample.regions), params, "proj.reg")
    x_b = _linear(take_rows(params["emb.type"], [sample.boundary_type_id]), params, "proj.typ")
    x_c = (_linear(take_rows(params["emb.token"], prefix), params, "proj.cap")
           + slice_rows(params["pos.cap"], 0, len(prefix)))
    return Projected(x_a, x_m, x_r, x_b, x_c, sample.valid_regions)


@dataclass
class StreamLayout:
    """Row bookkeeping for one stream: named segments and key validity."""

    segments: dict[str, tuple[int, int]]
    valid: np.ndarray
    caption_start: int
    n_rows: int

    @property
    def caption_rows(self) -> int:
        return self.n_rows - self.caption_start

    def is_caption(self) -> np.ndarray:
        flags = np.zeros(self.n_rows, dtype=bool)
        flags[self.caption_start:] = True
        return flags

    def self_mask(self) -> np.ndarray:
        """Causal among caption rows; feature rows see only feature rows."""
        n, c = self.n_rows, self.caption_start
        i = np.arange(n)[:, None]
        j = np.arange(n)[None, :]
        allowed = (j < c) | ((i >= c) & (j <= i))
        return allowed & self.valid[None, :]

    def cross_keys(self) -> np.ndarray:
        """Rows of this stream the other stream may attend (valid feature rows)."""
        keys = self.valid.copy()
        keys[self.caption_start:] = False
        return keys


def _layout(parts: list[tuple[str, int]], valid_parts: list[np.ndarray]) -> StreamLayout:
    segments, start = {}, 0
    for name, n in parts:
        segments[name] = (start, start + n)
        start += n
    return StreamLayout(segments, np.concatenate(valid_parts), segments["caption"][0], start)


def build_streams(p: Projected) -> tuple[Tensor, Tensor, StreamLayout, StreamLayout]:
    """Concatenate ``X_l = [X_R, X_B, X_C]`` and ``X_g = [X_A, X_M, X_B, X_C]``."""
    widths = {t.shape[1] for t in (p.appearance, p.motion, p.regions, p.boundary_type, p.caption)}
    if len(widths) != 1:
        raise DimensionError(f"stream inputs have differing widths {sorted(widths)}")
    k, l = p.regions.shape[0], p.caption.shape[0]
    t_a, t_m = p.appearance.shape[0], p.motion.shape[0]
    x_l = concat_rows([p.regions, p.boundary_type, p.caption])
    x_g = concat_rows([p.appearance, p.motion, p.boundary_type, p.caption])
    ones = lambda n: np.ones(n, dtype=bool)  # noqa: E731
    lay_l = _layout([("regions", k), ("type", 1), ("caption", l)],
                    [np.asarray(p.region_valid, dtype=bool), ones(1), ones(l)])
    lay_g = _layout([("appearance", t_a), ("motion", t_m), ("type", 1), ("caption", l)],
                    [ones(t_a), ones(t_m), ones(1), ones(l)])
    return x_l, x_g, lay_l, lay_g


# ---------------------------------------------------------------------------
# layers


def _attention_block(x_q: Tensor, x_kv: Tensor, mask: np.ndarray, params: ModelParams,
                     prefix: str, heads: int, trace: list | None) -> Tensor:
    q = matmul(x_q, params[f"{prefix}.q.weight"])
    k = matmul(x_kv, params[f"{prefix}.k.weight"])
    v = matmul(x_kv, params[f"{prefix}.v.weight"])
    if trace is not None:
        out, weights = multi_head_attention(q, k, v, mask, heads, return_weights=True)
        trace.append((prefix, weights, mask))
    else:
        out = multi_head_attention(q, k, v, mask, heads)
    return _linear(out, params, f"{prefix}.o")


def _add_norm(x: Tensor, y: Tensor, params: ModelParams, prefix: str, eps: float) -> Tensor:
    return layer_norm(x + y, params[f"{prefix}.gain"], params[f"{prefix}.bias"], eps)


def _ffn(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    return _linear(gelu(_linear(x, params, f"{prefix}.in")), params, f"{prefix}.out")


def encode_layer(x_l: Tensor, x_g: Tensor, lay_l: StreamLayout, lay_g: StreamLayout,
                 params: ModelParams, layer: int, cfg: ModelConfig,
                 trace: list | None = None) -> tuple[Tensor, Tensor]:
    """One dual-stream layer: self-attention, cross-attention, feed-forward."""
    eps, heads = cfg.ln_eps, cfg.heads
    p_l, p_g = f"layer{layer}.local", f"layer{layer}.global"

    a_l = _attention_block(x_l, x_l, lay_l.self_mask(), params, f"{p_l}.self", heads, trace)
    a_g = _attention_block(x_g, x_g, lay_g.self_mask(), params, f"{p_g}.self", heads, trace)
    x_l1 = _add_norm(x_l, a_l, params, f"{p_l}.self_norm", eps)
    x_g1 = _add_norm(x_g, a_g, params, f"{p_g}.self_norm", eps)

    cross_l = np.broadcast_to(lay_g.cross_keys(), (lay_l.n_rows, lay_g.n_rows))
    cross_g = np.broadcast_to(lay_l.cross_keys(), (lay_g.n_rows, lay_l.n_rows))
    c_l = _attention_block(x_l1, x_g1, cross_l, params, f"{p_l}.cross", heads, trace)
    c_g = _attention_block(x_g1, x_l1, cross_g, params, f"{p_g}.cross", heads, trace)
    x_l2 = _add_norm(x_l1, c_l, params, f"{p_l}.cross_norm", eps)
    x_g2 = _add_norm(x_g1, c_g, params, f"{p_g}.cross_norm", eps)

    x_l3 = _add_norm(x_l2, _ffn(x_l2, params, f"{p_l}.ffn"), params, f"{p_l}.ffn_norm", eps)
    x_g3 = _add_norm(x_g2, _ffn(x_g2, params, f"{p_g}.ffn"), params, f"{p_g}.ffn_norm", eps)
    return x_l3, x_g3


@dataclass
class ForwardOutput:
    local: Tensor
    global_: Tensor
    fused: Tensor
    attention: list = field(default_factory=list)


def fuse(p_l: Tensor, p_g: Tensor, lambda1: float, lambda2: float) -> Tensor:
    total = lambda1 + lambda2
    return weighted_sum([(lambda1 / total, p_l), (lambda2 / total, p_g)])


def forward(sample: BoundarySample, prefix: Sequence[int], params: ModelParams, cfg: ModelConfig,
            trace_attention: bool = False) -> ForwardOutput:
    """Caption-row vocabulary distributions for a teacher-forced prefix.

    Row t of each output is the distribution of the token following
    ``prefix[t]``. The prefix starts with ``<bos>`` followed by a field tag.
    """
    prefix = list(prefix)
    if len(prefix) > cfg.max_caption_len:
        raise ContractViolation(
            f"prefix of length {len(prefix)} exceeds max_caption_len {cfg.max_caption_len}")
    if not prefix or prefix[0] != BOS:
        raise ContractViolation("caption prefix must start with <bos>")
    if len(prefix) > 1 and prefix[1] not in FIELD_TAG_IDS.values():
        raise ContractViolation("second prefix token must be a field tag")
    trace = [] if trace_attention else None
    proj = project_features(sample, prefix, params, cfg)
    x_l, x_g, lay_l, lay_g = build_streams(proj)
    for i in range(cfg.layers):
        x_l, x_g = encode_layer(x_l, x_g, lay_l, lay_g, params, i, cfg, trace)
    cap_l = slice_rows(x_l, lay_l.caption_start, lay_l.n_rows)
    cap_g = slice_rows(x_g, lay_g.caption_start, lay_g.n_rows)
    p_l = softmax_rows(_linear(cap_l, params, "head.local"))
    p_g = softmax_rows(_linear(cap_g, params, "head.global"))
    return ForwardOutput(p_l, p_g, fuse(p_l, p_g, cfg.lambda1, cfg.lambda2), trace or [])


class DualStreamModel:
    """A config plus its parameters; the unit decoding and checkpoints work with."""

    def __init__(self, config: ModelConfig, params: ModelParams):
        self.config = config
        self.params = params

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int, pretrained_tokens=None) -> "DualStreamModel":
        return cls(config, ModelParams.initialize(config, seed, pretrained_tokens))

    def forward(self, sample: BoundarySample, prefix: Sequence[int],
                trace_attention: bool = False) -> ForwardOutput:
        return forward(sample, prefix, self.params, self.config, trace_attention)

    def parameter_count(self) -> int:
        return self.params.count()
