"""Two-head caption loss, Adam, and the teacher-forced training loop."""

from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import BOS, EOS, FIELD_TAG_IDS, FIELDS, BoundarySample, Dataset
from .model import DualStreamModel, ModelConfig, ModelParams, forward
from .tensor import (
    DimensionError,
    Graph,
    Tensor,
    cross_entropy,
    gradients_for,
    slice_rows,
    weighted_sum,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    max_epochs: int = 10
    batch_size: int = 100
    lambda1: float = 0.5
    lambda2: float = 0.5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_steps: int | None = None
    threads: int = 1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.threads < 1:
            raise ValueError(f"threads must be >= 1, got {self.threads}")


def dual_stream_loss(p_local: Tensor, p_global: Tensor, targets: Sequence[int],
                     lambda1: float, lambda2: float) -> Tensor:
    """−Σₜ [λ1·log P_local(t, yₜ) + λ2·log P_global(t, yₜ)] / T."""
    n = len(targets)
    if p_local.shape[0] != n or p_global.shape[0] != n:
        raise DimensionError(f"{n} targets for probability rows {p_local.shape} and {p_global.shape}")
    return weighted_sum([(lambda1, cross_entropy(p_local, targets)),
                         (lambda2, cross_entropy(p_global, targets))])


@dataclass(frozen=True)
class Example:
    sample: BoundarySample
    field: str
    prefix: tuple[int, ...]
    targets: tuple[int, ...]


def make_examples(samples: Sequence[BoundarySample]) -> list[Example]:
    """One teacher-forced example per (boundary, caption field).

    The decoder input is ``<bos> <tag> w1 … wn`` and the targets are
    ``w1 … wn <eos>``, predicted from the tag row onward.
    """
    out = []
    for s in samples:
        for f in FIELDS:
            words = tuple(s.captions.field(f))
            out.append(Example(s, f, (BOS, FIELD_TAG_IDS[f]) + words, words + (EOS,)))
    return out


def example_loss(ex: Example, params: ModelParams, cfg: ModelConfig,
                 lambda1: float, lambda2: float) -> Tensor:
    out = forward(ex.sample, ex.prefix, params, cfg)
    end = len(ex.prefix)
    return dual_stream_loss(slice_rows(out.local, 1, end), slice_rows(out.global_, 1, end),
                            ex.targets, lambda1, lambda2)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls([np.zeros_like(t.data) for t in params], [np.zeros_like(t.data) for t in params])


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState,
              cfg: TrainConfig) -> None:
    """Bias-corrected Adam update, applied in place in parameter order."""
    for name in params.names():
        if name not in grads:
            raise KeyError(f"no gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for i, (name, p) in enumerate(params.items()):
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


@dataclass
class LossRecord:
    epoch: int
    step: int
    loss: float
    examples: int


@dataclass
class TrainResult:
    model: DualStreamModel
    log: list[LossRecord] = field(default_factory=list)

    def epoch_means(self) -> list[float]:
        sums: dict[int, list[float]] = {}
        for r in self.log:
            acc = sums.setdefault(r.epoch, [0.0, 0])
            acc[0] += r.loss * r.examples
            acc[1] += r.examples
        return [total / n for _, (total, n) in sorted(sums.items())]


def check_compatible(dataset: Dataset, cfg: ModelConfig) -> None:
    if len(dataset.vocab) != cfg.vocab_size:
        raise ValueError(f"dataset vocabulary has {len(dataset.vocab)} tokens, "
                         f"model expects {cfg.vocab_size}")
    h = dataset.header
    if h is not None:
        if len(h.boundary_types) != cfg.n_types:
            raise ValueError(f"dataset has {len(h.boundary_types)} boundary types, "
                             f"model expects {cfg.n_types}")
        widths = {"d_app": h.d_app, "d_mot": h.d_mot, "d_reg": h.d_reg}
        for k, v in widths.items():
            if getattr(cfg, k) != v:
                raise ValueError(f"dataset {k}={v} but model {k}={getattr(cfg, k)}")
    longest = max((len(e.prefix) for e in make_examples(dataset.samples)), default=0)
    if longest > cfg.max_caption_len:
        raise ValueError(f"a caption needs prefix length {longest} > max_caption_len "
                         f"{cfg.max_caption_len}")


def train(dataset: Dataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
          pretrained_tokens=None,
          on_step: Callable[[LossRecord], None] | None = None) -> TrainResult:
    """Teacher-forced Adam training over all (boundary, field) examples.

    Examples are shuffled each epoch with a generator seeded from
    ``train_cfg.seed``; parameters are initialized from the same seed. Within a
    batch, per-example gradients may be computed on ``threads`` workers but are
    always summed in example order, so results do not depend on the thread count.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    model_cfg = dataclasses.replace(model_cfg, lambda1=train_cfg.lambda1, lambda2=train_cfg.lambda2)
    check_compatible(dataset, model_cfg)
    model = DualStreamModel.initialize(model_cfg, train_cfg.seed, pretrained_tokens)
    params = model.params
    plist = list(params)
    names = params.names()
    state = AdamState.zeros_like(params)
    examples = make_examples(dataset.samples)
    order_rng = np.random.default_rng([train_cfg.seed, 1])
    lam1, lam2 = train_cfg.lambda1, train_cfg.lambda2
    result = TrainResult(model)

    def per_example(ex: Example):
        with Graph() as graph:
            loss = example_loss(ex, params, model_cfg, lam1, lam2)
        return loss.item(), gradients_for(loss, graph, plist)

    pool = ThreadPoolExecutor(train_cfg.threads) if train_cfg.threads > 1 else None
    step = 0
    try:
        for epoch in range(train_cfg.max_epochs):
            order = order_rng.permutation(len(examples))
            for start in range(0, len(order), train_cfg.batch_size):
                if train_cfg.max_steps is not None and step >= train_cfg.max_steps:
                    return result
                batch = [examples[i] for i in order[start:start + train_cfg.batch_size]]
                outputs = list(pool.map(per_example, batch)) if pool else [per_example(e) for e in batch]
                total = [np.zeros_like(p.data) for p in plist]
                batch_loss = 0.0
                for loss_value, grads in outputs:
                    batch_loss += loss_value
                    for acc, g in zip(total, grads):
                        acc += g
                n = len(batch)
                adam_step(params, {k: g / n for k, g in zip(names, total)}, state, train_cfg)
                step += 1
                record = LossRecord(epoch, step, batch_loss / n, n)
                result.log.append(record)
                if on_step is not None:
                    on_step(record)
            log.info("epoch %d mean loss %.6f", epoch, result.epoch_means()[-1])
    finally:
        if pool is not None:
            pool.shutdown()
    return result


def write_loss_csv(path, records: Sequence[LossRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,step,loss\n")
        for r in records:
            fh.write(f"{r.epoch},{r.step},{r.loss!r}\n")
