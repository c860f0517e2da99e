"""Dual-stream transformer for generic event boundary captioning.

A from-scratch float64 autodiff engine (:mod:`dualstream.tensor`) with compiled
hot kernels and a numpy fallback (:mod:`dualstream.kernels`), the two-stream
model, greedy and word-level ensemble decoding, training, and ROUGE-L /
CIDEr-D evaluation.
"""

from .data import BoundarySample, CaptionTriplet, Dataset, Vocabulary, load_dataset, synth_dataset
from .decoding import ensemble_decode, greedy_decode
from .kernels import BACKEND as KERNEL_BACKEND
from .metrics import EvalReport, cider_d, rouge_l, triplet_average
from .model import DualStreamModel, ModelConfig, ModelParams, forward, parameter_count
from .training import TrainConfig, adam_step, dual_stream_loss, train

__version__ = "0.1.0"

__all__ = [
    "BoundarySample", "CaptionTriplet", "Dataset", "DualStreamModel", "EvalReport",
    "KERNEL_BACKEND", "ModelConfig", "ModelParams", "TrainConfig", "Vocabulary", "adam_step",
    "cider_d", "dual_stream_loss", "ensemble_decode", "forward", "greedy_decode", "load_dataset",
    "parameter_count", "rouge_l", "synth_dataset", "train", "triplet_average",
]
