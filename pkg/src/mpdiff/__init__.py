"""Magnitude-preserving conditional diffusion on a numpy autograd core."""

from .diffusion import NoiseSchedule, SamplerConfig, heun_sample, precondition, training_objective
from .ema import EmaSnapshotStore, gamma_from_sigma_rel, posthoc_reconstruct, power_ema_update
from .features import MelConfig, Standardizer, fit_standardizer, mel_encode
from .mp import FilmHeads, MpConv1d, magnitude, mp_film, mp_silu, mp_sum
from .net import DenoiserConfig, DenoiserNet
from .rng import Rng
from .tensor import Tensor
from .toydata import ToySpec, decode_templates, gen_toy_dataset, load_dataset
from .train import load_model, train
from .workflows import evaluate, sample_dataset

__all__ = [
    "DenoiserConfig", "DenoiserNet", "EmaSnapshotStore", "FilmHeads", "MelConfig", "MpConv1d",
    "NoiseSchedule", "Rng", "SamplerConfig", "Standardizer", "Tensor", "ToySpec",
    "decode_templates", "evaluate", "fit_standardizer", "gamma_from_sigma_rel", "gen_toy_dataset", "heun_sample",
    "load_dataset", "load_model", "magnitude", "mel_encode", "mp_film", "mp_silu", "mp_sum", "posthoc_reconstruct",
    "power_ema_update", "precondition", "sample_dataset", "train", "training_objective",
]
__version__ = "0.1.0"
