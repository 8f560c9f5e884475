"""Handwritten letter classification from pen sensor recordings with a
convolutional-recurrent network (CNN-LSTM-Net12) on a small numpy autodiff
engine."""

__version__ = "0.1.0"

from .autodiff import Tensor, backward, finite_diff_check, no_grad, precision, set_precision
from .dataset import SplitConfig, make_batches, synth_generate, writer_exclusive_split
from .estimators import CNNLSTMClassifier, FourierResampler, PenPreprocessor, SignedLogScaler
from .labels import LABELS, LETTERS, LabelMap
from .model import CNNLSTMNet, ModelSpec
from .preprocessing import PreprocConfig, RawSample, fourier_resample, preprocess, signed_log
from .training import AdamState, TrainConfig, checkpoint_load, checkpoint_save, evaluate, fit

__all__ = [
    "AdamState",
    "CNNLSTMClassifier",
    "CNNLSTMNet",
    "FourierResampler",
    "LABELS",
    "LETTERS",
    "LabelMap",
    "ModelSpec",
    "PenPreprocessor",
    "PreprocConfig",
    "RawSample",
    "SignedLogScaler",
    "SplitConfig",
    "Tensor",
    "TrainConfig",
    "backward",
    "checkpoint_load",
    "checkpoint_save",
    "evaluate",
    "finite_diff_check",
    "fit",
    "fourier_resample",
    "make_batches",
    "no_grad",
    "precision",
    "preprocess",
    "set_precision",
    "signed_log",
    "synth_generate",
    "writer_exclusive_split",
]
