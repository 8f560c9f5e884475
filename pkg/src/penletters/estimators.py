"""scikit-learn compatible wrappers around the preprocessing steps and the
network, so they compose with ``Pipeline``, ``clone`` and grid search."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .autodiff import Tensor, precision
from .dataset import make_batches
from .functional import softmax
from .labels import LABELS, LETTERS
from .model import ModelSpec
from .preprocessing import (
    DEFAULT_KEEP,
    GYRO_CHANNELS,
    CalibrationTable,
    PreprocConfig,
    ProcessedSample,
    RawSample,
    fourier_resample,
    preprocess,
    signed_exp,
    signed_log,
)
from .training import TrainConfig, evaluate, fit, predict_logits

__all__ = ["SignedLogScaler", "FourierResampler", "PenPreprocessor", "CNNLSTMClassifier"]


class SignedLogScaler(TransformerMixin, BaseEstimator):
    """Stateless ``sign(x) * ln(|x| + 1)`` with its exact inverse."""

    def fit(self, X, y=None):
        check_array(X, allow_nd=True, ensure_2d=False)
        self.fitted_ = True
        return self

    def transform(self, X):
        check_is_fitted(self)
        return signed_log(check_array(X, allow_nd=True, ensure_2d=False))

    def inverse_transform(self, X):
        check_is_fitted(self)
        return signed_exp(check_array(X, allow_nd=True, ensure_2d=False))


class FourierResampler(TransformerMixin, BaseEstimator):
    """Resample every series to ``target_length`` along the last axis.

    ``X`` is either an array ``[..., L]`` or a sequence of arrays whose last
    axes differ in length; the result is always one stacked array.
    """

    def __init__(self, target_length: int = 256):
        self.target_length = target_length

    def fit(self, X, y=None):
        if self.target_length < 2:
            raise ValueError("target_length must be >= 2")
        self.fitted_ = True
        return self

    def transform(self, X):
        check_is_fitted(self)
        if isinstance(X, np.ndarray):
            return fourier_resample(X, self.target_length)
        return np.stack([fourier_resample(np.asarray(x, dtype=np.float64), self.target_length) for x in X])


class PenPreprocessor(TransformerMixin, BaseEstimator):
    """Full per-sample pipeline mapping ``RawSample`` objects to ``[n, C, T]``."""

    def __init__(self, keep_channels: Sequence[str] = DEFAULT_KEEP, gyro_channels: Sequence[str] = GYRO_CHANNELS,
                 target_length: int = 256, apply_log: bool = True,
                 calibration: Optional[CalibrationTable] = None):
        self.keep_channels = keep_channels
        self.gyro_channels = gyro_channels
        self.target_length = target_length
        self.apply_log = apply_log
        self.calibration = calibration

    def fit(self, X, y=None):
        self.config_ = PreprocConfig(tuple(self.keep_channels), tuple(self.gyro_channels),
                                     self.target_length, self.apply_log, self.calibration)
        return self

    def transform(self, X: Sequence[RawSample]) -> np.ndarray:
        check_is_fitted(self, "config_")
        return np.stack([preprocess(raw, self.config_).data for raw in X])


class CNNLSTMClassifier(ClassifierMixin, BaseEstimator):
    """CNN-LSTM-Net12 letter classifier on preprocessed ``[n, C, T]`` arrays.

    ``y`` holds letters (``'a'``..``'Z'``) or class indices 0..51.  ``classes_``
    always lists all 52 classes in label-map order, in the same form as ``y``.
    """

    def __init__(self, exp_mode: str = "signed", epochs: int = 500, batch_size: int = 64, lr: float = 3e-5,
                 weight_decay: float = 1e-3, random_state: int = 0, precision: str = "f32"):
        self.exp_mode = exp_mode
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.random_state = random_state
        self.precision = precision

    def _encode(self, y) -> np.ndarray:
        y = np.asarray(y)
        if y.dtype.kind in "US":
            return np.array([LABELS.index(str(c)) for c in y], dtype=np.int64)
        idx = y.astype(np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= len(LETTERS)):
            raise ValueError("integer labels must lie in [0, 52)")
        return idx

    def _check_X(self, X) -> np.ndarray:
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if X.ndim != 3:
            raise ValueError(f"expected X of shape [n_samples, channels, length], got {X.shape}")
        return X

    def fit(self, X, y):
        X = self._check_X(X)
        y_idx = self._encode(y)
        if len(y_idx) != len(X):
            raise ValueError(f"X has {len(X)} samples but y has {len(y_idx)}")
        y_arr = np.asarray(y)
        self.classes_ = np.array(list(LETTERS)) if y_arr.dtype.kind in "US" else np.arange(len(LETTERS))
        self.spec_ = ModelSpec(input_channels=X.shape[1], exp_mode=self.exp_mode)
        config = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, seed=self.random_state,
                             checkpoint_every=self.epochs, lr=self.lr, weight_decay=self.weight_decay)
        samples = [ProcessedSample(x, int(t), "") for x, t in zip(X, y_idx)]
        with precision(self.precision):
            result = fit(samples, [], self.spec_, config)
        self.model_ = result.model
        self.metrics_ = result.metrics
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = self._check_X(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} channels, the model was fitted on {self.n_features_in_}")
        with precision(self.precision):
            chunks = [predict_logits(self.model_, Tensor(X[i : i + self.batch_size]))
                      for i in range(0, len(X), self.batch_size)]
        return np.concatenate(chunks).astype(np.float64)

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def evaluate(self, X, y):
        """Loss, accuracy and confusion matrix as produced by the training harness."""
        check_is_fitted(self, "model_")
        X = self._check_X(X)
        samples = [ProcessedSample(x, int(t), "") for x, t in zip(X, self._encode(y))]
        with precision(self.precision):
            return evaluate(self.model_, make_batches(samples, self.batch_size))
