"""Estimator-style facade over the training pipeline.

SdanetClassifier follows the scikit-learn protocol (all hyperparameters as
plain ``__init__`` keywords, ``get_params``/``set_params`` by introspection,
``fit`` returns self, fitted state in trailing-underscore attributes) without
importing scikit-learn, so ``sklearn.base.clone`` and friends work on it when
that library is around.
"""

from __future__ import annotations

import inspect
import tempfile
from dataclasses import replace

import numpy as np

from .datapipe import PairDataset, Recording, SampleBatch, build_pair_dataset, pairs_to_batch
from .errors import ShapeError
from .model import SdanetConfig, forward
from .synth import evaluate
from .trainer import TrainConfig, fit


def check_window_arrays(eeg, stim_a, stim_b, config: SdanetConfig):
    """Validate and canonicalize a prediction batch to float64 [B, T, C] arrays."""
    def canon(arr, channels, what):
        a = np.asarray(arr, dtype=np.float64)
        if a.ndim == 2:
            a = a[None, ...]
        if a.ndim != 3:
            raise ShapeError(f"{what} must be [T, C] or [B, T, C], got ndim {np.asarray(arr).ndim}")
        if a.shape[1] != config.window_samples or a.shape[2] != channels:
            raise ShapeError(
                f"{what} must be [B, {config.window_samples}, {channels}], got {a.shape}"
            )
        if not np.all(np.isfinite(a)):
            raise ValueError(f"{what} contains non-finite values")
        return a

    e = canon(eeg, config.eeg_channels, "eeg")
    a = canon(stim_a, config.stimulus_channels, "stim_a")
    b = canon(stim_b, config.stimulus_channels, "stim_b")
    if not (e.shape[0] == a.shape[0] == b.shape[0]):
        raise ShapeError(f"batch sizes differ: {e.shape[0]}, {a.shape[0]}, {b.shape[0]}")
    return e, a, b


class SdanetClassifier:
    """Match-mismatch classifier with a fit/predict surface.

    ``fit`` accepts a list of :class:`Recording` (windows are sampled
    internally) or a prebuilt :class:`PairDataset`. ``predict`` accepts a list
    of window pairs, a :class:`SampleBatch`, or an ``(eeg, stim_a, stim_b)``
    array triple; label 1 means slot A holds the matched stimulus.
    """

    def __init__(self, feature_channels=16, dilations=(1, 2, 4, 8), acm_enabled=True,
                 sscm_enabled=True, eeg_channels=64, window_samples=192, lr0=3e-4,
                 weight_decay=1e-4, dropout=0.2, epochs=100, batch_size=64,
                 subjects_per_batch=8, plateau_patience=5, lr_factor=3.0, min_lr=1e-6,
                 average_last_k=10, steps_per_epoch=0, augment=None, split=(0.6, 0.2, 0.2),
                 seed=0, out_dir=None):
        self.feature_channels = feature_channels
        self.dilations = dilations
        self.acm_enabled = acm_enabled
        self.sscm_enabled = sscm_enabled
        self.eeg_channels = eeg_channels
        self.window_samples = window_samples
        self.lr0 = lr0
        self.weight_decay = weight_decay
        self.dropout = dropout
        self.epochs = epochs
        self.batch_size = batch_size
        self.subjects_per_batch = subjects_per_batch
        self.plateau_patience = plateau_patience
        self.lr_factor = lr_factor
        self.min_lr = min_lr
        self.average_last_k = average_last_k
        self.steps_per_epoch = steps_per_epoch
        self.augment = augment
        self.split = split
        self.seed = seed
        self.out_dir = out_dir

    # -- sklearn protocol -------------------------------------------------

    @classmethod
    def _param_names(cls):
        sig = inspect.signature(cls.__init__)
        return [name for name in sig.parameters if name != "self"]

    def get_params(self, deep=True):
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        valid = set(self._param_names())
        for key, value in params.items():
            if key not in valid:
                raise ValueError(f"invalid parameter {key!r} for SdanetClassifier")
            setattr(self, key, value)
        return self

    # -- configuration ----------------------------------------------------

    def _model_config(self) -> SdanetConfig:
        return SdanetConfig(
            feature_channels=self.feature_channels,
            dilations=tuple(self.dilations),
            acm_enabled=self.acm_enabled,
            sscm_enabled=self.sscm_enabled,
            dropout_rate=self.dropout,
            eeg_channels=self.eeg_channels,
            window_samples=self.window_samples,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            lr0=self.lr0,
            weight_decay=self.weight_decay,
            dropout=self.dropout,
            epochs=self.epochs,
            batch_size=self.batch_size,
            subjects_per_batch=self.subjects_per_batch,
            plateau_patience=self.plateau_patience,
            lr_factor=self.lr_factor,
            min_lr=self.min_lr,
            average_last_k=self.average_last_k,
            steps_per_epoch=self.steps_per_epoch,
            seed=self.seed,
        )

    # -- fitting ----------------------------------------------------------

    def fit(self, X, y=None):
        """Train from recordings or a prebuilt pair dataset; returns self."""
        if isinstance(X, PairDataset):
            dataset = X
        else:
            recordings = list(X)
            if not recordings or not isinstance(recordings[0], Recording):
                raise TypeError("fit expects a PairDataset or a list of Recording")
            dataset = build_pair_dataset(recordings, self.seed, tuple(self.split))
        model_cfg = self._model_config()
        train_cfg = self._train_config()
        if self.out_dir is not None:
            result = fit(dataset, model_cfg, train_cfg, self.out_dir, self.augment)
        else:
            with tempfile.TemporaryDirectory(prefix="sdanet-fit-") as tmp:
                result = fit(dataset, model_cfg, train_cfg, tmp, self.augment)
        self.params_ = result.store
        self.config_ = replace(result.model_config, dropout_rate=0.0)
        self.records_ = result.records
        self.val_loss_ = result.averaged_val_loss
        self.val_accuracy_ = result.averaged_val_accuracy
        self.classes_ = np.array([0, 1])
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise RuntimeError("this SdanetClassifier instance is not fitted yet")

    def _as_batch(self, X) -> SampleBatch:
        if isinstance(X, SampleBatch):
            return X
        if isinstance(X, (tuple, list)) and len(X) == 3 and not isinstance(X[0], list):
            e, a, b = check_window_arrays(X[0], X[1], X[2], self.config_)
            return SampleBatch(e, a, b, labels=np.full(e.shape[0], -1, dtype=np.int64))
        if isinstance(X, list):
            return pairs_to_batch(X)
        raise TypeError("predict expects window pairs, a SampleBatch, or (eeg, stim_a, stim_b)")

    # -- inference --------------------------------------------------------

    def predict_proba(self, X):
        """Columns [P(label 0), P(label 1)]; label 1 = slot A is the match."""
        self._check_fitted()
        batch = self._as_batch(X)
        trace = forward(self.params_, batch.eeg, batch.stim_a, batch.stim_b, self.config_,
                        mode="eval")
        p1 = trace.p.value
        return np.stack([1.0 - p1, p1], axis=1)

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] > 0.5).astype(np.int64)

    def score(self, X, y=None):
        """Accuracy; labels come from the pairs themselves when y is omitted."""
        self._check_fitted()
        if y is None:
            if not (isinstance(X, list) and X and not isinstance(X[0], np.ndarray)):
                raise ValueError("score without y needs a list of window pairs")
            return evaluate(self.params_, X, self.config_).accuracy
        batch = self._as_batch(X)
        preds = self.predict(batch)
        y = np.asarray(y, dtype=np.int64)
        if y.shape != preds.shape:
            raise ShapeError(f"y shape {y.shape} does not match predictions {preds.shape}")
        return float((preds == y).mean())
