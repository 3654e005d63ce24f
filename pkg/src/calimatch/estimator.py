"""scikit-learn compatible wrapper around the training loop."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.model_selection import train_test_split
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .config import TrainConfig, apply_preset
from .data import TrainingView
from .metrics import OOD_DECISION, ood_scores
from .trainer import predict_outputs, train


class CaliMatchClassifier(ClassifierMixin, BaseEstimator):
    """Open-set semi-supervised classifier with calibrated pseudo-label selection.

    ``fit`` takes labeled data plus an optional pool of unlabeled samples that
    may contain classes absent from ``y``. After fitting, ``ood_score`` gives
    the probability that a sample belongs to none of the known classes.
    Predictions use the weights after the final epoch.
    """

    def __init__(self, preset="calimatch", hidden_dims=(64, 64), epochs=30, warmup_epochs=5,
                 iterations_per_epoch=None, lr=0.003, batch_size_labeled=50,
                 batch_size_unlabeled=50, lambda_ood=0.1, lambda_ocal=0.001, lambda_sc=0.5,
                 tau1=0.5, tau2=0.95, n_bins=30, weak_sigma=0.1, strong_sigma=0.4,
                 strong_dropout=0.0, validation_fraction=0.1, random_state=0):
        self.preset = preset
        self.hidden_dims = hidden_dims
        self.epochs = epochs
        self.warmup_epochs = warmup_epochs
        self.iterations_per_epoch = iterations_per_epoch
        self.lr = lr
        self.batch_size_labeled = batch_size_labeled
        self.batch_size_unlabeled = batch_size_unlabeled
        self.lambda_ood = lambda_ood
        self.lambda_ocal = lambda_ocal
        self.lambda_sc = lambda_sc
        self.tau1 = tau1
        self.tau2 = tau2
        self.n_bins = n_bins
        self.weak_sigma = weak_sigma
        self.strong_sigma = strong_sigma
        self.strong_dropout = strong_dropout
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        params = self.get_params()
        cfg = TrainConfig(
            **{k: v for k, v in params.items()
               if k not in ("preset", "hidden_dims", "validation_fraction", "random_state")},
            hidden_dims=[int(h) for h in self.hidden_dims],
            seed=int(self.random_state or 0),
        )
        return apply_preset(cfg, self.preset)

    def fit(self, X, y, X_unlabeled=None, X_val=None, y_val=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        config = self._config()
        self.label_encoder_ = LabelEncoder().fit(y)
        self.classes_ = self.label_encoder_.classes_
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        y_enc = self.label_encoder_.transform(y)

        if X_val is None:
            counts = np.bincount(y_enc)
            stratify = y_enc if counts.min() >= 2 else None
            X, X_val, y_enc, y_val_enc = train_test_split(
                X, y_enc, test_size=self.validation_fraction,
                random_state=config.seed, stratify=stratify)
        else:
            X_val = check_array(X_val, dtype=np.float64)
            y_val_enc = self.label_encoder_.transform(np.asarray(y_val))

        if X_unlabeled is None:
            X_unlabeled = np.zeros((0, X.shape[1]))
        else:
            X_unlabeled = check_array(X_unlabeled, dtype=np.float64)
        for name, arr in (("X_unlabeled", X_unlabeled), ("X_val", X_val)):
            if len(arr) and arr.shape[1] != X.shape[1]:
                raise ValueError(f"{name} has {arr.shape[1]} features, expected {X.shape[1]}")
        if not len(X_unlabeled) and not config.disable_unlabeled:
            config = config.replace(disable_unlabeled=True)

        view = TrainingView(X, y_enc, X_unlabeled, X_val, y_val_enc, len(self.classes_))
        result = train(view, config)
        self.model_ = result.model
        self.config_ = config
        self.n_features_in_ = X.shape[1]
        self.gamma_table_, self.delta_table_ = result.gamma, result.delta
        return self

    def _outputs(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return predict_outputs(self.model_, X)

    def predict_proba(self, X) -> np.ndarray:
        """Class probabilities; temperature-scaled when calibration is trained."""
        out = self._outputs(X)
        probs = out.p_s if self.config_.uses_mcal else out.p
        return probs.numpy()

    def predict(self, X) -> np.ndarray:
        out = self._outputs(X)
        return self.classes_[out.p.argmax(dim=1).numpy()]

    def score_samples(self, X) -> np.ndarray:
        """Seen-class score: higher means more likely a known class."""
        s, _ = ood_scores(self._outputs(X), self.config_.uses_ood_head)
        return s

    def ood_score(self, X) -> np.ndarray:
        _, u = ood_scores(self._outputs(X), self.config_.uses_ood_head)
        return u

    def predict_ood(self, X) -> np.ndarray:
        return self.ood_score(X) > OOD_DECISION

    @property
    def temperatures_(self) -> tuple:
        check_is_fitted(self, "model_")
        with torch.no_grad():
            return float(self.model_.T_M), float(self.model_.T_O)
