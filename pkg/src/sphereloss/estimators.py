"""scikit-learn compatible wrappers.

``HypersphereNormalizer`` projects rows onto the unit sphere;
``MarginEmbeddingClassifier`` trains a small dense embedding network with an
angular-margin loss and exposes ``predict``/``predict_proba`` (nearest class
center by cosine) and ``transform`` (unit-norm embeddings), so it drops into
pipelines, grid searches and ``clone``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .losses import SOFTMAX, MarginLossSpec, log_softmax
from .nn import LossStage, TrainConfig, accuracy, dense_embedding_net, train
from .sphere import normalize


class HypersphereNormalizer(TransformerMixin, BaseEstimator):
    """Stateless L2 row normalization; zero rows raise ``ZeroVector``."""

    def fit(self, X, y=None):
        X = check_array(X)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return normalize(X)


class MarginEmbeddingClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Dense embedding net trained from scratch with a margin loss.

    Parameters
    ----------
    loss : str
        Loss variant name, e.g. ``"LiArcFace"``, ``"ArcFace"``, ``"NSoftmax"``.
    s, m : float
        Logit scale and margin.
    hidden, embedding_dim : int
        Widths of the two dense layers.
    learning_rate, momentum, weight_decay, embedding_wd_mult : float
        SGD settings; the multiplier applies to the embedding layer.
    batch_size, max_steps : int
    pretrain_steps : int
        Optional N-Softmax steps run before the margin loss (two-stage regime).
    arcface_clip : bool
    random_state : int
    """

    def __init__(self, loss="LiArcFace", s=64.0, m=0.4, hidden=64, embedding_dim=8, learning_rate=0.1,
                 momentum=0.9, weight_decay=5e-4, embedding_wd_mult=10.0, batch_size=128, max_steps=2000,
                 pretrain_steps=0, arcface_clip=False, random_state=0):
        self.loss = loss
        self.s = s
        self.m = m
        self.hidden = hidden
        self.embedding_dim = embedding_dim
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.embedding_wd_mult = embedding_wd_mult
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.pretrain_steps = pretrain_steps
        self.arcface_clip = arcface_clip
        self.random_state = random_state

    def _loss_spec(self) -> MarginLossSpec:
        return MarginLossSpec(self.loss, s=self.s, m=self.m, arcface_clip=self.arcface_clip)

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        check_classification_targets(y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        self.n_features_in_ = X.shape[1]
        spec = self._loss_spec()
        stages = []
        if self.pretrain_steps:
            stages.append((MarginLossSpec("NSoftmax", s=self.s), int(self.pretrain_steps)))
        stages.append((spec, int(self.max_steps)))
        loss_stages, start = [], 0
        for st, n in stages:
            loss_stages.append(LossStage(st, start, start + n))
            start += n
        config = TrainConfig(
            lr_schedule=[(0, self.learning_rate)], momentum=self.momentum, weight_decay=self.weight_decay,
            wd_mult={"embedding": self.embedding_wd_mult}, batch_size=self.batch_size, max_steps=start,
            seed=self.random_state, loss_stages=loss_stages,
        )
        self.network_ = dense_embedding_net(X.shape[1], self.hidden, self.embedding_dim, len(self.classes_), seed=self.random_state)
        self.history_ = train(self.network_, (X, y_idx), config)
        self.diverged_ = self.history_.diverged
        self.train_accuracy_ = None if self.diverged_ else accuracy(self.network_, X, y_idx, spec)
        return self

    def _check_input(self, X):
        check_is_fitted(self, "network_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def transform(self, X):
        """Unit-norm embeddings."""
        X = self._check_input(X)
        return normalize(self.network_.embed(X))

    def decision_function(self, X):
        X = self._check_input(X)
        E = self.network_.embed(X)
        if self.loss == SOFTMAX:
            return E @ self.network_.head["W"] + self.network_.head["b"]
        return normalize(E) @ normalize(self.network_.head["W"], axis=0)

    def predict_proba(self, X):
        """Softmax of the scaled, margin-free logits."""
        z = self.decision_function(X)
        if self.loss != SOFTMAX:
            z = self.s * z
        return np.exp(log_softmax(z))

    def predict(self, X):
        z = self.decision_function(X)
        return self.classes_[np.argmax(z, axis=1)]
