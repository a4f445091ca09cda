"""scikit-learn compatible wrappers around the training drivers.

The estimators take plain arrays, so they slot into pipelines, grid
searches and ``clone``; the functional API underneath works on
:class:`~ferpair.datamodel.Dataset` objects.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .datamodel import NUM_CLASSES, Dataset, PairKey, all_pairs
from .exceptions import ConfigError, DataError
from .heads import (
    DETACHED,
    STACKED,
    MultiOutputHead,
    PairwiseHeadDict,
    forward_general,
    pair_eval_general,
    predict_pair,
)
from .losses import AamParams, softmax
from .training import TrainConfig, train_general, train_pairwise


def check_labels(y) -> np.ndarray:
    """Expression labels as int64 in 0..7."""
    y = np.asarray(y)
    if y.dtype.kind == "f":
        if not np.all(np.mod(y, 1) == 0):
            raise DataError("expression labels must be integers")
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= NUM_CLASSES):
        raise DataError(f"expression labels must lie in 0..{NUM_CLASSES - 1}")
    return y


def _unit_column(v, n, name):
    if v is None:
        return np.zeros(n)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape != (n,):
        raise DataError(f"{name} must have {n} entries")
    return v


def to_dataset(X, y, valence=None, arousal=None, landmarks=None) -> Dataset:
    X, y = check_X_y(X, y, dtype=np.float64)
    y = check_labels(y)
    n = X.shape[0]
    lm = None if landmarks is None else check_array(landmarks, dtype=np.float64)
    return Dataset([str(i) for i in range(n)], X, y, _unit_column(valence, n, "valence"),
                   _unit_column(arousal, n, "arousal"), lm)


def _resolve_pair(pair) -> PairKey:
    if isinstance(pair, PairKey):
        return pair
    if isinstance(pair, str):
        return PairKey.parse(pair)
    a, b = pair
    return PairKey.of(a, b)


class MultiHeadClassifier(ClassifierMixin, BaseEstimator):
    """Expression classifier trained jointly with valence/arousal/landmark heads.

    When ``valence``/``arousal`` are not passed to :meth:`fit` their heads
    get zero loss weight. ``classes_`` is always ``0..7``.
    """

    def __init__(self, *, expression_loss="softmax", s=64.0, m=0.5, regression="signed_mse", kappa=1.0,
                 loss_weights=(1.0, 1.0, 1.0, 1.0), learning_rate=0.01, epochs=40, batch_size=256,
                 weight_decay=5e-4, sampler="natural", cap_multiplier=2.0, rop_patience=5, rop_factor=0.25,
                 rop_monitor="train", random_state=0):
        self.expression_loss = expression_loss
        self.s = s
        self.m = m
        self.regression = regression
        self.kappa = kappa
        self.loss_weights = loss_weights
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.sampler = sampler
        self.cap_multiplier = cap_multiplier
        self.rop_patience = rop_patience
        self.rop_factor = rop_factor
        self.rop_monitor = rop_monitor
        self.random_state = random_state

    def _config(self, has_va: bool, has_lm: bool) -> TrainConfig:
        w = list(self.loss_weights)
        if not has_va:
            w[1] = w[2] = 0.0
        if not has_lm:
            w[3] = 0.0
        return TrainConfig(
            initial_lr=self.learning_rate, epochs=self.epochs, batch_size=self.batch_size,
            weight_decay=self.weight_decay, seed=int(self.random_state or 0), sampler=self.sampler,
            cap_multiplier=self.cap_multiplier, expression_loss=self.expression_loss,
            aam=AamParams(self.s, self.m), regression=self.regression, kappa=self.kappa,
            loss_weights=tuple(w), rop_patience=self.rop_patience, rop_factor=self.rop_factor,
            rop_monitor=self.rop_monitor,
        )

    def fit(self, X, y, valence=None, arousal=None, landmarks=None, eval_set=None):
        """Train on features ``X`` (n, D) and expression labels ``y``.

        ``eval_set`` is an optional ``(X_val, y_val)`` tuple used for the
        per-epoch validation columns of ``history_``.
        """
        train = to_dataset(X, y, valence, arousal, landmarks)
        val = None
        if eval_set is not None:
            val = to_dataset(*eval_set)
        has_va = valence is not None or arousal is not None
        self.config_ = self._config(has_va, landmarks is not None)
        self.head_, self.history_ = train_general(train, val, self.config_)
        self.classes_ = np.arange(NUM_CLASSES)
        self.n_features_in_ = train.feature_dim
        return self

    @classmethod
    def from_head(cls, head: MultiOutputHead, **params) -> MultiHeadClassifier:
        """Wrap an already trained head (for example a loaded checkpoint)."""
        est = cls(**params)
        est.head_ = head
        est.history_ = []
        est.classes_ = np.arange(head.n_classes)
        est.n_features_in_ = head.feature_dim
        return est

    def _X(self, X):
        check_is_fitted(self, "head_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise DataError(f"X has {X.shape[1]} features, the model expects {self.n_features_in_}")
        return X

    def decision_function(self, X):
        return self.head_.expression.forward(self._X(X))

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        return np.argmax(self.decision_function(X), axis=1)

    def predict_pair(self, X, pair):
        """Restricted argmax over the two classes of ``pair``."""
        return pair_eval_general(self.head_, self._X(X), _resolve_pair(pair))

    def predict_valence_arousal(self, X):
        out = forward_general(self.head_, self._X(X))
        return np.column_stack([out.valence, out.arousal])


class PairwiseDictionaryClassifier(ClassifierMixin, BaseEstimator):
    """One 2-way head per class pair.

    ``mode="stacked"`` feeds each pair head the expression logits of
    ``general`` (a fitted :class:`MultiHeadClassifier` or a
    :class:`~ferpair.heads.MultiOutputHead`); ``mode="detached"`` feeds the raw
    features. :meth:`predict` combines the pair heads by one-vs-one voting,
    ties going to the lower class index.
    """

    def __init__(self, *, mode=DETACHED, general=None, pairs=None, learning_rate=1e-4, epochs=30,
                 batch_size=256, weight_decay=5e-4, rop_patience=5, rop_factor=0.25, n_jobs=1, random_state=0):
        self.mode = mode
        self.general = general
        self.pairs = pairs
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.rop_patience = rop_patience
        self.rop_factor = rop_factor
        self.n_jobs = n_jobs
        self.random_state = random_state

    def _general_head(self):
        g = self.general
        if g is None:
            return None
        if isinstance(g, MultiHeadClassifier):
            check_is_fitted(g, "head_")
            return g.head_
        if isinstance(g, MultiOutputHead):
            return g
        raise ConfigError("general must be a fitted MultiHeadClassifier or a MultiOutputHead")

    def fit(self, X, y):
        data = to_dataset(X, y)
        general = self._general_head()
        if self.mode == STACKED and general is None:
            raise ConfigError("stacked mode requires a general head")
        keys = all_pairs() if self.pairs is None else [_resolve_pair(p) for p in self.pairs]
        config = TrainConfig.pairwise_defaults(
            initial_lr=self.learning_rate, epochs=self.epochs, batch_size=self.batch_size,
            weight_decay=self.weight_decay, rop_patience=self.rop_patience, rop_factor=self.rop_factor,
            seed=int(self.random_state or 0),
        )
        self.general_head_ = general
        self.dict_, self.history_, self.skipped_ = train_pairwise(
            data, keys, general, config, self.mode, jobs=int(self.n_jobs or 1))
        self.classes_ = np.arange(NUM_CLASSES)
        self.n_features_in_ = data.feature_dim
        return self

    @classmethod
    def from_dict(cls, pairs: PairwiseHeadDict, general: MultiOutputHead | None = None) -> PairwiseDictionaryClassifier:
        est = cls(mode=pairs.mode, general=general)
        est.general_head_ = general
        est.dict_ = pairs
        est.history_ = {}
        est.skipped_ = []
        est.classes_ = np.arange(NUM_CLASSES)
        est.n_features_in_ = pairs.feature_dim
        return est

    def _X(self, X):
        check_is_fitted(self, "dict_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise DataError(f"X has {X.shape[1]} features, the model expects {self.n_features_in_}")
        return X

    def predict_pair(self, X, pair):
        return predict_pair(self.dict_, self.general_head_, self._X(X), _resolve_pair(pair))

    def predict(self, X):
        X = self._X(X)
        votes = np.zeros((X.shape[0], NUM_CLASSES), dtype=np.int64)
        rows = np.arange(X.shape[0])
        for key in self.dict_.keys():
            votes[rows, predict_pair(self.dict_, self.general_head_, X, key)] += 1
        return np.argmax(votes, axis=1)
