"""sklearn-style front doors for the local nets and the matcher.

These wrap the functional core in fit/predict estimators with get_params,
so local training slots into sklearn pipelines and the matcher's
hyperparameters can be searched with the usual tooling.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .deep import match_multilayer
from .matching import MatchSchedule, MatchTimings, PriorConfig
from .nets import MLPParams, TrainConfig, forward, init_params, train
from .validation import as_float_matrix, as_labels

__all__ = ["MLPClassifier", "FederatedMatcher"]


class MLPClassifier(BaseEstimator, ClassifierMixin):
    """Minimal MLP classifier over the numpy training core.

    Labels must be 0..K-1. ``random_state`` is mandatory and fully
    determines initialization and minibatch shuffling.
    """

    def __init__(self, hidden_layer_sizes=(100,), activation="relu",
                 learning_rate=0.01, l2=1e-6, batch_size=32, epochs=10,
                 optimizer="amsgrad", init_scale=0.01,
                 init_scale_is_variance=True, bias_init=0.1,
                 random_state=None):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.learning_rate = learning_rate
        self.l2 = l2
        self.batch_size = batch_size
        self.epochs = epochs
        self.optimizer = optimizer
        self.init_scale = init_scale
        self.init_scale_is_variance = init_scale_is_variance
        self.bias_init = bias_init
        self.random_state = random_state

    def fit(self, X, y):
        if self.random_state is None:
            raise ValueError("random_state is required for reproducible training")
        X = as_float_matrix(X, "X")
        y = as_labels(y, "y")
        n_classes = int(y.max()) + 1
        init_seed, shuffle_seed = np.random.SeedSequence(self.random_state).spawn(2)
        params = init_params(X.shape[1], self.hidden_layer_sizes, n_classes,
                             seed=init_seed, activation=self.activation,
                             init_scale=self.init_scale,
                             init_scale_is_variance=self.init_scale_is_variance,
                             bias_init=self.bias_init)
        cfg = TrainConfig(seed=shuffle_seed, learning_rate=self.learning_rate,
                          l2=self.l2, batch_size=self.batch_size,
                          epochs=self.epochs, optimizer=self.optimizer,
                          init_scale=self.init_scale,
                          init_scale_is_variance=self.init_scale_is_variance,
                          bias_init=self.bias_init)
        self.params_ = train(params, X, y, cfg)
        self.classes_ = np.arange(n_classes)
        return self

    @property
    def params(self) -> MLPParams:
        self._check_fitted()
        return self.params_

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("call fit before predicting")

    def predict_proba(self, X):
        self._check_fitted()
        return forward(self.params_, X)

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)


class FederatedMatcher(BaseEstimator, ClassifierMixin):
    """Fuses independently trained MLPs into one compressed network.

    fit() takes a sequence of local models (MLPParams or fitted
    MLPClassifier instances) that share depth, input and output dimensions;
    the fused network is then a regular classifier. ``sigma0_sq`` is the
    prior variance of global neurons, ``sigma_sq`` the assumed observation
    variance of local neurons around their global counterpart, and
    ``gamma0`` controls how readily new global neurons are opened.
    """

    def __init__(self, sigma0_sq=10.0, sigma_sq=1.0, gamma0=1.0,
                 max_passes=10, random_state=0):
        self.sigma0_sq = sigma0_sq
        self.sigma_sq = sigma_sq
        self.gamma0 = gamma0
        self.max_passes = max_passes
        self.random_state = random_state

    def fit(self, local_models, y=None):
        models = [m.params if isinstance(m, MLPClassifier) else m
                  for m in local_models]
        prior = PriorConfig(sigma0_sq=self.sigma0_sq, sigma_sq=self.sigma_sq,
                            gamma0=self.gamma0, num_batches=len(models))
        schedule = MatchSchedule(seed=self.random_state,
                                 max_passes=self.max_passes)
        self.timings_ = MatchTimings()
        self.network_ = match_multilayer(models, prior, schedule, self.timings_)
        self.layer_sizes_ = self.network_.layer_sizes
        total_local = sum(sum(m.hidden_sizes) for m in models)
        self.log_size_ratio_ = float(np.log(sum(self.layer_sizes_) / total_local))
        self.classes_ = np.arange(self.network_.output_dim)
        return self

    def _check_fitted(self):
        if not hasattr(self, "network_"):
            raise NotFittedError("call fit before predicting")

    @property
    def params(self) -> MLPParams:
        self._check_fitted()
        return self.network_.params

    def predict_proba(self, X):
        self._check_fitted()
        return forward(self.network_.params, X)

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)
