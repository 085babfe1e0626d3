"""scikit-learn style wrappers around the training and compression pipeline."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import compress, dataio, nn, ranksel, regularizer
from .exceptions import InvalidInputError


def _as_dataset(X, y, classes, val_fraction, seed):
    ds = dataio.Dataset(X, y, classes)
    if val_fraction:
        return dataio.split(ds, (1 - val_fraction, val_fraction), seed, ("train", "val"))
    return dataio.Dataset(X, y, classes, {"train": np.arange(len(y))})


class _NetMixin(ClassifierMixin):
    def _encode(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = unique_labels(y)
        if self.classes_.size < 2:
            raise InvalidInputError("need at least two classes")
        self.n_features_in_ = X.shape[1]
        return X, np.searchsorted(self.classes_, y)

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return nn.forward(self.model_, X)

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]


class DenseNetClassifier(_NetMixin, BaseEstimator):
    """ReLU MLP trained with Nesterov SGD and a cosine learning rate."""

    def __init__(self, hidden=(256, 128), epochs=30, eta0=0.1, momentum=0.9, batch=128,
                 random_state=0):
        self.hidden = hidden
        self.epochs = epochs
        self.eta0 = eta0
        self.momentum = momentum
        self.batch = batch
        self.random_state = random_state

    def fit(self, X, y):
        X, yi = self._encode(X, y)
        ds = _as_dataset(X, yi, self.classes_.size, 0, self.random_state)
        sizes = [X.shape[1], *self.hidden, self.classes_.size]
        cfg = nn.TrainConfig(self.eta0, self.momentum, self.batch, self.epochs, self.random_state)
        self.model_, self.log_ = nn.train(nn.init_mlp(sizes, self.random_state), ds, cfg)
        return self


class BSRCompressor(_NetMixin, BaseEstimator):
    """Compress a fitted ``DenseNetClassifier`` to a target compression ratio.

    ``fit`` selects ranks by beam search on a held-out slice of ``(X, y)``,
    retrains under the rank penalty, factorizes and fine-tunes.
    """

    def __init__(self, base=None, c_d=0.5, tau=0.02, configs=ranksel.DEFAULT_CONFIGS, gamma=0.5,
                 lambda0=0.02, growth=1.5, reg_epochs=60, finetune_epochs=30, finetune_eta0=0.01,
                 val_fraction=0.1, random_state=0):
        self.base = base
        self.c_d = c_d
        self.tau = tau
        self.configs = configs
        self.gamma = gamma
        self.lambda0 = lambda0
        self.growth = growth
        self.reg_epochs = reg_epochs
        self.finetune_epochs = finetune_epochs
        self.finetune_eta0 = finetune_eta0
        self.val_fraction = val_fraction
        self.random_state = random_state

    def fit(self, X, y):
        if self.base is None:
            raise InvalidInputError("base must be a fitted DenseNetClassifier")
        check_is_fitted(self.base, "model_")
        X, yi = self._encode(X, y)
        if not np.array_equal(self.classes_, self.base.classes_):
            raise InvalidInputError("labels differ from the base classifier's classes")
        seed = self.random_state
        ds = _as_dataset(X, yi, self.classes_.size, self.val_fraction, seed)
        base = self.base.model_
        shapes = compress.shapes_of(base)
        search, self.search_results_ = ranksel.multi_config_search(
            base, ds, shapes, self.c_d, self.tau, self.configs, self.gamma, seed)
        self.ranks_ = search.ranks
        schedule = regularizer.RegSchedule(self.lambda0, self.growth)
        reg_cfg = nn.TrainConfig(epochs=self.reg_epochs, seed=seed + 1)
        reg, _ = nn.train(base, ds, reg_cfg, penalty=regularizer.MsrPenalty(self.ranks_, schedule))
        fact = compress.factorize_model(reg, self.ranks_)
        ft_cfg = nn.TrainConfig(eta0=self.finetune_eta0, epochs=self.finetune_epochs,
                                seed=seed + 2)
        self.model_, _ = compress.finetune(fact, ds, ft_cfg)
        self.n_features_in_ = X.shape[1]
        self.report_ = compress.build_report(
            base, self.ranks_, nn.accuracy(base, X, yi), nn.accuracy(self.model_, X, yi),
            self.c_d, self.tau, extra={"accuracy_on": "fit data"})
        return self
