import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from rankcompress import dataio, nn
from rankcompress.estimators import BSRCompressor, DenseNetClassifier
from rankcompress.exceptions import InvalidInputError


@pytest.fixture(scope="module")
def data():
    ds = dataio.synth_blobs(4, 100, 16, 0)
    labels = np.array(["a", "b", "c", "d"])[ds.labels]
    return ds.features, labels


@pytest.fixture(scope="module")
def fitted(data):
    X, y = data
    return DenseNetClassifier(hidden=(32, 16), epochs=10, eta0=0.05, batch=32).fit(X, y)


def test_params_and_clone():
    est = DenseNetClassifier(hidden=(8,), epochs=3)
    assert est.get_params()["hidden"] == (8,)
    twin = clone(est).set_params(epochs=5)
    assert twin.epochs == 5 and est.epochs == 3


def test_fit_predict(fitted, data):
    X, y = data
    assert set(fitted.predict(X)) <= set(y)
    assert fitted.score(X, y) >= 0.95
    proba = fitted.predict_proba(X[:5])
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert fitted.n_features_in_ == 16


def test_not_fitted_and_shape_errors(fitted):
    with pytest.raises(NotFittedError):
        DenseNetClassifier().predict(np.zeros((1, 3)))
    with pytest.raises(ValueError):
        fitted.predict(np.zeros((2, 5)))
    with pytest.raises(ValueError):
        DenseNetClassifier().fit(np.zeros((3, 2)), np.zeros(4))
    with pytest.raises(ValueError):
        DenseNetClassifier().fit(np.array([[np.nan, 1.0]]), [0])


def test_compressor(fitted, data):
    X, y = data
    comp = BSRCompressor(base=fitted, c_d=0.5, tau=0.05, reg_epochs=4, finetune_epochs=3)
    comp.fit(X, y)
    assert 0.45 <= comp.report_.ratio <= 0.5
    assert len(comp.ranks_) == 3
    assert any(isinstance(layer, nn.FactorizedLayer) for layer in comp.model_.layers)
    assert comp.score(X, y) >= 0.9
    with pytest.raises(InvalidInputError):
        BSRCompressor().fit(X, y)
