import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from butterfly_moe import ButterflyMoESequenceModel
from butterfly_moe import tasks as tk
from butterfly_moe.errors import ConfigError

SMALL = dict(d_model=16, d_ff=32, n_experts=4, epochs=2, batch=32, seed=0)


def copy_data(n, seq_len=4, seed=0):
    samples = tk.generate("copy", n, seq_len, 32, seed)
    return np.array([s.input for s in samples]), np.array([s.target for s in samples])


def test_get_params_and_clone():
    est = ButterflyMoESequenceModel(d_model=32, lr=0.01)
    params = est.get_params()
    assert params["d_model"] == 32 and params["lr"] == 0.01 and "seq_len" not in params
    c = clone(est)
    assert c.get_params() == params and c is not est
    est.set_params(k=1)
    assert est.k == 1


def test_fit_predict_score():
    X, y = copy_data(96)
    est = ButterflyMoESequenceModel(**SMALL).fit(X, y)
    assert est.n_features_in_ == 4 and est.config_.seq_len == 4
    assert len(est.report_.epochs) == 3
    pred = est.predict(X[:5])
    assert pred.shape == (5, 4) and pred.dtype.kind == "i"
    assert 0.0 <= est.score(X[:20], y[:20]) <= 1.0


def test_fit_deterministic():
    X, y = copy_data(64)
    a = ButterflyMoESequenceModel(**SMALL).fit(X, y)
    b = ButterflyMoESequenceModel(**SMALL).fit(X, y)
    np.testing.assert_array_equal(a.predict(X), b.predict(X))


def test_not_fitted():
    with pytest.raises(NotFittedError):
        ButterflyMoESequenceModel().predict(np.ones((2, 3), dtype=int))


@pytest.mark.parametrize("X,y", [
    (np.ones((4, 3)), np.ones((4, 2))),          # shape mismatch
    (np.full((4, 3), 40), np.ones((4, 3))),      # token beyond vocab
    (-np.ones((4, 3)), np.ones((4, 3))),
])
def test_invalid_data(X, y):
    with pytest.raises(ValueError):
        ButterflyMoESequenceModel(**SMALL).fit(X, y)


def test_invalid_hyperparameters():
    X, y = copy_data(8)
    with pytest.raises(ConfigError):
        ButterflyMoESequenceModel(d_model=48).fit(X, y)


def test_predict_width_checked():
    X, y = copy_data(32)
    est = ButterflyMoESequenceModel(**(SMALL | {"epochs": 0})).fit(X, y)
    with pytest.raises(ValueError):
        est.predict(np.ones((2, 5), dtype=int))
