import numpy as np
import pytest

from iwd.diffcore import NetworkSpec, init_params
from iwd.errors import DimensionError, NumericError, PathError
from iwd.models import TrainedModel

from .fd import numeric_grad, rel_error


def _model(rng, shape=(3, 3, 1), k=3):
    spec = NetworkSpec((int(np.prod(shape)), 8, k))
    return TrainedModel(spec, init_params(spec, rng), shape, {"method": "test"})


def test_shapes_and_predict(rng):
    m = _model(rng)
    X = rng.random((5, 3, 3, 1))
    assert m.logits(X).shape == (5, 3)
    assert m.predict(X[0]).shape == (1,)
    assert np.array_equal(m.predict(X), np.argmax(m.logits(X), 1))


def test_argmax_ties_lowest_index():
    spec = NetworkSpec((1, 3))
    m = TrainedModel(spec, np.zeros(spec.n_params), (1,))
    assert m.predict(np.zeros((2, 1))).tolist() == [0, 0]


def test_loss_input_grad_per_image(rng):
    m = _model(rng)
    X = rng.random((4, 3, 3, 1))
    y = np.array([0, 1, 2, 1])
    total, g = m.loss_input_grad(X, y)
    assert total == pytest.approx(m.loss(X, y).sum())
    ref = numeric_grad(lambda Z: m.loss(Z, y).sum(), X)
    assert rel_error(g, ref) < 1e-4
    _, g1 = m.loss_input_grad(X[1], y[1])
    assert np.allclose(g1, g[1])


def test_validation(rng):
    spec = NetworkSpec((9, 3))
    with pytest.raises(DimensionError):
        TrainedModel(spec, init_params(spec, rng), (4, 4, 1))
    with pytest.raises(NumericError):
        TrainedModel(spec, np.full(spec.n_params, np.nan), (3, 3, 1))


def test_save_load_round_trip(tmp_path, rng):
    m = _model(rng)
    path = tmp_path / "m.bin"
    m.save(path)
    back = TrainedModel.load(path)
    assert back.spec == m.spec and np.array_equal(back.params, m.params)
    assert back.input_shape == m.input_shape and back.provenance == m.provenance
    assert back.config_hash() == m.config_hash()
    with pytest.raises(PathError):
        TrainedModel.load(tmp_path / "none.bin")
