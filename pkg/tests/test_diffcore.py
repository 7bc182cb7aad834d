import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iwd.diffcore import (NetworkSpec, backward, cross_entropy, cross_entropy_batch, cross_entropy_head, forward,
                          init_params, input_gradient, input_gradient_vjp, linear_head, log_softmax,
                          make_optimizer, optimizer_step, params_from_bytes, params_to_bytes, unpack)
from iwd.errors import DimensionError, FormatError, LabelError, NumericError, ValidationError

from .fd import numeric_grad, rel_error

TOL = 1e-4


def _net(seed, act, widths, output="logits"):
    r = np.random.default_rng(seed)
    spec = NetworkSpec(widths, act, output)
    return spec, init_params(spec, r) + 0.1 * r.standard_normal(spec.n_params), r


@given(st.integers(0, 10**6), st.sampled_from(["relu", "tanh"]), st.integers(1, 3))
@settings(max_examples=25, deadline=None)
def test_ce_gradients_match_fd(seed, act, depth):
    spec, p, r = _net(seed, act, (5,) + (6,) * depth + (3,))
    X = r.standard_normal((4, 5))
    y = r.integers(0, 3, 4)
    g = backward(spec, p, X, cross_entropy_head(y))

    def loss_p(q):
        return cross_entropy_batch(forward(spec, q, X), y).mean()

    def loss_x(Z):
        return cross_entropy_batch(forward(spec, p, Z), y).mean()

    assert g.loss == pytest.approx(loss_p(p))
    assert rel_error(g.grad_params, numeric_grad(loss_p, p)) < TOL
    assert rel_error(g.grad_input, numeric_grad(loss_x, X)) < TOL


@given(st.integers(0, 10**6))
@settings(max_examples=20, deadline=None)
def test_input_gradient_vjp_matches_fd(seed):
    spec, p, r = _net(seed, "tanh", (4, 7, 5, 1), "scalar")
    X = r.standard_normal((3, 4))
    V = r.standard_normal((3, 4))
    G, dtheta = input_gradient_vjp(spec, p, X, V)
    assert np.allclose(G, input_gradient(spec, p, X))
    assert rel_error(G, numeric_grad(lambda Z: forward(spec, p, Z).sum(), X)) < TOL
    assert rel_error(dtheta, numeric_grad(lambda q: (V * input_gradient(spec, q, X)).sum(), p)) < TOL


def test_stacked_matches_looped(rng):
    spec = NetworkSpec((4, 6, 1), "tanh", "scalar")
    P = np.stack([init_params(spec, rng) + 0.1 for _ in range(3)])
    X = rng.standard_normal((3, 5, 4))
    V = rng.standard_normal((3, 5, 4))
    coef = rng.standard_normal((5, 1))
    out = forward(spec, P, X)
    g = backward(spec, P, X, linear_head(coef))
    G, dth = input_gradient_vjp(spec, P, X, V)
    for i in range(3):
        assert np.array_equal(out[i], forward(spec, P[i], X[i]))
        gi = backward(spec, P[i], X[i], linear_head(coef))
        assert np.array_equal(g.grad_params[i], gi.grad_params)
        assert np.array_equal(g.grad_input[i], gi.grad_input)
        Gi, dthi = input_gradient_vjp(spec, P[i], X[i], V[i])
        assert np.array_equal(G[i], Gi) and np.array_equal(dth[i], dthi)


def test_unpack_shapes():
    spec = NetworkSpec((3, 4, 2))
    layers = unpack(spec, np.arange(spec.n_params, dtype=float))
    assert [(W.shape, b.shape) for W, b in layers] == [((3, 4), (1, 4)), ((4, 2), (1, 2))]
    with pytest.raises(DimensionError):
        unpack(spec, np.zeros(spec.n_params + 1))


def test_single_input_layout(rng):
    spec = NetworkSpec((3, 4, 2))
    p = init_params(spec, rng)
    x = rng.standard_normal(3)
    assert forward(spec, p, x).shape == (2,)
    assert np.allclose(forward(spec, p, x), forward(spec, p, x[None])[0])
    with pytest.raises(DimensionError):
        forward(spec, p, np.zeros(4))


def test_log_softmax_stable():
    z = np.array([[1000.0, 0.0, -1000.0]])
    assert np.all(np.isfinite(log_softmax(z)))
    assert np.exp(log_softmax(z)).sum() == pytest.approx(1.0)


def test_cross_entropy_examples():
    assert cross_entropy([0.0, 0.0], 0) == pytest.approx(np.log(2))
    with pytest.raises(LabelError):
        cross_entropy([0.0, 0.0], 2)
    with pytest.raises(NumericError):
        cross_entropy([np.nan, 0.0], 0)


def test_spec_validation():
    for bad in [((3,), "relu", "logits"), ((3, 2), "gelu", "logits"), ((3, 2), "relu", "scalar"),
                ((3, 0, 2), "relu", "logits")]:
        with pytest.raises(ValidationError):
            NetworkSpec(*bad)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_gradient_raises(rng):
    spec = NetworkSpec((2, 3, 1), "relu", "scalar")
    p = init_params(spec, rng)
    with pytest.raises(NumericError):
        backward(spec, p, np.ones((1, 2)), linear_head(np.inf))


def test_sgd_step():
    st_ = make_optimizer("sgd", 0.5, 2)
    p, st2 = optimizer_step(st_, np.array([1.0, 2.0]), np.array([2.0, -2.0]))
    assert p.tolist() == [0.0, 3.0] and st2.t == 1


def test_adam_first_step_is_signed_lr():
    st_ = make_optimizer("adam", 0.1, 3)
    p, _ = optimizer_step(st_, np.zeros(3), np.array([3.0, -0.5, 2.0]))
    assert np.allclose(p, [-0.1, 0.1, -0.1], atol=1e-6)


def test_optimizer_rejects_bad_input():
    with pytest.raises(ValidationError):
        make_optimizer("rmsprop", 0.1, 2)
    with pytest.raises(NumericError):
        optimizer_step(make_optimizer("sgd", 0.1, 2), np.zeros(2), np.array([np.nan, 0.0]))
    with pytest.raises(DimensionError):
        optimizer_step(make_optimizer("sgd", 0.1, 2), np.zeros(2), np.zeros(3))


def test_serialization_round_trip(rng):
    spec = NetworkSpec((4, 5, 3))
    p = init_params(spec, rng)
    blob = params_to_bytes(spec, p)
    assert blob[:8] == b"IWDNET1\0"
    spec2, p2 = params_from_bytes(blob)
    assert spec2 == spec and np.array_equal(p2, p)


def test_serialization_errors(rng):
    spec = NetworkSpec((4, 5, 3))
    blob = params_to_bytes(spec, init_params(spec, rng))
    with pytest.raises(FormatError, match="offset 0"):
        params_from_bytes(b"XXXXXXXX" + blob[8:])
    with pytest.raises(FormatError):
        params_from_bytes(blob[:-8])
    with pytest.raises(FormatError):
        params_from_bytes(blob[:10])
