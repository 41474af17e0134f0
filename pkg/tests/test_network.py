import numpy as np
import pytest

from oracles import max_relative_error, numeric_gradient
from pdrlab.errors import SpecError
from pdrlab.neuralnet import (
    AdamState,
    NetworkSpec,
    ParamLayout,
    adam_step,
    clip_by_global_norm,
    dropout_mask,
    forward,
    init_params,
    loss_and_grad,
    trunk,
)


def small_spec(**kw):
    base = dict(input_dim=3, ff_in_dims=(4,), lstm_layers=1, lstm_cells=5, dropout_rate=0.0, ff_out_dims=(2,))
    base.update(kw)
    return NetworkSpec(**base)


def test_zero_weights_give_zero_output():
    spec = small_spec()
    theta = np.zeros(ParamLayout.for_spec(spec).size)
    X = np.random.default_rng(0).normal(size=(6, 7, 3))
    assert np.array_equal(forward(theta, X, spec), np.zeros((6, 2)))


def test_forward_is_deterministic_and_batch_independent():
    spec = small_spec()
    theta = init_params(spec, seed=1)
    X = np.random.default_rng(1).normal(size=(8, 9, 3))
    y = forward(theta, X, spec)
    assert np.array_equal(y, forward(theta, X, spec))
    np.testing.assert_allclose(forward(theta, X[3:4], spec), y[3:4], rtol=1e-12, atol=1e-14)


def test_single_cell_lstm_matches_hand_computation():
    spec = NetworkSpec(input_dim=1, ff_in_dims=(), lstm_layers=1, lstm_cells=1, dropout_rate=0.0, ff_out_dims=(1,))
    layout = ParamLayout.for_spec(spec)
    theta = np.zeros(layout.size)
    P = layout.views(theta)
    # gate order: input, forget, candidate, output
    P["lstm.0.W"][...] = [[0.5, -0.3, 0.8, 0.2]]
    P["lstm.0.U"][...] = [[0.1, 0.4, -0.6, 0.3]]
    P["lstm.0.b"][...] = [0.1, 1.0, 0.0, -0.2]
    P["ff_out.0.W"][...] = [[2.0]]
    P["ff_out.0.b"][...] = [0.5]
    xs = [1.0, -2.0]

    def sig(z):
        return 1.0 / (1.0 + np.exp(-z))

    h = c = 0.0
    W, U, b = [0.5, -0.3, 0.8, 0.2], [0.1, 0.4, -0.6, 0.3], [0.1, 1.0, 0.0, -0.2]
    for x in xs:
        z = [W[k] * x + U[k] * h + b[k] for k in range(4)]
        i, f, g, o = sig(z[0]), sig(z[1]), np.tanh(z[2]), sig(z[3])
        c = f * c + i * g
        h = o * np.tanh(c)
    X = np.array(xs).reshape(1, 2, 1)
    assert trunk(theta, X, spec)[0, 0] == pytest.approx(h, abs=1e-14)
    assert forward(theta, X, spec)[0, 0] == pytest.approx(2.0 * h + 0.5, abs=1e-14)


@pytest.mark.parametrize("spec_kw", [
    {},
    {"lstm_layers": 2, "ff_in_dims": (4, 3)},
    {"ff_out_dims": (3, 2), "aux_dim": 2},
])
def test_gradient_matches_finite_differences(spec_kw):
    spec = small_spec(**spec_kw)
    rng = np.random.default_rng(7)
    theta = init_params(spec, seed=2) + rng.normal(0, 0.1, ParamLayout.for_spec(spec).size)
    X = rng.normal(size=(4, 6, 3))
    Y = rng.normal(size=(4, 2))
    aux = rng.normal(size=(4, spec.aux_dim)) if spec.aux_dim else None
    mask = dropout_mask(np.random.default_rng(3), (4, spec.lstm_cells), 0.3)
    _, grad = loss_and_grad(theta, X, Y, spec, l2_weight=1e-3, mask=mask, aux=aux)

    def f(th):
        return loss_and_grad(th, X, Y, spec, l2_weight=1e-3, mask=mask, aux=aux)[0]

    idx = np.arange(len(theta))
    num = numeric_gradient(f, theta, idx)
    assert max_relative_error(grad, num) < 1e-4


def test_zero_error_gives_zero_gradient():
    spec = small_spec()
    theta = init_params(spec, seed=0)
    X = np.random.default_rng(0).normal(size=(5, 4, 3))
    Y = forward(theta, X, spec)
    loss, grad = loss_and_grad(theta, X, Y, spec, l2_weight=0.0)
    assert loss == 0.0
    assert np.all(grad == 0.0)


def test_l2_gradient_is_twice_weight_on_weights_only():
    spec = small_spec()
    layout = ParamLayout.for_spec(spec)
    theta = init_params(spec, seed=0)
    X = np.random.default_rng(0).normal(size=(5, 4, 3))
    Y = forward(theta, X, spec)
    lam = 1e-2
    _, grad = loss_and_grad(theta, X, Y, spec, l2_weight=lam)
    np.testing.assert_allclose(grad, 2 * lam * theta * layout.l2_mask, rtol=0, atol=1e-15)
    biases = [e for e in layout.entries if e.name.endswith(".b")]
    assert all(not e.regularized for e in biases)


def test_input_shape_mismatch_rejected():
    spec = small_spec()
    with pytest.raises(SpecError):
        forward(init_params(spec), np.zeros((2, 3, 4)), spec)


def test_dropout_mask_is_inverted_and_unbiased():
    m = dropout_mask(np.random.default_rng(0), (200_000,), 0.5)
    assert set(np.unique(m)) == {0.0, 2.0}
    assert m.mean() == pytest.approx(1.0, abs=0.01)
    assert np.all(dropout_mask(np.random.default_rng(0), (10,), 0.0) == 1.0)


def test_adam_zero_gradient_keeps_weights_and_decays_moments():
    theta = np.array([1.0, -2.0, 3.0])
    state = AdamState(np.array([0.1, 0.2, -0.3]), np.array([0.01, 0.04, 0.09]), 5, 0)
    _, st = adam_step(theta, np.zeros(3), state)
    np.testing.assert_allclose(st.m, 0.9 * state.m)
    np.testing.assert_allclose(st.v, 0.999 * state.v)
    # with zero gradient only stale momentum moves the weights; from zero moments nothing moves
    fresh, _ = adam_step(theta, np.zeros(3), AdamState.zeros(3))
    assert np.array_equal(fresh, theta)
    assert st.t == 6


def test_adam_first_step_closed_form():
    theta = np.zeros(4)
    g = np.array([0.3, -0.2, 1e-6, 0.0])
    lr, eps = 1e-2, 1e-8
    new, st = adam_step(theta, g, AdamState.zeros(4), lr=lr, eps=eps, clip=10.0)
    np.testing.assert_allclose(new, -lr * g / (np.abs(g) + eps), rtol=1e-12, atol=1e-18)
    assert st.t == 1


def test_global_norm_clip():
    g, norm = clip_by_global_norm(np.array([6.0, 8.0]), 1.0)
    assert norm == 10.0
    np.testing.assert_allclose(g, [0.6, 0.8])
    g2, _ = clip_by_global_norm(np.array([0.3, 0.4]), 1.0)
    np.testing.assert_array_equal(g2, [0.3, 0.4])


def test_adam_skips_non_finite_gradient():
    theta = np.ones(2)
    new, st = adam_step(theta, np.array([np.nan, 1.0]), AdamState.zeros(2))
    assert np.array_equal(new, theta)
    assert st.skipped == 1 and st.t == 0
