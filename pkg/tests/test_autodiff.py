import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hamlearn import autodiff as ad
from hamlearn.autodiff import MlpParams, MlpSpec, Tape


def one_unit_net(w1=1.0, w2=1.0):
    spec = MlpSpec((1, 1, 1))
    return spec, MlpParams(spec, (np.array([[w1]]), np.array([[w2]])), (np.zeros(1), np.zeros(1)))


def test_zero_params_give_zero_output():
    spec = MlpSpec((3, 4, 4, 1))
    p = ad.zeros(spec)
    assert ad.mlp_eval(spec, p, np.array([0.3, -2.0, 5.0])) == 0.0
    assert np.all(ad.mlp_input_gradient(spec, p, np.ones((5, 3))) == 0.0)


def test_one_unit_net_values():
    spec, p = one_unit_net()
    assert ad.mlp_eval(spec, p, np.array([0.0])) == 0.0
    assert ad.mlp_eval(spec, p, np.array([1.0])) == pytest.approx(0.7615941559557649, abs=1e-15)
    np.testing.assert_allclose(ad.mlp_input_gradient(spec, p, np.array([0.0])), [1.0])


def test_shape_error_reports_dims():
    spec = MlpSpec((2, 3, 1))
    with pytest.raises(ad.ShapeError, match="3.*2|2.*3"):
        ad.mlp_eval(spec, ad.zeros(spec), np.zeros(3))


def test_output_bias_gradient_is_one():
    spec = MlpSpec((1, 3, 1))
    tape = Tape()
    net = ad.MlpNodes(tape, ad.zeros(spec))
    out, _ = ad.forward_nodes(tape, net, tape.const(np.array([[1.0]])))
    (g,) = ad.grad_params(tape, tape.sum(out), [net])
    assert g.biases[-1][0] == 1.0


def test_backward_rejects_non_scalar():
    tape = Tape()
    x = tape.var(np.ones((2, 2)))
    with pytest.raises(ad.TapeError):
        tape.backward(tape.tanh(x))


def test_replay_is_bit_identical():
    spec = MlpSpec((2, 5, 1))
    p = ad.init_gaussian(spec, 4)
    x = np.random.default_rng(0).normal(size=(7, 2))

    def grads():
        tape = Tape()
        net = ad.MlpNodes(tape, p)
        out, _ = ad.forward_nodes(tape, net, tape.const(x))
        return ad.grad_params(tape, tape.sum_squares(out), [net])[0].flat()

    assert np.array_equal(grads(), grads())


def test_init_is_seeded_and_scaled():
    spec = MlpSpec((200, 300, 1))
    a, b = ad.init_gaussian(spec, 11), ad.init_gaussian(spec, 11)
    assert np.array_equal(a.flat(), b.flat())
    assert not np.array_equal(a.flat(), ad.init_gaussian(spec, 12).flat())
    # weights ~ N(0, 1/fan_in), biases zero
    assert np.var(a.weights[0]) == pytest.approx(1 / 200, rel=0.03)
    assert np.all(a.biases[0] == 0)


def test_json_round_trip_is_exact(tmp_path):
    spec = MlpSpec((3, 6, 4, 1))
    p = ad.init_gaussian(spec, 5)
    p.save(tmp_path / "p.json")
    q = MlpParams.load(tmp_path / "p.json")
    assert np.array_equal(p.flat(), q.flat())
    assert json.loads((tmp_path / "p.json").read_text())["layer_sizes"] == [3, 6, 4, 1]


def test_spec_validation():
    with pytest.raises(ValueError):
        MlpSpec((2, 1))
    with pytest.raises(ValueError):
        MlpSpec((2, 3, 2))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), width=st.integers(1, 6), depth=st.integers(1, 3), dim=st.integers(1, 3))
def test_input_gradient_matches_finite_differences(seed, width, depth, dim):
    spec = MlpSpec((dim, *([width] * depth), 1))
    p = ad.init_gaussian(spec, seed)
    x = np.random.default_rng(seed).normal(size=(4, dim))
    g = ad.mlp_input_gradient(spec, p, x)
    h = 1e-6
    for i in range(dim):
        e = np.zeros(dim)
        e[i] = h
        fd = (ad.mlp_eval(spec, p, x + e) - ad.mlp_eval(spec, p, x - e)) / (2 * h)
        np.testing.assert_allclose(g[:, i], fd, atol=1e-6, rtol=1e-6)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_on_tape_input_gradient_matches_numpy(seed):
    spec = MlpSpec((3, 4, 4, 1))
    p = ad.init_gaussian(spec, seed)
    x = np.random.default_rng(seed).normal(size=(5, 3))
    tape = Tape()
    node = ad.input_gradient_on_tape(tape, ad.MlpNodes(tape, p), tape.const(x))
    np.testing.assert_allclose(node.value, ad.mlp_input_gradient(spec, p, x), rtol=1e-13, atol=1e-14)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_parameter_gradient_of_input_gradient_matches_fd(seed):
    # second-order path: d/dtheta of sum((dV/dx)^2)
    spec = MlpSpec((2, 4, 3, 1))
    p = ad.init_gaussian(spec, seed)
    x = np.random.default_rng(seed + 1).normal(size=(3, 2))

    def value(theta):
        q = MlpParams.from_flat(spec, theta)
        return float(np.sum(ad.mlp_input_gradient(spec, q, x) ** 2))

    tape = Tape()
    net = ad.MlpNodes(tape, p)
    out = tape.sum_squares(ad.input_gradient_on_tape(tape, net, tape.const(x)))
    g = ad.grad_params(tape, out, [net])[0].flat()
    theta = p.flat()
    fd = np.empty_like(theta)
    h = 1e-6
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        fd[i] = (value(theta + e) - value(theta - e)) / (2 * h)
    np.testing.assert_allclose(g, fd, atol=1e-7, rtol=1e-5)
