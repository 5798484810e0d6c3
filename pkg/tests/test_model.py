import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import central_diff
from vafl.errors import DataError, ModelError, ProtocolError
from vafl.model import (EmbeddingParams, PerturbationSpec, RegularizerSpec, ServerHead,
                        client_backprop, embed_forward, grad_embedding, grad_server,
                        init_embedding, loss_forward, regularizer_grad, regularizer_value)
from vafl.numerics import fork_rng, make_rng


def linear(w, b=0.0):
    w = np.atleast_2d(np.asarray(w, dtype=float))
    return EmbeddingParams([w], [np.full(w.shape[0], b)], "identity")


def random_head(rng, widths, loss="binary_logistic"):
    return ServerHead(rng.gen.normal(size=sum(widths) + 1), widths, True, loss)


# -- forward ----------------------------------------------------------------

def test_linear_embedding_dot_product():
    h, _ = embed_forward(linear([1.0, 2.0]), np.array([3.0, 4.0]), PerturbationSpec([], 0.0), make_rng(0))
    assert h.shape == (1,)
    assert h[0] == 11.0


def test_relu_zero_input_zero_bias():
    p = init_embedding(5, [7, 3], 2, make_rng(1), "relu", "relu")
    h, _ = embed_forward(p, np.zeros(5), PerturbationSpec.zero(3), make_rng(2))
    assert np.array_equal(h, np.zeros(2))


def test_output_noise_law():
    # each row of a constant batch receives an independent draw
    x = np.zeros((100_000, 1))
    h, _ = embed_forward(linear([1.0]), x, PerturbationSpec([], 1.0), make_rng(3))
    assert abs(h.mean()) < 0.02
    assert abs(h.var() - 1.0) < 0.05


def test_hidden_noise_is_uniform_with_matching_variance():
    p = EmbeddingParams([np.zeros((1, 1)), np.ones((1, 1))], [np.zeros(1), np.zeros(1)], "identity")
    _, tape = embed_forward(p, np.zeros((200_000, 1)), PerturbationSpec([0.5], 0.0), make_rng(4))
    z = tape.noise[0].ravel()
    assert np.max(np.abs(z)) <= math.sqrt(3) * 0.5
    assert abs(z.var() / 0.25 - 1) < 0.02


def test_zero_perturbation_is_bit_identical():
    rng = make_rng(5)
    p = init_embedding(6, [8, 4], 3, rng, "tanh")
    x = rng.gen.normal(size=(20, 6))
    clean, _ = embed_forward(p, x)
    pert, _ = embed_forward(p, x, PerturbationSpec([0.0, 0.0], 0.0), make_rng(9))
    assert np.array_equal(clean, pert)


def test_forward_shape_mismatch():
    with pytest.raises(ModelError):
        embed_forward(linear([1.0, 2.0]), np.ones(3))


def test_perturbation_depth_mismatch():
    with pytest.raises(ModelError):
        embed_forward(linear([1.0]), np.ones(1), PerturbationSpec([0.1], 0.0), make_rng(0))


def test_params_must_chain():
    with pytest.raises(ModelError):
        EmbeddingParams([np.ones((2, 3)), np.ones((1, 3))], [np.zeros(2), np.zeros(1)])


def test_noise_replay_reproduces_forward():
    rng = make_rng(6)
    p = init_embedding(3, [5], 2, rng, "relu")
    x = rng.gen.normal(size=(4, 3))
    h, tape = embed_forward(p, x, PerturbationSpec([0.3], 0.2), make_rng(7))
    h2, _ = embed_forward(p, x, noise=tape.noise)
    assert np.array_equal(h, h2)


# -- losses -----------------------------------------------------------------

def test_logistic_loss_at_zero_logit():
    head = ServerHead(np.zeros(3), [2])
    assert loss_forward(head, [np.array([0.3, -1.0])], 1.0) == pytest.approx(math.log(2), abs=1e-12)


def test_squared_loss_perfect_fit():
    head = ServerHead(np.array([1.0, 0.0]), [1], loss_kind="squared")
    assert loss_forward(head, [np.array([2.5])], 2.5) == 0.0


def test_logistic_loss_value():
    head = ServerHead(np.array([1.0, 0.0]), [1])
    assert loss_forward(head, [np.array([2.0])], 1.0) == pytest.approx(0.126928, abs=1e-6)
    assert loss_forward(head, [np.array([2.0])], 1.0) == pytest.approx(math.log1p(math.exp(-2)), rel=1e-14)


def test_logistic_labels_must_be_signs():
    head = ServerHead(np.zeros(2), [1])
    with pytest.raises(DataError):
        loss_forward(head, [np.array([1.0])], 0.0)


def test_head_dimension_checked():
    with pytest.raises(ModelError):
        ServerHead(np.zeros(3), [1, 1, 1])


# -- server and embedding gradients -----------------------------------------

def test_frozen_head_gradient_is_zero():
    head = ServerHead(np.ones(4), [1, 2], trainable=False)
    g = grad_server(head, [np.array([1.0]), np.array([2.0, 3.0])], 1.0)
    assert np.array_equal(g, np.zeros(4))


def test_server_gradient_at_zero_head():
    head = ServerHead(np.zeros(4), [1, 2])
    h1, h2 = np.array([0.5]), np.array([-2.0, 3.0])
    g = grad_server(head, [h1, h2], 1.0)
    assert np.allclose(g, -0.5 * np.array([0.5, -2.0, 3.0, 1.0]), atol=1e-15)


@pytest.mark.parametrize("loss", ["binary_logistic", "squared"])
def test_server_gradient_matches_finite_differences(loss, rel_close):
    rng = make_rng(10)
    widths = [2, 3]
    head = random_head(rng, widths, loss)
    embs = [rng.gen.normal(size=(5, w)) for w in widths]
    y = np.where(rng.gen.random(5) < 0.5, -1.0, 1.0) if loss == "binary_logistic" else rng.gen.normal(size=5)
    g = grad_server(head, embs, y)

    def f(w):
        return loss_forward(ServerHead(w, widths, True, loss), embs, y)
    rel_close(g, central_diff(f, head.weights), 1e-5)


def test_embedding_gradient_zero_at_fit():
    head = ServerHead(np.array([2.0, -1.0, 0.5]), [1, 1], loss_kind="squared")
    h = [np.array([1.0]), np.array([1.0])]
    y = 2.0 - 1.0 + 0.5
    assert np.array_equal(grad_embedding(head, h, y, 0), np.zeros(1))


def test_embedding_gradient_chain_rule():
    head = ServerHead(np.array([0.3, -0.7, 1.2, 0.1]), [2, 1])
    h = [np.array([0.5, -1.0]), np.array([2.0])]
    z = 0.3 * 0.5 + 0.7 * 1.0 + 1.2 * 2.0 + 0.1
    gz = -1.0 / (1.0 + math.exp(z))  # d/dz log(1+exp(-z)) for y=+1
    assert np.allclose(grad_embedding(head, h, 1.0, 0), gz * np.array([0.3, -0.7]), rtol=1e-14)
    assert np.allclose(grad_embedding(head, h, 1.0, 1), gz * np.array([1.2]), rtol=1e-14)


@pytest.mark.parametrize("loss", ["binary_logistic", "squared"])
def test_embedding_gradient_matches_finite_differences(loss, rel_close):
    rng = make_rng(11)
    widths = [3, 2]
    head = random_head(rng, widths, loss)
    embs = [rng.gen.normal(size=w) for w in widths]
    y = -1.0 if loss == "binary_logistic" else 0.4
    for m in range(2):
        def f(v):
            e = list(embs)
            e[m] = v
            return loss_forward(head, e, y)
        rel_close(grad_embedding(head, embs, y, m), central_diff(f, embs[m]), 1e-5)


def test_embedding_gradient_unknown_client():
    head = ServerHead(np.zeros(3), [1, 1])
    with pytest.raises(ProtocolError):
        grad_embedding(head, [np.zeros(1), np.zeros(1)], 1.0, 2)


# -- client backprop ---------------------------------------------------------

def test_linear_backprop_is_input_times_upstream():
    p = linear([0.0, 0.0])
    _, tape = embed_forward(p, np.array([1.0, 2.0]))
    gw, gb = client_backprop(p, tape, 0.5)
    assert np.allclose(gw[0], [[0.5, 1.0]])
    assert np.allclose(gb[0], [0.5])


def test_zero_upstream_gives_zero_gradient():
    rng = make_rng(12)
    p = init_embedding(4, [6], 2, rng)
    _, tape = embed_forward(p, rng.gen.normal(size=(3, 4)))
    gw, gb = client_backprop(p, tape, np.zeros((3, 2)))
    assert all(not g.any() for g in gw + gb)


def test_backprop_rejects_foreign_tape():
    rng = make_rng(13)
    p = init_embedding(4, [6], 2, rng)
    q = init_embedding(5, [6], 2, rng)
    _, tape = embed_forward(q, np.ones(5))
    with pytest.raises(ModelError):
        client_backprop(p, tape, np.ones(2))


def _kink_free(p, x, pert, rng, tries=50):
    for _ in range(tries):
        h, tape = embed_forward(p, x, pert, rng)
        if all(np.min(np.abs(a)) >= 1e-3 for a in tape.pre[:-1]):
            return h, tape
    pytest.skip("could not draw a kink-free point")


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), act=st.sampled_from(["relu", "tanh"]))
def test_backprop_matches_finite_differences(seed, act):
    rng = make_rng(seed)
    p = init_embedding(3, [5], 2, fork_rng(rng, 0), act)
    p.biases = [fork_rng(rng, 1).gen.normal(size=b.shape) for b in p.biases]
    x = fork_rng(rng, 2).gen.normal(size=(4, 3))
    pert = PerturbationSpec([0.2], 0.1)
    _, tape = _kink_free(p, x, pert, fork_rng(rng, 3))
    g_h = fork_rng(rng, 4).gen.normal(size=(4, 2))
    gw, gb = client_backprop(p, tape, g_h)
    analytic = EmbeddingParams(gw, gb, p.activation).flatten()

    def f(v):
        h, _ = embed_forward(p.with_flat(v), x, noise=tape.noise)
        return float(np.sum(g_h * h)) / x.shape[0]
    numeric = central_diff(f, p.flatten(), 1e-6)
    scale = max(np.max(np.abs(numeric)), 1e-8)
    assert np.max(np.abs(analytic - numeric)) <= 1e-4 * scale


# -- regularizer --------------------------------------------------------------

def test_regularizer_zero():
    assert np.array_equal(regularizer_grad(RegularizerSpec(0.0), np.array([1.0, -2.0])), [0.0, 0.0])


def test_regularizer_gradient_value():
    assert np.allclose(regularizer_grad(RegularizerSpec(0.001), np.array([1.0, -2.0])),
                       [0.001, -0.002], rtol=1e-15)


def test_regularizer_value_gradient_consistent():
    spec = RegularizerSpec(0.37)
    theta = make_rng(14).gen.normal(size=6)
    num = central_diff(lambda v: regularizer_value(spec, v), theta)
    assert np.max(np.abs(num - regularizer_grad(spec, theta))) < 1e-6


def test_regularizer_on_params_keeps_structure():
    p = init_embedding(2, [3], 1, make_rng(15))
    gw, gb = regularizer_grad(RegularizerSpec(2.0), p)
    assert np.array_equal(gw[0], 2.0 * p.weights[0])
    assert regularizer_value(RegularizerSpec(2.0), p) == pytest.approx(float(p.flatten() @ p.flatten()))


def test_negative_regularizer_rejected():
    with pytest.raises(ModelError):
        RegularizerSpec(-1.0)


# -- smoothing and variance properties --------------------------------------

@pytest.mark.parametrize("x", [-0.6, -0.2, 0.0, 0.3, 0.9])
def test_smoothed_relu_derivative(x):
    a = 0.5
    c = a / math.sqrt(3)  # hidden noise level with half-width a
    p = EmbeddingParams([np.ones((1, 1)), np.ones((1, 1))], [np.zeros(1), np.zeros(1)], "relu")
    xs = np.full((200_000, 1), x)
    _, tape = embed_forward(p, xs, PerturbationSpec([c], 0.0), make_rng(16))
    recorded = (tape.pre[0] > 0).mean()
    expected = min(max((x + a) / (2 * a), 0.0), 1.0)
    assert abs(recorded - expected) < 0.005
    if x == 0.0:
        assert abs(recorded - 0.5) < 0.005


def test_gradient_variance_grows_with_noise():
    rng = make_rng(17)
    p = init_embedding(4, [6], 1, fork_rng(rng, 0), "relu")
    head = ServerHead(np.array([1.0, 0.0]), [1])
    x = fork_rng(rng, 1).gen.normal(size=(8, 4))
    y = np.where(fork_rng(rng, 2).gen.random(8) < 0.5, -1.0, 1.0)
    variances = []
    for c in (0.0, 0.1, 1.0):
        pert = PerturbationSpec([c], c)
        noise_rng = fork_rng(rng, 3)
        grads = []
        for _ in range(400):
            h, tape = embed_forward(p, x, pert, noise_rng)
            g_h = grad_embedding(head, [h], y, 0)
            gw, gb = client_backprop(p, tape, g_h)
            grads.append(EmbeddingParams(gw, gb, "relu").flatten())
        variances.append(float(np.var(np.array(grads), axis=0).sum()))
    assert variances[0] < 1e-20
    assert variances[0] <= variances[1] <= variances[2]
