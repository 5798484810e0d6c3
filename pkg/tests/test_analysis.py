import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vafl.analysis import (dp_calibrate, fit_geometric_tail, fit_loglog_slope, gamma_schedule,
                           gdp_variance_order, layer_smoothing_constant, lyapunov_value,
                           mc_lipschitz, mc_perturbation_gap, operator_norm, perturbation_gap,
                           privacy_report, qm_from_rates, sensitivity_bound, smoothed_relu_derivative_mc,
                           smoothness_recursion, smoothness_report)
from vafl.errors import AnalysisError
from vafl.model import PerturbationSpec, ServerHead, init_embedding
from vafl.numerics import make_rng

pos = st.floats(0.01, 100.0)


# -- smoothing constants ---------------------------------------------------------

def test_layer_smoothing_examples():
    assert layer_smoothing_constant("uniform", 1.0, 1, 2.0) == 1.0
    assert layer_smoothing_constant("gaussian", 1.0, 4, 2.0) == 2.0


@given(law=st.sampled_from(["uniform", "gaussian"]), lip=pos, d=st.integers(1, 100), c=pos)
def test_layer_smoothing_halves_when_noise_doubles(law, lip, d, c):
    a = layer_smoothing_constant(law, lip, d, c)
    assert layer_smoothing_constant(law, lip, d, 2 * c) == pytest.approx(a / 2, rel=1e-14)


@pytest.mark.parametrize("c", [0.0, -1.0])
def test_layer_smoothing_needs_noise(c):
    with pytest.raises(AnalysisError):
        layer_smoothing_constant("uniform", 1.0, 1, c)


def test_recursion_base_case():
    rep = smoothness_recursion([1.0], [3], [], 3.0, [1.0])
    assert rep.L_b == [1.0]


def test_recursion_two_layers_by_hand():
    rep = smoothness_recursion([1.0, 1.0], [1, 1], [1.0], 1.0, [2.0, 5.0])
    assert rep.L_b == [3.0, 1.0]
    assert rep.L_w == [6.0, 5.0]


def test_whole_client_constant():
    rep = smoothness_recursion([1.0, 1.0], [1, 1], [1.0], 1.0, [2.0, 5.0], loss_smooth=0.25,
                               embed_lip=2.0, loss_lip=0.5, reg_smooth=0.1)
    assert rep.L_Fc == pytest.approx(0.25 * 4 + 0.5 * (3 + 1 + 6 + 5) + 0.1)


def test_recursion_rejects_noiseless_layers():
    with pytest.raises(AnalysisError):
        smoothness_recursion([1.0, 1.0], [1, 1], [0.0], 1.0, [1.0, 1.0])
    with pytest.raises(AnalysisError):
        smoothness_recursion([1.0], [1], [], 0.0, [1.0])


@settings(max_examples=50, deadline=None)
@given(w=st.lists(pos, min_size=3, max_size=3), c=st.lists(pos, min_size=3, max_size=3),
       u=st.lists(pos, min_size=3, max_size=3))
def test_recursion_is_inverse_homogeneous_in_noise(w, c, u):
    a = smoothness_recursion(w, [2, 3, 1], c[:2], c[2], u)
    b = smoothness_recursion(w, [2, 3, 1], [2 * x for x in c[:2]], 2 * c[2], u)
    assert np.allclose(b.L_b, np.array(a.L_b) / 2, rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(w=st.lists(pos, min_size=3, max_size=3), c=st.lists(pos, min_size=3, max_size=3),
       which=st.integers(0, 2), factor=st.floats(1.0, 10.0))
def test_constants_do_not_grow_with_noise(w, c, which, factor):
    a = smoothness_recursion(w, [2, 3, 1], c[:2], c[2], [1.0, 1.0, 1.0])
    c2 = list(c)
    c2[which] *= factor
    b = smoothness_recursion(w, [2, 3, 1], c2[:2], c2[2], [1.0, 1.0, 1.0])
    assert all(y <= x * (1 + 1e-12) for x, y in zip(a.L_b + a.L_w, b.L_b + b.L_w))
    assert all(x > 0 for x in b.L_b)


def test_report_from_snapshot():
    rng = make_rng(0)
    params = init_embedding(4, [5], 1, rng)
    X = rng.gen.normal(size=(50, 4))
    head = ServerHead(np.array([2.0, 0.0]), [1])
    rep = smoothness_report(params, PerturbationSpec([0.5], 0.2), X, make_rng(1), head=head)
    assert rep.inputs["w_norms"][0] == pytest.approx(np.linalg.norm(params.weights[0], 2), rel=1e-5)
    assert rep.inputs["mean_input_norms"][0] == pytest.approx(np.linalg.norm(X, axis=1).mean())
    assert rep.inputs["loss_smooth"] == 1.0 and rep.inputs["loss_lip"] == 2.0
    assert rep.L_Fc > 0 and set(rep.as_dict()) >= {"L_Fc"}


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6), r=st.integers(1, 6), c=st.integers(1, 6))
def test_operator_norm_matches_svd(seed, r, c):
    w = make_rng(seed).gen.normal(size=(r, c))
    assert operator_norm(w) == pytest.approx(np.linalg.norm(w, 2), rel=1e-4)


def test_operator_norm_of_zero():
    assert operator_norm(np.zeros((3, 2))) == 0.0


# -- perturbation gap and privacy ------------------------------------------------

def test_gap_examples():
    assert perturbation_gap(1, 1.0, 1.0, [1.0], [], 0.1) == pytest.approx(0.1)
    assert perturbation_gap(3, 2.0, 1.0, [1.0, 1.0], [0.0], 0.0) == 0.0
    assert perturbation_gap(1, 2.0, 1.0, [1.0], [], 0.1, variant="literal") == pytest.approx(0.1)


@settings(max_examples=50, deadline=None)
@given(c=st.lists(st.floats(0, 10), min_size=3, max_size=3), which=st.integers(0, 2),
       bump=st.floats(0.01, 5))
def test_gap_increases_with_noise(c, which, bump):
    a = perturbation_gap(2, 1.0, 1.0, [1.0, 0.5, 2.0], c[:2], c[2])
    c2 = list(c)
    c2[which] += bump
    assert perturbation_gap(2, 1.0, 1.0, [1.0, 0.5, 2.0], c2[:2], c2[2]) > a


def test_empirical_gap_is_within_bound():
    rng = make_rng(2)
    params = [init_embedding(2, [3], 1, rng) for _ in range(2)]
    blocks = [rng.gen.normal(size=(40, 2)) for _ in range(2)]
    y = np.sign(rng.gen.normal(size=40))
    head = ServerHead(np.array([0.7, -1.2, 0.1]), [1, 1])
    perts = [PerturbationSpec([0.3], 0.2)] * 2
    gap = mc_perturbation_gap(head, params, blocks, y, perts, 2000, make_rng(3))
    # shared layer norms: the largest over both clients; loss Lipschitz: largest head weight
    norms = [max(operator_norm(p.weights[l]) for p in params) for l in range(2)]
    bound = perturbation_gap(2, 1.2, 1.0, norms, [0.3], 0.2)
    assert 0 < gap <= bound


def test_sensitivity_examples():
    assert sensitivity_bound([2.0], 1.0, 1.0, [], []) == 2.0
    assert sensitivity_bound([1.0, 1.0], 1.0, 1.0, [4], [0.5]) == 2.0
    assert sensitivity_bound([3.0], 1.0, 0.0, [], []) == 0.0


def test_dp_calibrate_example():
    assert dp_calibrate(1.0, 0.01, 1e4, 1.0, math.exp(-1)) == pytest.approx(1.0, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(b=pos, q=st.floats(0.001, 1.0), T=st.floats(1, 1e6), eps=pos, delta=st.floats(1e-9, 0.99))
def test_dp_homogeneities(b, q, T, eps, delta):
    nu = dp_calibrate(b, q, T, eps, delta)
    assert dp_calibrate(b, q, T, 2 * eps, delta) == pytest.approx(nu / 2, rel=1e-12)
    assert dp_calibrate(b, q, 4 * T, eps, delta) == pytest.approx(2 * nu, rel=1e-12)
    assert nu > 0


@pytest.mark.parametrize("args", [(1, 0.5, 10, 0, 0.1), (1, 0.5, 10, 1, 1.0), (1, 0, 10, 1, 0.1),
                                  (1, 0.5, 0.5, 1, 0.1), (-1, 0.5, 10, 1, 0.1)])
def test_dp_domain(args):
    with pytest.raises(AnalysisError):
        dp_calibrate(*args)


def test_gdp_examples():
    assert gdp_variance_order(10, 10, 1, 1) == 1.0
    assert gdp_variance_order(10, 1000, 1e4, 1) == pytest.approx(1.0)
    assert gdp_variance_order(10, 1000, 1e4, 0.5) == pytest.approx(2.0)


def test_privacy_report_lists_kappa():
    rep = privacy_report(2.0, 0.25, 100, 1.0, 1e-5, N_m=250, N=1000, K=100, mu_gdp=1.0)
    d = rep.as_dict()
    assert d["kappa"] == 1.0
    assert d["noise_std"] == pytest.approx(dp_calibrate(2.0, 0.25, 100, 1.0, 1e-5))


# -- activation shares, gamma weights, Lyapunov ------------------------------------

def test_qm_examples():
    assert np.allclose(qm_from_rates([1, 1]), [0.5, 0.5])
    assert np.allclose(qm_from_rates([1, 2]), [2 / 3, 1 / 3])


@given(lam=st.lists(pos, min_size=1, max_size=8), alpha=pos)
def test_qm_is_scale_free_probability(lam, alpha):
    q = qm_from_rates(lam)
    assert q.sum() == pytest.approx(1.0) and np.all(q > 0)
    assert np.allclose(qm_from_rates([alpha * x for x in lam]), q, rtol=1e-12)


def test_gamma_single_delay():
    eta, L = 0.05, 2.0
    assert gamma_schedule(1, L, eta)[0] == pytest.approx(1.5 * eta * L ** 2 / (1 - 2 * eta ** 2 * L ** 2))


def test_gamma_two_delays_independent_evaluation():
    D, L, eta = 2, 1.0, 0.1
    g1 = (1.5 * eta * D * D * L * L) / (1.0 - 2.0 * D * D * eta * eta * L * L)
    g2 = g1 - (1.5 * D * eta * L * L + 2.0 * D * g1 * eta * eta * L * L)
    assert g1 == pytest.approx(0.6 / 0.92)
    assert np.allclose(gamma_schedule(D, L, eta), [g1, g2], rtol=1e-14)


@given(D=st.integers(2, 10), eta=st.floats(1e-4, 0.02), L=st.floats(0.1, 3))
def test_gammas_decrease(D, eta, L):
    g = gamma_schedule(D, L, eta)
    assert np.all(np.diff(g) < 0)


def test_strongly_convex_gammas_are_self_consistent():
    D, L, eta, mu, q = 4, 1.0, 0.01, 0.5, 0.2
    g = gamma_schedule(D, L, eta, "strongly_convex", mu, q)
    A = 1.5 * D * eta * L ** 2 + 2 * D * g[0] * eta ** 2 * L ** 2 + 0.5 * mu * q * eta * g[0]
    assert g[0] == pytest.approx(D * A, rel=1e-12)
    assert np.allclose(np.diff(g), -A)


def test_gamma_rejects_large_steps():
    with pytest.raises(AnalysisError):
        gamma_schedule(3, 1.0, 1.0)


def test_lyapunov_examples():
    hist = [np.zeros(2), np.array([0.3, 0.4]) / 2]
    assert lyapunov_value(1.0, hist, [2.0]) == pytest.approx(1.0 + 2.0 * 0.0625)
    assert lyapunov_value(1.0, [np.zeros(1), np.array([0.5])], [2.0]) == pytest.approx(1.5)
    assert lyapunov_value(3.0, [np.ones(3)] * 4, [1.0, 2.0, 3.0]) == 3.0
    assert lyapunov_value(3.0, [np.arange(3.0) * i for i in range(4)], [0, 0, 0]) == 3.0
    with pytest.raises(AnalysisError):
        lyapunov_value(0.0, [np.zeros(1)], [1.0])


# -- rate fitting ---------------------------------------------------------------------

def test_exact_power_laws():
    k = np.arange(1, 101, dtype=float)
    assert abs(fit_loglog_slope(k, 1 / k).slope + 1) < 1e-6
    assert abs(fit_loglog_slope(k, 1 / np.sqrt(k)).slope + 0.5) < 1e-6


def test_noisy_power_law():
    k = np.logspace(0, 4, 60)
    v = 3 / k * (1 + 0.01 * make_rng(0).gen.normal(size=k.size))
    fit = fit_loglog_slope(k, v)
    assert abs(fit.slope + 1) < 0.05 and fit.half_width < 0.05


def test_fit_window_and_errors():
    k = np.arange(1, 51, dtype=float)
    v = np.where(k < 20, 1.0, 1 / k)
    assert fit_loglog_slope(k, v, window=(20, 50)).slope == pytest.approx(-1)
    with pytest.raises(AnalysisError):
        fit_loglog_slope(k[:9], v[:9])
    with pytest.raises(AnalysisError):
        fit_loglog_slope(k, v - 1)


def test_geometric_fit_recovers_rate():
    d = make_rng(4).gen.geometric(0.25, size=200_000)
    fit = fit_geometric_tail(np.bincount(d))
    assert fit.rho == pytest.approx(0.75, abs=0.005)
    assert fit.p_bar == pytest.approx(0.25 / 0.75, rel=0.02)
    assert fit.probs.sum() == pytest.approx(1.0)


def test_geometric_fit_needs_a_tail():
    with pytest.raises(AnalysisError):
        fit_geometric_tail([0, 10])
    with pytest.raises(AnalysisError):
        fit_geometric_tail([5])


# -- Monte Carlo smoothing checks --------------------------------------------------------

def test_smoothed_relu_derivative_is_a_ramp():
    a = 1.0
    x = np.linspace(-2, 2, 81)
    est = smoothed_relu_derivative_mc(x, a, 100_000, make_rng(5))
    exact = np.clip((x + a) / (2 * a), 0, 1)
    assert np.max(np.abs(est - exact)) < 0.01
    c = a / math.sqrt(3)  # noise level with half-width a
    assert mc_lipschitz(x, est) <= 1.1 * layer_smoothing_constant("uniform", 1.0, 1, c)


def test_mc_lipschitz_of_a_line():
    x = np.linspace(0, 1, 11)
    assert mc_lipschitz(x, 3 * x) == pytest.approx(3.0)
