"""Smoothness constants, perturbation gap, privacy calibration, update shares,
Lyapunov diagnostics and convergence-rate fitting.

Norms of weight matrices are spectral norms estimated by power iteration.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import AnalysisError
from .model import (ACTIVATION_LIPSCHITZ, EmbeddingParams, PerturbationSpec, ServerHead,
                    embed_forward, loss_forward)
from .numerics import Rng, fork_rng

__all__ = [
    "SmoothnessReport", "PrivacyReport", "SlopeFit", "GeometricFit",
    "operator_norm", "layer_smoothing_constant", "smoothness_recursion", "smoothness_report",
    "perturbation_gap", "sensitivity_bound", "dp_calibrate", "gdp_variance_order",
    "privacy_report", "qm_from_rates", "gamma_schedule", "lyapunov_value", "fit_loglog_slope",
    "fit_geometric_tail", "smoothed_relu_derivative_mc", "mc_lipschitz", "mc_perturbation_gap",
]


def operator_norm(w, iters: int = 50, tol: float = 1e-6) -> float:
    """Largest singular value of ``w`` by power iteration on ``w^T w``."""
    w = np.asarray(w, dtype=float)
    if w.ndim == 1:
        return float(np.linalg.norm(w))
    if not np.any(w):
        return 0.0
    v = np.ones(w.shape[1]) / math.sqrt(w.shape[1])
    # an all-ones start can be orthogonal to the top singular vector; nudge deterministically
    v = v + 1e-3 * np.arange(1, w.shape[1] + 1) / w.shape[1]
    v /= np.linalg.norm(v)
    s = 0.0
    for _ in range(iters):
        u = w @ v
        v_new = w.T @ u
        nv = np.linalg.norm(v_new)
        if nv == 0:
            return 0.0
        v_new /= nv
        s_new = math.sqrt(nv)
        done = abs(s_new - s) <= tol * max(s_new, 1e-300)
        v, s = v_new, s_new
        if done:
            break
    return float(np.linalg.norm(w @ v))


def layer_smoothing_constant(law: str, lip: float, d: int, c: float) -> float:
    """Lipschitz constant of the gradient of a noise-smoothed layer of width ``d``.

    ``law`` is ``uniform`` (``2 sqrt(d) lip / c``) or ``gaussian`` (``lip d / c``).
    """
    if not c > 0:
        raise AnalysisError("noise level must be positive")
    if law == "uniform":
        return 2.0 * math.sqrt(d) * lip / c
    if law == "gaussian":
        return lip * d / c
    raise AnalysisError(f"unknown noise law {law!r}")


@dataclass
class SmoothnessReport:
    L_b: list                 # per layer, bias-block constants
    L_w: list                 # per layer, weight-block constants
    L_Fc: float               # whole-client constant of the smoothed objective
    inputs: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {f"L_b{l + 1}": v for l, v in enumerate(self.L_b)}
        out.update({f"L_w{l + 1}": v for l, v in enumerate(self.L_w)})
        out["L_Fc"] = self.L_Fc
        return out


def _per_layer(x, L: int, name: str) -> list:
    if np.isscalar(x):
        return [float(x)] * L
    x = [float(v) for v in x]
    if len(x) != L:
        raise AnalysisError(f"{name} needs {L} entries, got {len(x)}")
    return x


def smoothness_recursion(w_norms, dims, hidden_stds, output_std: float, mean_input_norms,
                         lip=1.0, loss_smooth: float = 0.0, embed_lip: float = 0.0,
                         loss_lip: float = 1.0, reg_smooth: float = 0.0) -> SmoothnessReport:
    """Backward recursion for the per-layer smoothness constants of a perturbed embedding.

    ``w_norms[l]`` and ``dims[l]`` are the spectral norm and output width of
    layer l (l = 0..L-1), ``mean_input_norms[l]`` is E||u_{l-1}||,
    ``hidden_stds`` the L-1 uniform noise levels, ``output_std`` the Gaussian
    level of the last layer.  ``loss_smooth``, ``embed_lip``, ``loss_lip`` and
    ``reg_smooth`` enter the whole-client constant
    ``loss_smooth * embed_lip**2 + loss_lip * sum(L_w + L_b) + reg_smooth``.
    """
    L = len(w_norms)
    if L < 1:
        raise AnalysisError("need at least one layer")
    dims = [int(d) for d in dims]
    if len(dims) != L or len(hidden_stds) != L - 1 or len(mean_input_norms) != L:
        raise AnalysisError("per-layer inputs have inconsistent lengths")
    if not output_std > 0 or any(not c > 0 for c in hidden_stds):
        raise AnalysisError("every layer needs positive noise for the constants to be finite")
    lips = _per_layer(lip, L, "lip")
    L_b = [0.0] * L
    L_b[L - 1] = layer_smoothing_constant("gaussian", lips[L - 1], dims[L - 1], output_std)
    for l in range(L - 2, -1, -1):
        prod = 1.0
        for j in range(l + 1, L):
            prod *= lips[j] * w_norms[j]
        L_b[l] = (L_b[l + 1] * w_norms[l + 1] * lips[l] ** 2
                  + prod * layer_smoothing_constant("uniform", lips[l], dims[l], hidden_stds[l]))
    L_w = [float(mean_input_norms[l]) * L_b[l] for l in range(L)]
    L_Fc = loss_smooth * embed_lip ** 2 + loss_lip * (sum(L_w) + sum(L_b)) + reg_smooth
    inputs = dict(w_norms=list(map(float, w_norms)), dims=dims, hidden_stds=list(hidden_stds),
                  output_std=output_std, mean_input_norms=list(map(float, mean_input_norms)),
                  lip=lips, loss_smooth=loss_smooth, embed_lip=embed_lip, loss_lip=loss_lip,
                  reg_smooth=reg_smooth)
    return SmoothnessReport(L_b, L_w, float(L_Fc), inputs)


def smoothness_report(params: EmbeddingParams, pert: PerturbationSpec, X, rng: Rng,
                      head: ServerHead | None = None, m: int = 0, reg_coefficient: float = 0.0,
                      n_noise: int = 16, max_samples: int = 1000,
                      residual_bound: float = 1.0) -> SmoothnessReport:
    """Smoothness constants estimated from a parameter snapshot and data.

    E||u_{l-1}|| is averaged over at most ``max_samples`` rows and ``n_noise``
    noise draws.  With a head, the loss constants come from client m's head
    block ``w``: smoothness ``|w|^2 / 4`` (logistic) or ``|w|^2`` (squared) in
    the embedding, and Lipschitz ``|w|`` (logistic) or ``|w| residual_bound``
    (squared).
    The embedding's Lipschitz constant in its parameters is bounded by
    ``sqrt(sum_l (E||u_{l-1}||^2 + 1) prod_{j>l} (lip ||w_j||)^2)``.
    """
    X = np.asarray(X, dtype=float)[:max_samples]
    L = params.depth
    norms = [operator_norm(w) for w in params.weights]
    sums = np.zeros(L)
    sq = np.zeros(L)
    for i in range(n_noise):
        _, tape = embed_forward(params, X, pert, fork_rng(rng, i))
        for l in range(L):
            nr = np.linalg.norm(tape.inputs[l], axis=1)
            sums[l] += nr.mean()
            sq[l] += (nr ** 2).mean()
    mean_in = sums / n_noise
    mean_sq = sq / n_noise
    lips = [ACTIVATION_LIPSCHITZ[params.layer_activation(l)] for l in range(L)]
    embed_lip2 = 0.0
    for l in range(L):
        prod = 1.0
        for j in range(l + 1, L):
            prod *= lips[j] * norms[j]
        embed_lip2 += (mean_sq[l] + 1.0) * prod ** 2
    loss_smooth, loss_lip = 0.0, 1.0
    if head is not None:
        wn = float(np.linalg.norm(head.block(m)))
        loss_smooth = wn ** 2 / 4 if head.loss_kind == "binary_logistic" else wn ** 2
        loss_lip = wn if head.loss_kind == "binary_logistic" else wn * residual_bound
    return smoothness_recursion(norms, params.dims[1:], pert.hidden_stds, pert.output_std,
                                mean_in, lips, loss_smooth, math.sqrt(embed_lip2), loss_lip,
                                reg_coefficient)


def perturbation_gap(M: int, loss_lip: float, lips, w_norms, hidden_stds, output_std: float,
                     variant: str = "conservative") -> float:
    """Bound on |F_c - F| for M clients sharing the given layer constants.

    ``conservative`` includes the loss Lipschitz factor; ``literal`` omits it.
    """
    L = len(w_norms)
    lips = _per_layer(lips, L, "lips")
    if len(hidden_stds) != L - 1:
        raise AnalysisError("hidden_stds needs one entry per hidden layer")
    total = 0.0
    for j in range(L):
        prod = 1.0
        for l in range(j, L):
            prod *= lips[l] ** 2 * w_norms[l] ** 2
        total += prod
    noise = math.sqrt(sum(c * c for c in hidden_stds) + output_std ** 2)
    base = M * math.sqrt(total) * noise
    if variant == "conservative":
        return loss_lip * base
    if variant == "literal":
        return base
    raise AnalysisError(f"unknown variant {variant!r}")


def sensitivity_bound(w_norms, lips, dx: float, dims, hidden_stds) -> float:
    """Worst-case change of the last layer's output between neighbouring inputs.

    ``lips``, ``dims`` and ``hidden_stds`` describe the L-1 hidden layers.
    """
    L = len(w_norms)
    if L < 1:
        raise AnalysisError("need at least one layer")
    lips = _per_layer(lips, L - 1, "lips") if L > 1 else []
    if len(dims) != L - 1 or len(hidden_stds) != L - 1:
        raise AnalysisError("dims and hidden_stds need one entry per hidden layer")
    wL = w_norms[-1]
    prod = 1.0
    for l in range(L - 1):
        prod *= lips[l] * w_norms[l]
    first = wL * prod * dx
    acc, run = 0.0, 1.0
    for l in range(L - 1):
        run *= lips[l] * math.sqrt(dims[l])
        acc += run * hidden_stds[l]
    return float(first + wL * acc)


def dp_calibrate(sensitivity: float, q: float, T: float, eps: float, delta: float) -> float:
    """Gaussian noise std giving (eps, delta)-DP after T subsampled releases."""
    if not eps > 0:
        raise AnalysisError("eps must be positive")
    if not 0 < delta < 1:
        raise AnalysisError("delta must lie in (0, 1)")
    if not 0 < q <= 1:
        raise AnalysisError("sampling ratio q must lie in (0, 1]")
    if not T >= 1:
        raise AnalysisError("T must be >= 1")
    if sensitivity < 0:
        raise AnalysisError("sensitivity must be nonnegative")
    return sensitivity * q * math.sqrt(T * math.log(1.0 / delta)) / eps


def gdp_variance_order(N_m: float, N: float, K: float, mu: float, kappa: float = 1.0) -> float:
    """Order-level noise std for mu-GDP after K steps with batch N_m of N samples."""
    if min(N_m, N, K, mu, kappa) <= 0:
        raise AnalysisError("all inputs must be positive")
    return kappa * N_m * math.sqrt(K) / (mu * N)


@dataclass
class PrivacyReport:
    sensitivity: float
    noise_std: float
    gdp_std: float | None = None
    kappa: float = 1.0

    def as_dict(self) -> dict:
        return {"sensitivity": self.sensitivity, "noise_std": self.noise_std,
                "gdp_std": self.gdp_std, "kappa": self.kappa}


def privacy_report(sensitivity: float, q: float, T: float, eps: float, delta: float,
                   N_m=None, N=None, K=None, mu_gdp=None, kappa: float = 1.0) -> PrivacyReport:
    nu = dp_calibrate(sensitivity, q, T, eps, delta)
    gdp = None
    if None not in (N_m, N, K, mu_gdp):
        gdp = gdp_variance_order(N_m, N, K, mu_gdp, kappa)
    return PrivacyReport(sensitivity, nu, gdp, kappa)


def qm_from_rates(lam) -> np.ndarray:
    """Long-run update shares: normalized inverse activation parameters."""
    lam = np.asarray(lam, dtype=float)
    if lam.size == 0 or np.any(~(lam > 0)):
        raise AnalysisError("activation parameters must be positive")
    inv = 1.0 / lam
    return inv / inv.sum()


def gamma_schedule(D: int, L: float, eta: float, variant: str = "nonconvex",
                   mu: float | None = None, min_q: float | None = None) -> np.ndarray:
    """Weights gamma_1..gamma_D of the delay terms in the Lyapunov function."""
    if D < 1:
        raise AnalysisError("D must be >= 1")
    if variant == "nonconvex":
        den = 1 - 2 * D ** 2 * eta ** 2 * L ** 2
        if den <= 0:
            raise AnalysisError("stepsize too large for the nonconvex weights")
        g1 = 1.5 * eta * D ** 2 * L ** 2 / den
        step = 1.5 * D * eta * L ** 2 + 2 * D * g1 * eta ** 2 * L ** 2
        return g1 - step * np.arange(D)
    if variant == "strongly_convex":
        if mu is None or min_q is None:
            raise AnalysisError("strongly convex weights need mu and min_q")
        a = 0.5 * mu * min_q * eta
        den = 1 - 2 * D ** 2 * eta ** 2 * L ** 2 - a * D
        if den <= 0:
            raise AnalysisError("stepsize too large for the strongly convex weights")
        g1 = 1.5 * eta * D ** 2 * L ** 2 / den
        A = 1.5 * D * eta * L ** 2 + 2 * D * g1 * eta ** 2 * L ** 2 + a * g1
        return (D + 1 - np.arange(1, D + 1)) * A
    raise AnalysisError(f"unknown variant {variant!r}")


def lyapunov_value(F: float, history, gammas) -> float:
    """``F + sum_d gamma_d ||theta^{k+1-d} - theta^{k-d}||^2``; ``history`` is oldest first."""
    D = len(gammas)
    if len(history) < D + 1:
        raise AnalysisError(f"need {D + 1} snapshots, got {len(history)}")
    v = float(F)
    for d in range(1, D + 1):
        diff = np.asarray(history[-d], dtype=float) - np.asarray(history[-d - 1], dtype=float)
        v += float(gammas[d - 1]) * float(diff @ diff)
    return v


@dataclass
class SlopeFit:
    slope: float
    half_width: float
    intercept: float
    n: int


def fit_loglog_slope(k, values, window=None, confidence: float = 0.95) -> SlopeFit:
    """Least-squares slope of log(value) against log(k) with a confidence half-width."""
    k = np.asarray(k, dtype=float)
    v = np.asarray(values, dtype=float)
    if window is not None:
        lo, hi = window
        keep = (k >= lo) & (k <= hi)
        k, v = k[keep], v[keep]
    if k.size < 10:
        raise AnalysisError(f"need at least 10 points, got {k.size}")
    if np.any(v <= 0) or np.any(k <= 0):
        raise AnalysisError("log-log fit needs positive k and values")
    res = stats.linregress(np.log(k), np.log(v))
    tq = stats.t.ppf(0.5 + confidence / 2, k.size - 2)
    return SlopeFit(float(res.slope), float(tq * res.stderr), float(res.intercept), int(k.size))


@dataclass
class GeometricFit:
    rho: float
    p_bar: float
    support: np.ndarray   # observed delays d >= 1
    counts: np.ndarray
    probs: np.ndarray     # empirical P(tau = d)

    def envelope(self, d) -> np.ndarray:
        return self.p_bar * self.rho ** np.asarray(d, dtype=float)


def fit_geometric_tail(hist) -> GeometricFit:
    """Maximum-likelihood geometric law ``P(tau = d) = p_bar rho^d`` on d >= 1.

    ``hist[d]`` counts observations of delay d (index 0 is ignored).
    """
    hist = np.asarray(hist, dtype=np.int64)
    d = np.arange(hist.size)
    keep = (d >= 1) & (hist > 0)
    total = hist[keep].sum()
    if total == 0:
        raise AnalysisError("empty histogram")
    mean = float((d[keep] * hist[keep]).sum() / total)
    rho = 1.0 - 1.0 / mean
    if rho <= 0:
        raise AnalysisError("all delays equal 1; no tail to fit")
    p_bar = (1.0 - rho) / rho
    return GeometricFit(rho, p_bar, d[keep], hist[keep], hist[keep] / total)


def smoothed_relu_derivative_mc(x, half_width: float, n_draws: int, rng: Rng) -> np.ndarray:
    """Monte Carlo estimate of d/dx E[relu(x + Z)], Z ~ U[-a, a], with common draws for all x."""
    if not half_width > 0:
        raise AnalysisError("half_width must be positive")
    z = np.sort(rng.gen.uniform(-half_width, half_width, n_draws))
    x = np.atleast_1d(np.asarray(x, dtype=float))
    # fraction of draws with x + z > 0
    return (n_draws - np.searchsorted(z, -x, side="right")) / n_draws


def mc_lipschitz(x, values) -> float:
    """Largest absolute difference quotient between neighbouring grid points."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(values, dtype=float)
    return float(np.max(np.abs(np.diff(v) / np.diff(x))))


def mc_perturbation_gap(head: ServerHead, params: list, blocks: list, y, perts: list,
                        n_draws: int, rng: Rng) -> float:
    """|mean over noise draws of F - F| with F the clean full-data loss."""
    clean = [embed_forward(p, X)[0] for p, X in zip(params, blocks)]
    F = loss_forward(head, clean, y)
    acc = 0.0
    streams = [fork_rng(rng, m) for m in range(len(params))]
    for _ in range(n_draws):
        embs = [embed_forward(p, X, pt, s)[0] for p, X, pt, s in zip(params, blocks, perts, streams)]
        acc += loss_forward(head, embs, y)
    return abs(acc / n_draws - F)
