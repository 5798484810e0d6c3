"""Noise injected into embeddings: what it costs and what it buys.

1. The smoothing constant of a relu layer under uniform noise, next to a
   Monte Carlo estimate.
2. The noise level needed for a given privacy budget.
3. Training loss as the output noise grows.

    python demos/noise_and_privacy.py
"""
import math

import numpy as np

from vafl.analysis import (dp_calibrate, layer_smoothing_constant, mc_lipschitz,
                           smoothed_relu_derivative_mc)
from vafl.experiment import RunConfig, run_experiment
from vafl.numerics import make_rng

print("relu derivative smoothed by uniform noise of standard deviation c")
for c in (0.25, 1.0):
    x = np.linspace(-3 * c, 3 * c, 121)
    est = smoothed_relu_derivative_mc(x, math.sqrt(3) * c, 20_000, make_rng(0))
    print(f"  c={c}: Monte Carlo Lipschitz {mc_lipschitz(x, est):.3f}, "
          f"analytic bound {layer_smoothing_constant('uniform', 1.0, 1, c):.3f}")

print("\nnoise needed for (eps, delta)-privacy over 10^4 releases at sampling ratio 0.01")
for eps in (0.5, 1.0, 4.0):
    print(f"  eps={eps}: noise std {dp_calibrate(1.0, 0.01, 1e4, eps, 1e-5):.3f}")

print("\nfinal training loss after 10^4 updates")
for c in (0.0, 0.2, 0.5, 1.0):
    log = run_experiment(RunConfig.from_dict({
        "run": {"seed": 0},
        "data": {"N": 500, "p": 20, "test_fraction": 0.2},
        "model": {"M": 4, "hidden": "8", "head_init": "random"},
        "perturbation": {"output_std": c},
        "schedule": {"eta": 0.05},
        "batch": {"size": 10},
        "stop": {"max_k": 10_000},
        "eval": {"every": 10_000, "mc_draws": 10},
    }))
    last = log.rows[-1]
    print(f"  output noise {c}: train loss {last['train_loss']:.4f}, test accuracy {last['test_metric']:.3f}")
