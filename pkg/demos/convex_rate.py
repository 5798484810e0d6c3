"""Convergence rate on a strongly convex problem.

Linear embeddings, a frozen head and an l2 penalty make the objective strongly
convex in the client parameters. With the decaying stepsize schedule the
optimality gap shrinks roughly like 1/k; the script prints the fitted log-log
slope of the gap.

    python demos/convex_rate.py
"""
import numpy as np
from scipy.optimize import minimize

from vafl.analysis import fit_loglog_slope
from vafl.experiment import RunConfig, build_federation, run_experiment

L2 = 0.001


def sections(**schedule):
    return {
        "run": {"seed": 0},
        "data": {"N": 1000, "p": 10, "test_fraction": 0},
        "model": {"M": 2, "hidden": "", "activation": "identity", "head_trainable": "false",
                  "l2": L2},
        "protocol": {"mode": "bounded", "D": 10},
        "schedule": schedule,
        "activation": {"lam": "1,2"},
        "batch": {"size": 20},
        "stop": {"max_k": 30_000},
        "eval": {"spacing": "log", "grad": "false"},
    }


fed = build_federation(RunConfig.from_dict(sections(eta=1.0)))
A = np.hstack([np.hstack([b, np.ones((len(b), 1))]) for b in fed.train.blocks])
y = fed.train.y


def objective(theta):
    return np.mean(np.logaddexp(0, -y * (A @ theta))) + L2 / 2 * theta @ theta


best = minimize(objective, np.zeros(A.shape[1]), method="BFGS", options={"gtol": 1e-12})
s = 1 / (1 + np.exp(y * (A @ best.x)))
hess = (A.T * (s * (1 - s))) @ A / len(y) + L2 * np.eye(A.shape[1])
eig = np.linalg.eigvalsh(hess)
print(f"optimum {best.fun:.6f}, curvature between {eig[0]:.2e} and {eig[-1]:.3f}")

log = run_experiment(RunConfig.from_dict(sections(kind="sc_bounded", mu=eig[0], L=eig[-1], K0=2000)))
k, gap = log.column("k"), log.column("train_loss") - best.fun
for kk, g in zip(k[::5], gap[::5]):
    print(f"  k={int(kk):>6}  gap {g:.3e}")
fit = fit_loglog_slope(k, gap, (1e3, 3e4))
print(f"log-log slope of the gap over k in [1e3, 3e4]: {fit.slope:.2f} +/- {fit.half_width:.2f}")
