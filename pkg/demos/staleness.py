"""How uneven client speeds translate into stale embeddings.

Runs the same federation three ways (fully asynchronous, bounded delay and
t-synchronous) and prints update shares, the largest delay any read saw, and
the final training loss.

    python demos/staleness.py
"""
import numpy as np

from vafl.analysis import fit_geometric_tail, qm_from_rates
from vafl.experiment import RunConfig, run_experiment

LAM = "1,1,1,8"
BASE = {
    "run": {"seed": 1},
    "data": {"N": 1000, "p": 20},
    "model": {"M": 4, "hidden": "4", "head_init": "random"},
    "schedule": {"eta": 0.02},
    "activation": {"lam": LAM},
    "batch": {"size": 10},
    "stop": {"max_k": 20_000},
    "eval": {"every": 20_000, "grad": "false"},
}


def config(**protocol):
    sections = {k: dict(v) for k, v in BASE.items()}
    sections["protocol"] = {"record_staleness": "true", **protocol}
    return RunConfig.from_dict(sections)


print("mean activation gaps:", LAM)
print("expected update shares:", np.round(qm_from_rates([float(v) for v in LAM.split(",")]), 3))
for label, protocol in [("async", {"mode": "async"}),
                        ("bounded D=4", {"mode": "bounded", "D": 4}),
                        ("tsync t=2", {"mode": "tsync", "t": 2})]:
    log = run_experiment(config(**protocol))
    shares = log.updates / log.updates.sum()
    print(f"\n{label}")
    print(f"  observed shares     {np.round(shares, 3)}")
    print(f"  largest delay read  {log.header['max_tau_read_total']}")
    print(f"  forced refreshes    {log.header['forced_refreshes']}")
    print(f"  final train loss    {log.rows[-1]['train_loss']:.4f}")
    if protocol["mode"] == "async":
        # the slow client's embedding is the one that goes stale
        fit = fit_geometric_tail(log.header["tau_hist"][3])
        print(f"  slow client delays: geometric fit rho={fit.rho:.4f}, p_bar={fit.p_bar:.4f}")
