"""Command-line entry point: ``vafl run | calibrate | smoothness | gap | fit-rate | gen-data``.

Exit codes: 0 success, 2 invalid configuration or input, 3 I/O failure.
"""
from __future__ import annotations

import argparse
import csv
import sys

import numpy as np

from . import analysis
from .data import even_split, gen_synthetic, write_csv
from .errors import VAFLError
from .experiment import build_federation, load_config, run_experiment
from .numerics import fork_rng

EXIT_CONFIG = 2
EXIT_IO = 3


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()] if text else []


def _print_kv(d: dict) -> None:
    for k, v in d.items():
        if isinstance(v, (list, tuple)):
            v = ",".join(repr(float(x)) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        print(f"{k} = {v}")


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    out = args.out or cfg.get("run", "out", "vafl_out")
    log = run_experiment(cfg, out)
    last = log.rows[-1] if log.rows else {}
    _print_kv({"out": out, "final_k": log.header["final_k"],
               "train_loss": float(last.get("train_loss", float("nan"))),
               "grad_norm_sq": float(last.get("grad_norm_sq", float("nan")))})
    return 0


def cmd_calibrate(args) -> int:
    rep = analysis.privacy_report(args.sens, args.q, args.T, args.eps, args.delta,
                                  args.N_m, args.N, args.K, args.mu, args.kappa)
    out = {"sensitivity": rep.sensitivity, "noise_std": rep.noise_std}
    if rep.gdp_std is not None:
        out["gdp_std"] = rep.gdp_std
        out["kappa"] = rep.kappa
    _print_kv(out)
    return 0


def cmd_smoothness(args) -> int:
    if args.config:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        fed = build_federation(cfg)
        for c in fed.clients:
            rep = analysis.smoothness_report(c.params, c.pert, c._X, fork_rng(fed.rng, 100 + c.m),
                                             fed.server.head, c.m, fed.reg.coefficient)
            _print_kv({f"client{c.m}.{k}": v for k, v in rep.as_dict().items()})
        return 0
    if not args.w_norms:
        raise VAFLError("smoothness needs --config or --w-norms")
    w = _floats(args.w_norms)
    L = len(w)
    rep = analysis.smoothness_recursion(
        w, [int(d) for d in _floats(args.dims)], _floats(args.hidden_stds), args.output_std,
        _floats(args.mean_input_norms) or [1.0] * L, args.lip, args.loss_smooth,
        args.embed_lip, args.loss_lip, args.reg_smooth)
    _print_kv(rep.as_dict())
    return 0


def cmd_gap(args) -> int:
    w = _floats(args.w_norms)
    lips = _floats(args.lips) or [1.0] * len(w)
    hs = _floats(args.hidden_stds)
    _print_kv({
        "gap_conservative": analysis.perturbation_gap(args.M, args.loss_lip, lips, w, hs,
                                                      args.output_std, "conservative"),
        "gap_literal": analysis.perturbation_gap(args.M, args.loss_lip, lips, w, hs,
                                                 args.output_std, "literal"),
    })
    return 0


def cmd_fit_rate(args) -> int:
    with open(args.metrics, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or args.column not in rows[0]:
        raise VAFLError(f"column {args.column!r} not found in {args.metrics}")
    k = np.array([float(r["k"]) for r in rows])
    v = np.array([float(r[args.column]) for r in rows])
    if args.subtract is not None:
        v = v - args.subtract
    if args.running_min:
        v = np.minimum.accumulate(v)
    window = (args.kmin if args.kmin is not None else 1, args.kmax if args.kmax is not None else np.inf)
    fit = analysis.fit_loglog_slope(k, v, window)
    _print_kv({"slope": fit.slope, "half_width": fit.half_width, "points": fit.n})
    return 0


def cmd_gen_data(args) -> int:
    split = [int(s) for s in _floats(args.split)] or even_split(args.p, args.M)
    ds = gen_synthetic(args.N, args.p, args.M, args.task, args.noise_std, args.seed, split)
    write_csv(ds, args.out, header=args.header)
    _print_kv({"path": args.out, "N": ds.N, "label_column": ds.table().shape[1],
               "split": ",".join(str(w) for w in split)})
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vafl", description="Vertical asynchronous federated learning simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a simulation from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("calibrate", help="noise level for a privacy target")
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--q", type=float, required=True, help="sampling ratio N_m/N")
    p.add_argument("--T", type=float, required=True, help="number of perturbed releases")
    p.add_argument("--sens", type=float, required=True, help="sensitivity bound")
    p.add_argument("--N-m", dest="N_m", type=float)
    p.add_argument("--N", type=float)
    p.add_argument("--K", type=float)
    p.add_argument("--mu", type=float, help="target GDP level")
    p.add_argument("--kappa", type=float, default=1.0)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("smoothness", help="layerwise smoothness constants")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--w-norms", dest="w_norms")
    p.add_argument("--dims", default="")
    p.add_argument("--hidden-stds", dest="hidden_stds", default="")
    p.add_argument("--output-std", dest="output_std", type=float, default=0.0)
    p.add_argument("--mean-input-norms", dest="mean_input_norms", default="")
    p.add_argument("--lip", type=float, default=1.0)
    p.add_argument("--loss-smooth", dest="loss_smooth", type=float, default=0.0)
    p.add_argument("--embed-lip", dest="embed_lip", type=float, default=0.0)
    p.add_argument("--loss-lip", dest="loss_lip", type=float, default=1.0)
    p.add_argument("--reg-smooth", dest="reg_smooth", type=float, default=0.0)
    p.set_defaults(func=cmd_smoothness)

    p = sub.add_parser("gap", help="bound on the smoothed/clean objective gap")
    p.add_argument("--M", type=int, required=True)
    p.add_argument("--loss-lip", dest="loss_lip", type=float, default=1.0)
    p.add_argument("--lips", default="")
    p.add_argument("--w-norms", dest="w_norms", required=True)
    p.add_argument("--hidden-stds", dest="hidden_stds", default="")
    p.add_argument("--output-std", dest="output_std", type=float, default=0.0)
    p.set_defaults(func=cmd_gap)

    p = sub.add_parser("fit-rate", help="log-log slope of a metrics column")
    p.add_argument("metrics")
    p.add_argument("--column", required=True)
    p.add_argument("--kmin", type=float)
    p.add_argument("--kmax", type=float)
    p.add_argument("--subtract", type=float, help="constant subtracted before the fit")
    p.add_argument("--running-min", dest="running_min", action="store_true")
    p.set_defaults(func=cmd_fit_rate)

    p = sub.add_parser("gen-data", help="write a synthetic dataset as CSV (label last)")
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--p", type=int, required=True)
    p.add_argument("--M", type=int, required=True)
    p.add_argument("--task", choices=("logistic", "regression"), default="logistic")
    p.add_argument("--noise-std", dest="noise_std", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="")
    p.add_argument("--header", action="store_true")
    p.add_argument("--out", default="data.csv")
    p.set_defaults(func=cmd_gen_data)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (VAFLError, ValueError) as exc:
        print(f"vafl: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"vafl: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
