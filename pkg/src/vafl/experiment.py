"""Run configuration, experiment orchestration and metric/report files.

A run is described by an INI file; see the README for every key.  All
randomness derives from ``[run] seed`` through fixed stream ids, so a config
and seed reproduce every output byte for byte.
"""
from __future__ import annotations

import configparser
import math
import os
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import analysis
from .data import (BatchSpec, VerticalDataset, gen_synthetic, load_csv,
                   train_test_split)
from .errors import AnalysisError, ConfigurationError
from .model import (PerturbationSpec, RegularizerSpec, ServerHead,
                    client_backprop, embed_forward, grad_server, init_embedding, loss_forward,
                    regularizer_value, _dloss_dz, _logits, _stack)
from .numerics import Rng, fork_rng, make_rng
from .optimizer import Schedule, ScheduleSpec
from .protocol import ClientState, ProtocolMode, ServerState, init_pass
from .scheduler import (ActivationSpec, RunLog, StopSpec, linear_eval_points, log_eval_points,
                        run)

__all__ = ["RunConfig", "Federation", "build_federation", "run_experiment", "evaluate_objective",
           "METRIC_COLUMNS", "TRACE_COLUMNS", "load_config", "write_metrics"]

METRIC_COLUMNS = ("k", "virtual_time", "train_loss", "grad_norm_sq", "test_metric",
                  "max_tau_read", "lyapunov")
TRACE_COLUMNS = ("virtual_time", "k", "kind", "client", "batch_size", "max_tau_read")

# root stream ids
_CLIENTS, _SCHEDULER, _HEAD, _EVAL = 1, 2, 3, 4
# per-client stream id for parameter init (0 and 1 are batch and noise)
_CLIENT_INIT = 2


def _floats(text) -> list[float]:
    if text is None:
        return []
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigurationError(f"{text!r} is not a comma-separated list of numbers") from None


def _ints(text) -> list[int]:
    return [int(v) for v in _floats(text)]


_SECTIONS = ("run", "data", "model", "perturbation", "protocol", "schedule", "activation",
             "batch", "stop", "eval", "output")


@dataclass
class RunConfig:
    """Parsed configuration: one dict of raw string values per section."""

    sections: dict = field(default_factory=lambda: {s: {} for s in _SECTIONS})

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = cls()
        for sec, kv in d.items():
            if sec not in _SECTIONS:
                raise ConfigurationError(f"unknown section [{sec}]")
            cfg.sections[sec].update({k: str(v) for k, v in kv.items()})
        return cfg

    @classmethod
    def from_ini(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str  # keys are case-sensitive (N, M, D, L, K0)
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigurationError(f"malformed config: {exc}") from None
        return cls.from_dict({s: dict(cp[s]) for s in cp.sections()})

    def to_ini(self) -> str:
        lines = []
        for sec in _SECTIONS:
            kv = self.sections.get(sec) or {}
            if not kv:
                continue
            lines.append(f"[{sec}]")
            lines.extend(f"{k} = {v}" for k, v in sorted(kv.items()))
            lines.append("")
        return "\n".join(lines)

    def get(self, sec: str, key: str, default=None):
        v = self.sections[sec].get(key)
        return default if v is None or v.strip() == "" else v.strip()

    def num(self, sec, key, default=None, kind=float):
        v = self.get(sec, key)
        if v is None:
            return default
        try:
            if kind is int:
                f = float(v)
                if f != int(f):
                    raise ValueError
                return int(f)
            return kind(v)
        except ValueError:
            raise ConfigurationError(f"[{sec}] {key} = {v!r} is not a valid {kind.__name__}") from None

    def flag(self, sec, key, default=False) -> bool:
        v = self.get(sec, key)
        if v is None:
            return default
        low = v.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"[{sec}] {key} = {v!r} is not a boolean")

    def choice(self, sec, key, options, default):
        v = self.get(sec, key, default)
        if v not in options:
            raise ConfigurationError(f"[{sec}] {key} must be one of {', '.join(options)}, got {v!r}")
        return v

    @property
    def seed(self) -> int:
        return self.num("run", "seed", 0, int)

    def with_seed(self, seed: int) -> "RunConfig":
        out = RunConfig({s: dict(kv) for s, kv in self.sections.items()})
        out.sections["run"]["seed"] = str(int(seed))
        return out


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return RunConfig.from_ini(fh.read())


@dataclass
class Federation:
    """Everything a run needs, built from a config."""

    config: RunConfig
    train: VerticalDataset
    test: VerticalDataset | None
    server: ServerState
    clients: list
    schedule: Schedule
    activation: ActivationSpec
    stop: StopSpec
    reg: RegularizerSpec
    rng: Rng


def _dataset(cfg: RunConfig):
    source = cfg.choice("data", "source", ("synthetic", "csv"), "synthetic")
    M = cfg.num("model", "M", None, int)
    task = cfg.choice("data", "task", ("logistic", "regression"), "logistic")
    split = _ints(cfg.get("data", "split"))
    if M is not None and M < 1:
        raise ConfigurationError("[model] M must be >= 1")
    if source == "synthetic":
        N = cfg.num("data", "N", 1000, int)
        p = cfg.num("data", "p", 20, int)
        M = M or (len(split) if split else 4)
        ds = gen_synthetic(N, p, M, task, cfg.num("data", "noise_std", 0.0),
                           cfg.num("data", "data_seed", cfg.seed, int), split or None,
                           cfg.num("data", "weight_scale", 1.0))
    else:
        path = cfg.get("data", "path")
        if path is None:
            raise ConfigurationError("[data] path is required for csv data")
        if not split:
            raise ConfigurationError("[data] split is required for csv data")
        ds = load_csv(path, cfg.num("data", "label_column", 0, int), split,
                      cfg.flag("data", "header"), task, cfg.flag("data", "standardize", True))
    if M is not None and ds.M != M:
        raise ConfigurationError(f"[model] M = {M} but the data split has {ds.M} clients")
    return train_test_split(ds, cfg.num("data", "test_fraction", 0.2))


def _per_client(text, M: int) -> list[str]:
    """``a;b;c`` gives one entry per client; a single entry is shared."""
    parts = [s.strip() for s in (text or "").split(";")]
    if len(parts) == 1:
        return parts * M
    if len(parts) != M:
        raise ConfigurationError(f"per-client list has {len(parts)} entries for {M} clients")
    return parts


def build_federation(cfg: RunConfig) -> Federation:
    train, test = _dataset(cfg)
    M = train.M
    root = make_rng(cfg.seed)

    task = train.task
    loss = cfg.choice("model", "loss", ("binary_logistic", "squared"),
                      "binary_logistic" if task == "logistic" else "squared")
    activ = cfg.choice("model", "activation", ("identity", "relu", "tanh"), "relu")
    out_act = cfg.choice("model", "output_activation", ("identity", "relu", "tanh"), "identity")
    out_dim = cfg.num("model", "output_dim", 1, int)
    init = cfg.choice("model", "init", ("random", "zeros"), "random")
    scale = cfg.num("model", "init_scale", 1.0)
    hidden = [_ints(h) for h in _per_client(cfg.get("model", "hidden", ""), M)]
    hstd = [_floats(h) for h in _per_client(cfg.get("perturbation", "hidden_stds", ""), M)]
    ostd = cfg.num("perturbation", "output_std", 0.0)
    reg = RegularizerSpec(cfg.num("model", "l2", 0.0))

    mode = ProtocolMode(cfg.choice("protocol", "mode", ("async", "tsync", "bounded"), "async"),
                        cfg.num("protocol", "t", None, int), cfg.num("protocol", "D", None))

    lam = _floats(cfg.get("activation", "lam")) or [float(m + 1) for m in range(M)]
    latency = None
    lat_mean = cfg.num("activation", "latency_mean", 0.0)
    if lat_mean < 0:
        raise ConfigurationError("[activation] latency_mean must be >= 0")
    if lat_mean > 0:
        from .numerics import DistSpec
        latency = DistSpec("exponential", rate=1.0 / lat_mean)
    act_kind = cfg.choice("activation", "kind", ("exponential", "periodic"), "exponential")
    activation = ActivationSpec(
        act_kind, tuple(lam), cfg.choice("activation", "parametrization", ("scale", "rate"), "scale"),
        tuple(_floats(cfg.get("activation", "period")) or ([1.0] * M if act_kind == "periodic" else [])),
        latency)
    if activation.M != M:
        raise ConfigurationError(f"activation parameters cover {activation.M} clients, data has {M}")

    max_k = cfg.num("stop", "max_k", None, int)
    stop = StopSpec(max_k, cfg.num("stop", "max_time", None))

    batch = BatchSpec(cfg.num("batch", "size", 1, int),
                      cfg.choice("batch", "sampling", ("uniform", "full"), "uniform"))
    if batch.sampling == "uniform" and batch.batch_size > train.N:
        raise ConfigurationError("batch size exceeds the number of training samples")

    schedule = Schedule(_schedule_spec(cfg, mode, activation, max_k))

    widths = []
    params = []
    crng = fork_rng(root, _CLIENTS)
    for m in range(M):
        r = fork_rng(crng, m)
        p = init_embedding(train.widths[m], hidden[m], out_dim,
                           fork_rng(r, _CLIENT_INIT) if init == "random" else None,
                           activ, out_act, scale)
        params.append(p)
        widths.append(p.output_dim)

    head_init = cfg.choice("model", "head_init", ("ones", "random", "zeros"), "ones")
    n_head = sum(widths) + 1
    if head_init == "ones":
        hw = np.ones(n_head)
        hw[-1] = 0.0
    elif head_init == "zeros":
        hw = np.zeros(n_head)
    else:
        hw = fork_rng(root, _HEAD).gen.normal(0.0, 1.0 / math.sqrt(n_head), n_head)
    head = ServerHead(hw, widths, cfg.flag("model", "head_trainable", True), loss)

    server = ServerState(head, train.y, mode, schedule,
                         record_staleness=cfg.flag("protocol", "record_staleness"),
                         debug=cfg.flag("protocol", "debug"))
    order = cfg.choice("protocol", "step_order", ("upload_first", "update_first"), "upload_first")
    push = cfg.choice("protocol", "push", ("none", "all"), "none")
    clients = []
    for m in range(M):
        pert = PerturbationSpec(hstd[m] if hstd[m] else [0.0] * len(hidden[m]), ostd)
        if len(pert.hidden_stds) == 1 and len(hidden[m]) > 1:
            pert = PerturbationSpec(pert.hidden_stds * len(hidden[m]), ostd)
        try:
            pert.check_depth(params[m].depth)
        except Exception as exc:
            raise ConfigurationError(str(exc)) from None
        clients.append(ClientState(m, train.blocks[m], params[m], pert, reg, batch,
                                   fork_rng(crng, m), schedule, order, push == "all"))
    server.refresher = lambda req: clients[req.m].on_refresh(req)
    return Federation(cfg, train, test, server, clients, schedule, activation, stop, reg, root)


def _schedule_spec(cfg: RunConfig, mode: ProtocolMode, activation: ActivationSpec, max_k):
    kind = cfg.choice("schedule", "kind",
                      ("constant", "nc_bounded", "sc_bounded", "nc_unbounded", "sc_unbounded"),
                      "constant")
    t = cfg.num("schedule", "t", mode.t if mode.kind == "tsync" else None, int)
    D = cfg.num("schedule", "D", None, int)
    if D is None and mode.D is not None and not math.isinf(mode.D):
        D = int(mode.D)
    q = _floats(cfg.get("schedule", "q")) or analysis.qm_from_rates(activation.mean_gaps()).tolist()
    p_bar = _floats(cfg.get("schedule", "p_bar"))
    eta = cfg.num("schedule", "eta")
    eta0 = cfg.num("schedule", "eta0")
    if kind == "constant" and eta0 is None and eta is not None and t is not None:
        eta0 = t * eta
    return ScheduleSpec(
        kind=kind, eta0=eta0, eta=eta, L=cfg.num("schedule", "L"), mu=cfg.num("schedule", "mu"),
        D=D, c_eta=cfg.num("schedule", "c_eta"), K=cfg.num("schedule", "K", max_k, int),
        K0=cfg.num("schedule", "K0"), q=tuple(q), p_bar=tuple(p_bar), rho=cfg.num("schedule", "rho"),
        eta_bar=cfg.num("schedule", "eta_bar"), t=t,
        q_variant=cfg.choice("schedule", "q_variant", ("sqrt", "linear"), "sqrt"),
        c_variant=cfg.choice("schedule", "c_variant", ("min", "max"), "min"))


# -- evaluation -------------------------------------------------------------

def evaluate_objective(head: ServerHead, params: list, blocks, y, reg: RegularizerSpec,
                       with_grad: bool = True):
    """Clean full-data objective and squared norm of its gradient.

    The regularizer applies to client parameters only.  A frozen head
    contributes no gradient block.
    """
    embs, tapes = [], []
    for p, X in zip(params, blocks):
        h, tape = embed_forward(p, X)
        embs.append(h)
        tapes.append(tape)
    F = loss_forward(head, embs, y) + sum(regularizer_value(reg, p) for p in params)
    if not with_grad:
        return F, math.nan
    hs, _ = _stack(head, embs)
    gz = _dloss_dz(head.loss_kind, _logits(head, hs), np.asarray(y, dtype=float))
    g2 = 0.0
    if head.trainable:
        g0 = grad_server(head, embs, y)
        g2 += float(g0 @ g0)
    for m, (p, tape) in enumerate(zip(params, tapes)):
        gh = gz[:, None] * head.block(m)[None, :]
        gw, gb = client_backprop(p, tape, gh)
        rho = reg.coefficient
        for w, g in zip(p.weights, gw):
            d = g + rho * w
            g2 += float(np.sum(d * d))
        for b, g in zip(p.biases, gb):
            d = g + rho * b
            g2 += float(np.sum(d * d))
    return F, g2


def heldout_metric(head: ServerHead, params: list, ds: VerticalDataset | None) -> float:
    """Accuracy for logistic heads, mean squared error for squared-loss heads."""
    if ds is None:
        return math.nan
    embs = [embed_forward(p, X)[0] for p, X in zip(params, ds.blocks)]
    hs, _ = _stack(head, embs)
    z = _logits(head, hs)
    if head.loss_kind == "binary_logistic":
        return float(np.mean(np.where(z >= 0, 1.0, -1.0) == ds.y))
    return float(np.mean((z - ds.y) ** 2))


def mc_smoothed_objective(fed: Federation, draws: int, rng: Rng) -> float:
    """Monte Carlo estimate of the noise-averaged objective at the current parameters."""
    params = [c.params for c in fed.clients]
    acc = 0.0
    for i in range(draws):
        r = fork_rng(rng, i)
        embs = [embed_forward(p, c._X, c.pert, fork_rng(r, m))[0]
                for m, (p, c) in enumerate(zip(params, fed.clients))]
        acc += loss_forward(fed.server.head, embs, fed.train.y)
    return acc / draws + sum(regularizer_value(fed.reg, p) for p in params)


def _flat_state(fed: Federation) -> np.ndarray:
    parts = [fed.server.head.weights] if fed.server.head.trainable else []
    parts += [c.params.flatten() for c in fed.clients]
    return np.concatenate(parts)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_metrics(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(METRIC_COLUMNS) + "\n")
        for r in rows:
            fh.write(",".join(_fmt(r[c]) for c in METRIC_COLUMNS) + "\n")


def run_experiment(cfg: RunConfig, out_dir=None, fed: Federation | None = None) -> RunLog:
    """Build, initialise, simulate and (if ``out_dir`` is set) write the output files."""
    fed = fed or build_federation(cfg)
    server, clients = fed.server, fed.clients
    if cfg.flag("output", "trace"):
        server.trace = []
    init_pass(server, clients)

    max_k = fed.stop.max_k
    spacing = cfg.choice("eval", "spacing", ("linear", "log"), "linear")
    every = None
    points = None
    if max_k is None:
        every = cfg.num("eval", "every", None, int)
    elif spacing == "log":
        points = log_eval_points(max_k, cfg.num("eval", "per_decade", 10, int))
    else:
        bs = clients[0].batch.batch_size if clients[0].batch.sampling == "uniform" else fed.train.N
        every = cfg.num("eval", "every", max(1, fed.train.N // bs), int)
        points = linear_eval_points(every, max_k)

    want_grad = cfg.flag("eval", "grad", True)
    lyap = cfg.flag("eval", "lyapunov")
    gammas = None
    history = None
    step_hooks = []
    lyap_note = ""
    if lyap:
        D = fed.schedule.spec.D or (int(server.mode.D) if server.mode.D else 1)
        L = fed.schedule.spec.L or 1.0
        eta = fed.schedule(0)[1]
        try:
            gammas = analysis.gamma_schedule(D, L, eta)
        except AnalysisError as exc:
            lyap_note = str(exc)
        if gammas is not None:
            s0 = _flat_state(fed)
            history = deque([s0] * (D + 1), maxlen=D + 1)
            step_hooks.append(lambda: history.append(_flat_state(fed)))

    def hook(k, now):
        params = [c.params for c in clients]
        F, g2 = evaluate_objective(server.head, params, fed.train.blocks, fed.train.y, fed.reg,
                                   want_grad)
        v = math.nan
        if history is not None:
            v = analysis.lyapunov_value(F, list(history), gammas)
        return {"k": k, "virtual_time": now, "train_loss": F, "grad_norm_sq": g2,
                "test_metric": heldout_metric(server.head, params, fed.test),
                "max_tau_read": server.pop_max_tau_read(), "lyapunov": v}

    sched_rng = fork_rng(fed.rng, _SCHEDULER)
    log = run(clients, server, fed.activation, sched_rng, fed.stop, [hook], points,
              step_hooks=step_hooks, eval_every=every)
    log.header = {"seed": cfg.seed, "config": cfg.to_ini(),
                  "schedule": fed.schedule.describe(), "final_k": server.k,
                  "forced_refreshes": server.forced_refreshes,
                  "max_tau_read_total": server.max_tau_read_total}
    if lyap_note:
        log.header["lyapunov_disabled"] = lyap_note
    noisy = any(not c.pert.is_zero for c in clients)
    if noisy:
        draws = cfg.num("eval", "mc_draws", 100, int)
        log.header["smoothed_objective_mc"] = mc_smoothed_objective(fed, draws,
                                                                    fork_rng(fed.rng, _EVAL))
        log.header["smoothed_objective_draws"] = draws
    log.header["trace"] = server.trace
    log.header["tau_hist"] = server.tau_hist
    if out_dir is not None:
        write_outputs(log, cfg, out_dir)
    return log


def write_outputs(log: RunLog, cfg: RunConfig, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    write_metrics(log.rows, os.path.join(out_dir, cfg.get("output", "metrics", "metrics.csv")))
    trace = log.header.get("trace")
    if trace is not None:
        with open(os.path.join(out_dir, "trace.csv"), "w", encoding="utf-8", newline="") as fh:
            fh.write(",".join(TRACE_COLUMNS) + "\n")
            for t, k, kind, m, b, tau in trace:
                fh.write(f"{repr(float(t))},{k},{kind},{m},{b},{tau}\n")
    with open(os.path.join(out_dir, cfg.get("output", "report", "report.txt")), "w",
              encoding="utf-8") as fh:
        fh.write(f"seed = {log.header['seed']}\n")
        fh.write(f"final_k = {log.header['final_k']}\n")
        fh.write(f"end_time = {repr(float(log.end_time))}\n")
        fh.write(f"forced_refreshes = {log.header['forced_refreshes']}\n")
        fh.write(f"max_tau_read = {log.header['max_tau_read_total']}\n")
        if log.updates is not None:
            fh.write("updates_per_client = " + ",".join(str(int(u)) for u in log.updates) + "\n")
        for key in ("smoothed_objective_mc", "smoothed_objective_draws", "lyapunov_disabled"):
            if key in log.header:
                fh.write(f"{key} = {log.header[key]!r}\n" if isinstance(log.header[key], str)
                         else f"{key} = {log.header[key]}\n")
        fh.write("\n[effective_schedule]\n")
        for k, v in log.header["schedule"].items():
            fh.write(f"{k} = {v}\n")
        fh.write("\n# resolved configuration\n")
        fh.write(log.header["config"])
