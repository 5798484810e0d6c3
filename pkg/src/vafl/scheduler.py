"""Virtual-clock event loop that activates clients and delivers their messages."""
from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .numerics import DistSpec, Rng, fork_rng, sample
from .protocol import ClientState, DirectLink, Query, ServerState, Upload

__all__ = ["ActivationSpec", "EventQueue", "StopSpec", "RunLog", "next_activation", "run",
           "linear_eval_points", "log_eval_points"]


@dataclass(frozen=True)
class ActivationSpec:
    """Per-client activation law.

    ``kind="exponential"``: gaps are exponential.  With the default
    ``parametrization="scale"``, ``lam[m]`` is the mean gap, so client m is
    activated at long-run rate ``1/lam[m]`` and receives the update share
    ``lam[m]^-1 / sum_j lam[j]^-1``.  With ``parametrization="rate"``,
    ``lam[m]`` is the rate and the mean gap is ``1/lam[m]``.

    ``kind="periodic"``: client m is activated every ``period[m]``; all
    clients with the same period fire at the same instants, in index order.

    ``latency`` is an optional law for the one-way network delay of every
    message (negative draws are clipped to zero).
    """

    kind: str = "exponential"
    lam: tuple = ()
    parametrization: str = "scale"
    period: tuple = ()
    latency: DistSpec | None = None

    def __post_init__(self):
        if self.kind not in ("exponential", "periodic"):
            raise ConfigurationError(f"unknown activation kind {self.kind!r}")
        if self.parametrization not in ("scale", "rate"):
            raise ConfigurationError(f"unknown parametrization {self.parametrization!r}")
        vals = self.lam if self.kind == "exponential" else self.period
        if len(vals) == 0 or any(not v > 0 for v in vals):
            raise ConfigurationError("activation parameters must be positive, one per client")
        if self.latency is not None:
            self.latency.validate()

    @property
    def M(self) -> int:
        return len(self.lam if self.kind == "exponential" else self.period)

    def mean_gaps(self) -> np.ndarray:
        if self.kind == "periodic":
            return np.asarray(self.period, dtype=float)
        lam = np.asarray(self.lam, dtype=float)
        return lam if self.parametrization == "scale" else 1.0 / lam


def next_activation(spec: ActivationSpec, m: int, now: float, rng: Rng) -> float:
    if now < 0:
        raise ConfigurationError("virtual time must be nonnegative")
    if spec.kind == "periodic":
        return now + float(spec.period[m])
    lam = float(spec.lam[m])
    scale = lam if spec.parametrization == "scale" else 1.0 / lam
    return now + float(rng.gen.exponential(scale))


class EventQueue:
    """Min-queue on ``(time, sequence number)``; equal times pop in insertion order."""

    def __init__(self):
        self._heap = []
        self._seq = itertools.count()

    def push(self, time: float, event) -> None:
        heapq.heappush(self._heap, (time, next(self._seq), event))

    def pop(self):
        time, _, event = heapq.heappop(self._heap)
        return time, event

    def peek_time(self) -> float:
        return self._heap[0][0] if self._heap else math.inf

    def __len__(self):
        return len(self._heap)


@dataclass(frozen=True)
class StopSpec:
    max_k: int | None = None
    max_time: float | None = None

    def __post_init__(self):
        if self.max_k is None and self.max_time is None:
            raise ConfigurationError("a stop condition (max_k or max_time) is required")
        if self.max_k is not None and self.max_k < 0:
            raise ConfigurationError("max_k must be >= 0")
        if self.max_time is not None and self.max_time < 0:
            raise ConfigurationError("max_time must be >= 0")


@dataclass
class RunLog:
    """Header (resolved configuration) plus one row per evaluation point, ordered by k."""

    header: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)
    activations: np.ndarray | None = None
    updates: np.ndarray | None = None
    end_time: float = 0.0

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)


def linear_eval_points(every: int, max_k: int) -> list[int]:
    every = max(1, int(every))
    return list(range(0, max_k + 1, every)) + ([max_k] if max_k % every else [])


def log_eval_points(max_k: int, per_decade: int = 10) -> list[int]:
    """0, 1 and roughly ``per_decade`` log-spaced integers per decade up to ``max_k``."""
    if max_k <= 0:
        return [0]
    n = int(math.ceil(math.log10(max_k) * per_decade)) + 1
    pts = np.unique(np.round(np.logspace(0, math.log10(max_k), n)).astype(int))
    return sorted({0, *pts.tolist(), max_k})


# stream ids under the scheduler's rng
_ACTIVATION_STREAM = 0
_LATENCY_STREAM = 1


def run(clients: list[ClientState], server: ServerState, activation: ActivationSpec, rng: Rng,
        stop: StopSpec, hooks=(), eval_points=None, observer=None, step_hooks=(),
        eval_every: int | None = None) -> RunLog:
    """Dispatch activations until ``stop``.

    ``hooks`` are callables ``hook(k, virtual_time) -> dict | None`` run at
    every k in ``eval_points`` or every multiple of ``eval_every`` (default:
    only k = 0 and the final k); returned dicts become log rows.
    ``step_hooks`` are called without arguments after every server update.
    Hooks must not modify protocol state.
    ``observer`` sees every message that crosses the network.
    """
    M = len(clients)
    if activation.M != M:
        raise ConfigurationError(f"activation spec covers {activation.M} clients, run has {M}")
    act_rngs = [fork_rng(fork_rng(rng, _ACTIVATION_STREAM), m) for m in range(M)]
    lat_rng = fork_rng(rng, _LATENCY_STREAM)
    link = DirectLink(server, observer)
    queue = EventQueue()
    log = RunLog()
    activations = np.zeros(M, dtype=np.int64)
    updates = np.zeros(M, dtype=np.int64)
    max_k = stop.max_k if stop.max_k is not None else math.inf
    max_time = stop.max_time if stop.max_time is not None else math.inf
    points = sorted(set(eval_points)) if eval_points is not None else [0]
    pi = 0
    now = 0.0

    last_eval = [None]

    def evaluate(k):
        last_eval[0] = k
        for hook in hooks:
            row = hook(k, now)
            if row is not None:
                log.rows.append(row)

    waiting = []

    def on_release():
        for m in waiting:
            queue.push(server.now, ("act", m))
        waiting.clear()

    server.release_hooks.append(on_release)
    channel_free = [0.0] * M  # per-client FIFO: deliveries never overtake each other

    def latency(m, t):
        d = max(0.0, float(sample(activation.latency, lat_rng)[0]))
        t = max(t + d, channel_free[m])
        channel_free[m] = t
        return t

    def finish(m, t):
        updates[m] += 1
        queue.push(next_activation(activation, m, t, act_rngs[m]), ("act", m))

    def advance(m, gen, value, t):
        """Resume client m's activation until it needs to wait for a reply."""
        try:
            msg = gen.send(value)
            while True:
                if activation.latency is None:
                    msg = gen.send(link.deliver(msg))
                elif isinstance(msg, Upload):
                    queue.push(latency(m, t), ("deliver", m, gen, msg))
                    msg = gen.send(None)
                else:
                    queue.push(latency(m, t), ("deliver", m, gen, msg))
                    return
        except StopIteration:
            finish(m, t)

    try:
        if points and points[0] == 0:
            evaluate(0)
            pi = 1
        if max_k > 0 and max_time > 0:
            for m in range(M):
                queue.push(next_activation(activation, m, 0.0, act_rngs[m]), ("act", m))
        k_prev = server.k
        while queue and server.k < max_k:
            if queue.peek_time() > max_time:
                break
            now, ev = queue.pop()
            server.now = now
            if ev[0] == "act":
                m = ev[1]
                if server.is_pending(m):
                    waiting.append(m)
                    continue
                activations[m] += 1
                gen = clients[m].activation()
                advance(m, gen, None, now)
            elif ev[0] == "deliver":
                _, m, gen, msg = ev
                resp = link.deliver(msg)
                if isinstance(msg, Query):
                    queue.push(latency(m, now), ("reply", m, gen, resp))
            else:
                _, m, gen, resp = ev
                advance(m, gen, resp, now)
            if server.k != k_prev:
                k_prev = server.k
                for sh in step_hooks:
                    sh()
                if eval_every is not None:
                    if k_prev % eval_every == 0:
                        evaluate(k_prev)
                    continue
                while pi < len(points) and points[pi] < k_prev:
                    pi += 1
                if pi < len(points) and points[pi] == k_prev:
                    evaluate(k_prev)
                    pi += 1
        if last_eval[0] != server.k:
            evaluate(server.k)
    finally:
        server.release_hooks.remove(on_release)
    log.activations = activations
    log.updates = updates
    log.end_time = now
    return log
