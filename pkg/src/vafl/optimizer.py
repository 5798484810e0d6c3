"""Stepsize schedules, geometric-delay tail constants and the plain gradient step."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigurationError, ModelError
from .model import EmbeddingParams

__all__ = ["ScheduleSpec", "Schedule", "TailConstants", "stepsize", "tail_constants",
           "delay_tail_term", "apply_update"]

KINDS = ("constant", "nc_bounded", "sc_bounded", "nc_unbounded", "sc_unbounded")


@dataclass
class ScheduleSpec:
    """Constants for one stepsize rule.

    ``q_variant`` picks ``min_m sqrt(q_m)`` ("sqrt", the default) or
    ``min_m q_m`` ("linear", a more conservative choice) for sc_bounded.
    ``c_variant`` picks ``min_m sqrt(c_m)`` or ``max_m sqrt(c_m)`` for
    nc_unbounded.  ``sigma0``, ``sigma`` and ``L_blocks`` are carried as
    metadata only.
    """

    kind: str = "constant"
    eta0: float | None = None
    eta: float | None = None
    L: float | None = None
    mu: float | None = None
    D: int | None = None
    c_eta: float | None = None
    K: int | None = None
    K0: float | None = None
    q: tuple = ()
    p_bar: tuple = ()
    rho: float | None = None
    eta_bar: float | None = None
    t: int | None = None
    q_variant: str = "sqrt"
    c_variant: str = "min"
    sigma0: float | None = None
    sigma: tuple = ()
    L_blocks: tuple = ()

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v not in (None, ())}


@dataclass
class TailConstants:
    """``c_m`` and ``nu`` per client for the tail law ``P(tau = d) <= p_bar_m rho^d``."""

    p_bar: np.ndarray
    rho: float
    c: np.ndarray
    nu_per_client: np.ndarray
    nu: float

    def c_md(self, d: int) -> np.ndarray:
        return delay_tail_term(self.p_bar, self.rho, d)


def delay_tail_term(p_bar, rho: float, d: int):
    """``sum_{s>=d} s p_bar rho^s`` in closed form."""
    p_bar = np.asarray(p_bar, dtype=float)
    return p_bar * (d * rho ** d / (1 - rho) + rho ** (d + 1) / (1 - rho) ** 2)


def tail_constants(p_bar, rho: float, mu: float | None = None, q=None,
                   eta_bar: float | None = None) -> TailConstants:
    if not 0 < rho < 1:
        raise ConfigurationError(f"rho must lie in (0, 1), got {rho}")
    p_bar = np.atleast_1d(np.asarray(p_bar, dtype=float))
    if np.any(p_bar <= 0):
        raise ConfigurationError("p_bar must be positive")
    c = p_bar * (rho / (1 - rho) ** 2 + 2 * rho ** 2 / (1 - rho) ** 3)
    if mu is None or q is None or eta_bar is None:
        nu_m = np.full_like(c, np.nan)
    else:
        q = np.broadcast_to(np.asarray(q, dtype=float), c.shape)
        nu_m = np.minimum((1 - rho) * c / (20 + c) / eta_bar, mu * q / 2)
    return TailConstants(p_bar, float(rho), c, nu_m, float(np.min(nu_m)))


def _need(spec: ScheduleSpec, *names):
    missing = [n for n in names if getattr(spec, n) in (None, ())]
    if missing:
        raise ConfigurationError(f"schedule {spec.kind!r} needs {', '.join(missing)}")


class Schedule:
    """Resolved schedule; ``sched(k)`` returns ``(eta0, eta_m)``."""

    def __init__(self, spec: ScheduleSpec):
        if spec.kind not in KINDS:
            raise ConfigurationError(f"unknown schedule kind {spec.kind!r}")
        if spec.t is not None and spec.t < 1:
            raise ConfigurationError("t must be >= 1")
        self.spec = spec
        self.K0 = spec.K0
        self.nu = None
        self.tail = None
        self._const = None
        kind = spec.kind
        t = spec.t or 1
        if kind == "constant":
            if spec.eta is None and spec.eta0 is None:
                raise ConfigurationError("constant schedule needs eta and/or eta0")
            eta = spec.eta if spec.eta is not None else spec.eta0
            eta0 = spec.eta0 if spec.eta0 is not None else eta
            self._const = (float(eta0), float(eta))
            return
        if spec.L is None or spec.L <= 0:
            raise ConfigurationError("schedule needs L > 0")
        if kind in ("sc_bounded", "sc_unbounded") and (spec.mu is None or spec.mu <= 0):
            raise ConfigurationError("strongly convex schedules need mu > 0")
        if kind in ("nc_bounded", "sc_bounded"):
            _need(spec, "D")
            if spec.D < 1:
                raise ConfigurationError("D must be >= 1")
        if kind in ("nc_bounded", "nc_unbounded"):
            _need(spec, "c_eta", "K")
            if spec.c_eta <= 0:
                raise ConfigurationError("c_eta must be > 0")
        if kind == "nc_bounded":
            base = min(1.0 / (4 * (1 + spec.D) * spec.L), spec.c_eta / math.sqrt(spec.K))
            self._const = (base, base / t)
        elif kind == "sc_bounded":
            _need(spec, "q")
            q = np.asarray(spec.q, dtype=float)
            self.q_factor = float(np.min(np.sqrt(q)) if spec.q_variant == "sqrt" else np.min(q))
            if self.K0 is None:
                D, L, mu = spec.D, spec.L, spec.mu
                if spec.t is None:
                    qm = float(np.min(q))
                    self.K0 = 4 * (4 * (D + 1) * L + 2 * mu * qm * D) / (mu * qm)
                else:
                    sq = float(np.min(np.sqrt(q)))
                    self.K0 = 4 * (4 * (D + 1) * L + mu * sq * D) / (mu * t * sq)
            self.coef = 4.0 / (spec.mu * self.q_factor)
        else:
            _need(spec, "p_bar", "rho")
            self.tail = tail_constants(spec.p_bar, spec.rho)
            sqrt_c = np.sqrt(self.tail.c)
            if kind == "nc_unbounded":
                cf = float(np.min(sqrt_c) if spec.c_variant == "min" else np.max(sqrt_c))
                base = min(1.0 / (4 * (1 + cf) * spec.L), spec.c_eta / math.sqrt(spec.K))
                self._const = (base, base / t)
            else:
                _need(spec, "q")
                eta_bar = spec.eta_bar
                if eta_bar is None:
                    eta_bar = 1.0 / (4 * (1 + float(np.max(sqrt_c))) * spec.L)
                self.tail = tail_constants(spec.p_bar, spec.rho, spec.mu, spec.q, eta_bar)
                self.nu = self.tail.nu
                if self.K0 is None:
                    self.K0 = 4 * (1 + float(np.max(sqrt_c))) * spec.L / (t * self.nu)
                self.coef = 2.0 / self.nu
        if self.K0 is not None and self.K0 <= 0:
            raise ConfigurationError("K0 must be > 0")

    def __call__(self, k: int):
        if self._const is not None:
            return self._const
        base = self.coef / (k + self.K0)
        return base, base / (self.spec.t or 1)

    def describe(self) -> dict:
        out = {"kind": self.spec.kind}
        out.update(self.spec.to_dict())
        if self.K0 is not None:
            out["K0"] = self.K0
        if self.nu is not None:
            out["nu"] = self.nu
        e0, em = self(0)
        out["eta0_at_0"], out["eta_m_at_0"] = e0, em
        return out


def stepsize(spec: ScheduleSpec, k: int):
    """``(eta0^k, eta_m^k)`` for one iteration; builds the schedule each call."""
    return Schedule(spec)(k)


def apply_update(params, gradient, eta: float):
    """``params - eta * gradient`` for arrays, lists of arrays or :class:`EmbeddingParams`."""
    if isinstance(params, EmbeddingParams):
        gw, gb = gradient
        if len(gw) != params.depth:
            raise ModelError("gradient does not match parameters")
        for w, g in zip(params.weights, gw):
            if w.shape != g.shape:
                raise ModelError("gradient shape mismatch")
        return EmbeddingParams([w - eta * g for w, g in zip(params.weights, gw)],
                               [b - eta * g for b, g in zip(params.biases, gb)],
                               params.activation, params.output_activation)
    if isinstance(params, (list, tuple)):
        return [apply_update(p, g, eta) for p, g in zip(params, gradient)]
    p = np.asarray(params, dtype=float)
    g = np.asarray(gradient, dtype=float)
    if p.shape != g.shape:
        raise ModelError(f"gradient shape {g.shape} != parameter shape {p.shape}")
    return p - eta * g
