"""Seeded random streams and the small set of distributions the simulator draws from.

Every stream is a PCG64 generator seeded from ``numpy.random.SeedSequence(seed,
spawn_key=path)``.  ``path`` is the tuple of stream ids used to reach the
stream, so a child stream depends only on the root seed and the ids along the
way, never on how many draws its parent or siblings have made.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

__all__ = ["Rng", "DistSpec", "make_rng", "fork_rng", "sample"]

_MASK64 = (1 << 64) - 1


class Rng:
    """A forkable random stream.

    ``seed`` is the 64-bit root seed and ``path`` the tuple of stream ids
    leading to this stream (empty for the root).
    """

    __slots__ = ("seed", "path", "gen")

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        seed = int(seed)
        if seed < 0 or seed > _MASK64:
            raise ConfigurationError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self.path = tuple(int(p) for p in path)
        ss = np.random.SeedSequence(seed, spawn_key=self.path)
        self.gen = np.random.Generator(np.random.PCG64(ss))

    @property
    def stream_id(self) -> int | None:
        return self.path[-1] if self.path else None

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"


def make_rng(seed: int) -> Rng:
    return Rng(seed)


def fork_rng(rng: Rng, stream_id: int) -> Rng:
    """Child stream determined by ``(rng.seed, rng.path + (stream_id,))``.

    The child does not consume or observe the parent's state.
    """
    if stream_id < 0:
        raise ConfigurationError("stream_id must be nonnegative")
    return Rng(rng.seed, rng.path + (stream_id,))


@dataclass(frozen=True)
class DistSpec:
    """A scalar law replicated ``dim`` times.

    kind is one of ``gaussian`` (mean, std), ``uniform_symmetric``
    (half_width), ``exponential`` (rate) or ``categorical`` (weights).
    """

    kind: str
    dim: int = 1
    mean: float = 0.0
    std: float = 1.0
    half_width: float = 0.0
    rate: float = 1.0
    weights: tuple[float, ...] = field(default_factory=tuple)

    def validate(self) -> None:
        if self.dim < 1:
            raise ConfigurationError("dim must be >= 1")
        if self.kind == "gaussian":
            if not self.std >= 0:
                raise ConfigurationError("gaussian std must be >= 0")
        elif self.kind == "uniform_symmetric":
            if not self.half_width >= 0:
                raise ConfigurationError("half_width must be >= 0")
        elif self.kind == "exponential":
            if not self.rate > 0:
                raise ConfigurationError("exponential rate must be > 0")
        elif self.kind == "categorical":
            w = np.asarray(self.weights, dtype=float)
            if w.size == 0 or np.any(w < 0) or not w.sum() > 0:
                raise ConfigurationError("categorical weights must be nonnegative with positive sum")
        else:
            raise ConfigurationError(f"unknown distribution kind {self.kind!r}")


def sample(spec: DistSpec, rng: Rng, size: int | None = None) -> np.ndarray:
    """Draw ``spec.dim`` i.i.d. values (or ``(size, dim)`` when size is given)."""
    spec.validate()
    shape = (spec.dim,) if size is None else (size, spec.dim)
    g = rng.gen
    if spec.kind == "gaussian":
        if spec.std == 0:
            return np.full(shape, float(spec.mean))
        return g.normal(spec.mean, spec.std, shape)
    if spec.kind == "uniform_symmetric":
        if spec.half_width == 0:
            return np.zeros(shape)
        return g.uniform(-spec.half_width, spec.half_width, shape)
    if spec.kind == "exponential":
        return g.exponential(1.0 / spec.rate, shape)
    w = np.asarray(spec.weights, dtype=float)
    return g.choice(w.size, size=shape, p=w / w.sum())
