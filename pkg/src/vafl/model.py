"""Client embeddings, the server head, losses and their hand-written gradients.

Shapes: a single sample is a 1-D feature vector, a minibatch is a 2-D array
with one row per sample.  Batched kernels return per-sample quantities except
:func:`grad_server` and :func:`client_backprop`, which average over the batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import DataError, ModelError, ProtocolError
from .numerics import Rng

__all__ = [
    "ACTIVATIONS",
    "EmbeddingParams",
    "PerturbationSpec",
    "ForwardTape",
    "ServerHead",
    "RegularizerSpec",
    "init_embedding",
    "embed_forward",
    "loss_forward",
    "loss_per_sample",
    "grad_server",
    "grad_embedding",
    "client_backprop",
    "regularizer_value",
    "regularizer_grad",
]

SQRT3 = np.sqrt(3.0)


def _identity(a):
    return a


def _identity_grad(a):
    return np.ones_like(a)


def _relu(a):
    return np.maximum(a, 0.0)


def _relu_grad(a):
    # derivative at exactly 0 is taken as 0
    return (a > 0).astype(a.dtype)


def _tanh_grad(a):
    t = np.tanh(a)
    return 1.0 - t * t


ACTIVATIONS = {
    "identity": (_identity, _identity_grad),
    "relu": (_relu, _relu_grad),
    "tanh": (np.tanh, _tanh_grad),
}

# Lipschitz constant of each activation
ACTIVATION_LIPSCHITZ = {"identity": 1.0, "relu": 1.0, "tanh": 1.0}


@dataclass
class EmbeddingParams:
    """Layers ``u_l = act(w_l u_{l-1} + b_l)``; the last layer uses ``output_activation``."""

    weights: list
    biases: list
    activation: str = "identity"
    output_activation: str = "identity"

    def __post_init__(self):
        if len(self.weights) < 1 or len(self.weights) != len(self.biases):
            raise ModelError("need at least one layer and one bias per layer")
        for name in (self.activation, self.output_activation):
            if name not in ACTIVATIONS:
                raise ModelError(f"unknown activation {name!r}")
        prev = self.weights[0].shape[1]
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or w.shape[1] != prev or b.shape != (w.shape[0],):
                raise ModelError("layer shapes do not chain")
            prev = w.shape[0]

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def dims(self) -> list[int]:
        """Layer widths d_0 (input) through d_L (output)."""
        return [self.input_dim] + [w.shape[0] for w in self.weights]

    def layer_activation(self, l: int) -> str:
        return self.output_activation if l == self.depth - 1 else self.activation

    def arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def copy(self) -> "EmbeddingParams":
        return EmbeddingParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                               self.activation, self.output_activation)

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> "EmbeddingParams":
        vec = np.asarray(vec, dtype=float)
        out, i = [], 0
        for a in self.arrays():
            out.append(vec[i:i + a.size].reshape(a.shape).copy())
            i += a.size
        if i != vec.size:
            raise ModelError("flat vector length does not match parameters")
        L = self.depth
        return EmbeddingParams(out[:L], out[L:], self.activation, self.output_activation)

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())


def init_embedding(input_dim: int, hidden: list[int] | tuple[int, ...], output_dim: int,
                   rng: Rng | None, activation: str = "relu", output_activation: str = "identity",
                   scale: float = 1.0) -> EmbeddingParams:
    """Gaussian init with std ``scale/sqrt(fan_in)``, zero biases.  ``rng=None`` gives zeros."""
    dims = [input_dim, *hidden, output_dim]
    ws, bs = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        if rng is None:
            ws.append(np.zeros((d_out, d_in)))
        else:
            ws.append(rng.gen.normal(0.0, scale / np.sqrt(d_in), (d_out, d_in)))
        bs.append(np.zeros(d_out))
    return EmbeddingParams(ws, bs, activation, output_activation)


@dataclass
class PerturbationSpec:
    """Noise added to every pre-activation.

    Hidden layer l gets U[-sqrt(3) c_l, sqrt(3) c_l] (variance c_l^2), the
    output layer gets N(0, c^2).
    """

    hidden_stds: list = field(default_factory=list)
    output_std: float = 0.0

    def __post_init__(self):
        self.hidden_stds = [float(c) for c in self.hidden_stds]
        if any(c < 0 for c in self.hidden_stds) or self.output_std < 0:
            raise ModelError("noise levels must be nonnegative")

    @classmethod
    def zero(cls, depth: int) -> "PerturbationSpec":
        return cls([0.0] * (depth - 1), 0.0)

    @property
    def is_zero(self) -> bool:
        return self.output_std == 0 and all(c == 0 for c in self.hidden_stds)

    def check_depth(self, depth: int) -> None:
        if len(self.hidden_stds) != depth - 1:
            raise ModelError(f"perturbation spec has {len(self.hidden_stds)} hidden levels, "
                             f"embedding has {depth - 1} hidden layers")


@dataclass
class ForwardTape:
    inputs: list          # u_{l-1} for each layer, 2-D
    pre: list             # w_l u_{l-1} + b_l + Z_l, 2-D
    noise: list           # Z_l (None when that layer was noiseless)
    single: bool = False  # forward was called on a 1-D sample


def embed_forward(params: EmbeddingParams, x, pert: PerturbationSpec | None = None,
                  rng: Rng | None = None, noise: list | None = None):
    """Perturbed forward pass.  Returns ``(h, tape)``.

    ``noise`` replays previously recorded per-layer noise instead of drawing.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    u = x[None, :] if single else x
    if u.ndim != 2 or u.shape[1] != params.input_dim:
        raise ModelError(f"input has shape {x.shape}, embedding expects {params.input_dim} features")
    L = params.depth
    if pert is not None:
        pert.check_depth(L)
    inputs, pres, noises = [], [], []
    for l in range(L):
        w, b = params.weights[l], params.biases[l]
        a = u @ w.T + b
        z = None
        if noise is not None:
            z = noise[l]
        elif pert is not None:
            if l < L - 1:
                c = pert.hidden_stds[l]
                if c > 0:
                    z = rng.gen.uniform(-SQRT3 * c, SQRT3 * c, a.shape)
            elif pert.output_std > 0:
                z = rng.gen.normal(0.0, pert.output_std, a.shape)
        if z is not None:
            a = a + z
        inputs.append(u)
        pres.append(a)
        noises.append(z)
        u = ACTIVATIONS[params.layer_activation(l)][0](a)
    tape = ForwardTape(inputs, pres, noises, single)
    return (u[0] if single else u), tape


def client_backprop(params: EmbeddingParams, tape: ForwardTape, g_h):
    """Batch-averaged gradient of ``sum_n g_h[n] . h_n`` w.r.t. every ``w_l`` and ``b_l``.

    Returns ``(grad_weights, grad_biases)`` as lists aligned with the layers.
    Recorded noise is treated as a constant.
    """
    L = params.depth
    if len(tape.pre) != L or tape.inputs[0].shape[1] != params.input_dim:
        raise ModelError("tape does not belong to these parameters")
    g = np.asarray(g_h, dtype=float)
    if g.ndim == 0:
        g = g.reshape(1, 1)
    elif g.ndim == 1:
        g = g[None, :] if tape.single else g[:, None]
    B = g.shape[0]
    if g.shape != tape.pre[-1].shape:
        raise ModelError(f"upstream gradient shape {g.shape} != embedding shape {tape.pre[-1].shape}")
    gw, gb = [None] * L, [None] * L
    for l in range(L - 1, -1, -1):
        delta = g * ACTIVATIONS[params.layer_activation(l)][1](tape.pre[l])
        gw[l] = delta.T @ tape.inputs[l] / B
        gb[l] = delta.sum(axis=0) / B
        if l > 0:
            g = delta @ params.weights[l]
    return gw, gb


@dataclass
class ServerHead:
    """Linear head over the concatenated embeddings; the last weight is the bias."""

    weights: np.ndarray
    widths: list
    trainable: bool = True
    loss_kind: str = "binary_logistic"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.widths = [int(w) for w in self.widths]
        if self.weights.shape != (sum(self.widths) + 1,):
            raise ModelError(f"head has {self.weights.size} weights, expected {sum(self.widths) + 1}")
        if self.loss_kind not in ("binary_logistic", "squared"):
            raise ModelError(f"unknown loss {self.loss_kind!r}")
        self.offsets = np.concatenate([[0], np.cumsum(self.widths)]).astype(int)

    @property
    def n_clients(self) -> int:
        return len(self.widths)

    def block(self, m: int) -> np.ndarray:
        if not 0 <= m < self.n_clients:
            raise ProtocolError(f"client index {m} out of range")
        return self.weights[self.offsets[m]:self.offsets[m + 1]]

    def copy(self) -> "ServerHead":
        return ServerHead(self.weights.copy(), list(self.widths), self.trainable, self.loss_kind)


def _stack(head: ServerHead, embeddings):
    if len(embeddings) != head.n_clients:
        raise ModelError(f"got {len(embeddings)} embeddings for {head.n_clients} clients")
    hs = [np.asarray(h, dtype=float) for h in embeddings]
    single = hs[0].ndim == 1
    if single:
        hs = [h[None, :] for h in hs]
    for h, w in zip(hs, head.widths):
        if h.ndim != 2 or h.shape[1] != w:
            raise ModelError("embedding width does not match the head")
    return hs, single


def _logits(head: ServerHead, hs) -> np.ndarray:
    z = np.full(hs[0].shape[0], head.weights[-1])
    for m, h in enumerate(hs):
        z += h @ head.weights[head.offsets[m]:head.offsets[m + 1]]
    return z


def _check_labels(kind: str, y: np.ndarray) -> None:
    if kind == "binary_logistic" and not np.all((y == 1.0) | (y == -1.0)):
        raise DataError("logistic labels must be -1 or +1")
    if not np.all(np.isfinite(y)):
        raise DataError("labels must be finite")


def _dloss_dz(kind: str, z: np.ndarray, y: np.ndarray) -> np.ndarray:
    if kind == "binary_logistic":
        return -y * expit(-y * z)
    return z - y


def loss_per_sample(head: ServerHead, embeddings, y) -> np.ndarray:
    hs, _ = _stack(head, embeddings)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    _check_labels(head.loss_kind, y)
    z = _logits(head, hs)
    if head.loss_kind == "binary_logistic":
        return np.logaddexp(0.0, -y * z)
    return 0.5 * (z - y) ** 2


def loss_forward(head: ServerHead, embeddings, y) -> float:
    """Loss of one sample, or the mean loss of a batch."""
    return float(np.mean(loss_per_sample(head, embeddings, y)))


def grad_server(head: ServerHead, embeddings, y) -> np.ndarray:
    """Batch-mean gradient of the loss w.r.t. the head weights (zero when frozen)."""
    hs, _ = _stack(head, embeddings)
    if not head.trainable:
        return np.zeros_like(head.weights)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    _check_labels(head.loss_kind, y)
    gz = _dloss_dz(head.loss_kind, _logits(head, hs), y)
    B = gz.shape[0]
    return np.concatenate([gz @ h / B for h in hs] + [[gz.sum() / B]])


def grad_embedding(head: ServerHead, embeddings, y, m: int) -> np.ndarray:
    """Per-sample gradient of the loss w.r.t. client ``m``'s embedding."""
    w_m = head.block(m)
    hs, single = _stack(head, embeddings)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    _check_labels(head.loss_kind, y)
    gz = _dloss_dz(head.loss_kind, _logits(head, hs), y)
    g = gz[:, None] * w_m[None, :]
    return g[0] if single else g


@dataclass(frozen=True)
class RegularizerSpec:
    """``r(theta) = coefficient/2 * ||theta||^2``."""

    coefficient: float = 0.0
    kind: str = "l2"

    def __post_init__(self):
        if self.kind != "l2":
            raise ModelError(f"unsupported regularizer {self.kind!r}")
        if self.coefficient < 0:
            raise ModelError("regularizer coefficient must be >= 0")


def regularizer_value(spec: RegularizerSpec, theta) -> float:
    if isinstance(theta, EmbeddingParams):
        sq = sum(float(np.sum(a * a)) for a in theta.arrays())
    else:
        theta = np.asarray(theta, dtype=float)
        sq = float(np.sum(theta * theta))
    return 0.5 * spec.coefficient * sq


def regularizer_grad(spec: RegularizerSpec, theta):
    """``coefficient * theta``; keeps the structure of ``theta``."""
    if isinstance(theta, EmbeddingParams):
        return ([spec.coefficient * w for w in theta.weights],
                [spec.coefficient * b for b in theta.biases])
    return spec.coefficient * np.asarray(theta, dtype=float)
