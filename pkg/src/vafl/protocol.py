"""Server and client state machines for asynchronous, t-synchronous and bounded-delay training.

Only four message types cross the client/server boundary.  Clients send
embeddings (``Upload``) and gradient requests (``Query``); the server answers
with per-sample embedding gradients (``QueryReply``) and, in bounded-delay
mode, asks for fresh embeddings (``ForcedRefreshRequest``).  Raw features and
client parameters never appear in a message.

Staleness bookkeeping: ``DelayTable.last_reset[n, m]`` is the iteration at
which cell (n, m) was last written, so the delay of that cell at iteration k
is ``k - last_reset``.  Writing a cell during iteration k and then advancing
the counter gives a delay of 1 at k+1, and every untouched cell ages by one,
which is exactly the recursion on tau.  The initial pass is recorded as
iteration -1 (all delays equal 1 at k = 0) while the cache stamp is 0.
Refreshes outside an update (forced or pushed) are recorded as iteration
k - 1, so a refreshed cell is read with delay 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import BatchSpec, sample_minibatch
from .errors import ConfigurationError, ProtocolError
from .model import (EmbeddingParams, PerturbationSpec, RegularizerSpec, ServerHead,
                    client_backprop, embed_forward, grad_embedding, grad_server)
from .numerics import Rng

__all__ = [
    "Upload", "Query", "QueryReply", "ForcedRefreshRequest",
    "EmbeddingCache", "DelayTable", "ProtocolMode", "ServerState", "ClientState",
    "init_pass", "update_delays", "enforce_bounded_delay", "handle_query", "handle_upload",
    "client_step", "DirectLink",
]


# -- messages ---------------------------------------------------------------

@dataclass(frozen=True)
class Upload:
    m: int
    indices: np.ndarray
    embeddings: np.ndarray
    refresh_only: bool = False  # cache write without a server-model update


@dataclass(frozen=True)
class Query:
    m: int
    indices: np.ndarray


@dataclass(frozen=True)
class QueryReply:
    m: int
    indices: np.ndarray
    gradients: np.ndarray
    k: int


@dataclass(frozen=True)
class ForcedRefreshRequest:
    m: int
    indices: np.ndarray


# -- server-side tables -----------------------------------------------------

class EmbeddingCache:
    """Latest embedding of every (sample, client) cell and the iteration that produced it."""

    def __init__(self, N: int, widths):
        self.N = N
        self.widths = list(widths)
        self.table = [np.zeros((N, w)) for w in self.widths]
        self.stamp = np.zeros((N, len(self.widths)), dtype=np.int64)
        self.populated = np.zeros(len(self.widths), dtype=bool)

    def write(self, m: int, idx, emb, k: int) -> None:
        self.table[m][idx] = emb
        self.stamp[idx, m] = k

    def rows(self, idx):
        return [t[idx] for t in self.table]


class DelayTable:
    """Per-cell staleness counters stored as the iteration of the last reset."""

    def __init__(self, N: int, M: int):
        self.k = 0
        self.last_reset = np.full((N, M), -1, dtype=np.int64)

    @property
    def tau(self) -> np.ndarray:
        return self.k - self.last_reset

    def tau_at(self, idx, m: int) -> np.ndarray:
        return self.k - self.last_reset[idx, m]

    def reset(self, m: int, idx) -> None:
        self.last_reset[idx, m] = self.k


def update_delays(delays: DelayTable, m_k, batch_indices) -> None:
    """Reset the uploaded cells and age the rest by one iteration.

    ``m_k``/``batch_indices`` may be sequences when several clients upload in
    the same iteration (t-synchronous mode).
    """
    if np.isscalar(m_k):
        delays.reset(int(m_k), batch_indices)
    else:
        for m, idx in zip(m_k, batch_indices):
            delays.reset(int(m), idx)
    delays.k += 1


@dataclass(frozen=True)
class ProtocolMode:
    """``async``; ``tsync`` with barrier size ``t``; ``bounded`` with maximum delay ``D``."""

    kind: str = "async"
    t: int | None = None
    D: float | None = None

    def __post_init__(self):
        if self.kind not in ("async", "tsync", "bounded"):
            raise ConfigurationError(f"unknown protocol mode {self.kind!r}")
        if self.kind == "tsync" and (self.t is None or self.t < 1):
            raise ConfigurationError("tsync mode needs t >= 1")
        if self.kind == "bounded" and (self.D is None or self.D < 1):
            raise ConfigurationError("bounded mode needs D >= 1")

    @property
    def bound(self) -> float:
        return math.inf if self.D is None else float(self.D)


class ServerState:
    """Label holder: head parameters, embedding cache, delay table and global counter.

    ``schedule(k)`` gives ``(eta0, eta_m)``.  ``refresher`` delivers a
    :class:`ForcedRefreshRequest` to the owning client and returns its
    refresh-only :class:`Upload`; only bounded mode needs it.
    """

    def __init__(self, head: ServerHead, y, mode: ProtocolMode, schedule, refresher=None,
                 record_staleness: bool = False, debug: bool = False):
        self.head = head
        self.y = np.asarray(y, dtype=float)
        self.N = self.y.shape[0]
        self.M = head.n_clients
        self.mode = mode
        if mode.kind == "tsync" and mode.t > self.M:
            raise ConfigurationError(f"t = {mode.t} exceeds the number of clients {self.M}")
        self.schedule = schedule
        self.refresher = refresher
        self.cache = EmbeddingCache(self.N, head.widths)
        self.delays = DelayTable(self.N, self.M)
        self.pending: dict[int, Upload] = {}
        self.release_hooks = []
        self.debug = debug
        self.now = 0.0
        self.trace = None
        self.forced_refreshes = 0
        self.max_tau_read = 0          # since the last call to pop_max_tau_read
        self.max_tau_read_total = 0
        self.tau_hist = [np.zeros(64, dtype=np.int64) for _ in range(self.M)] if record_staleness else None

    @property
    def k(self) -> int:
        return self.delays.k

    def is_pending(self, m: int) -> bool:
        return m in self.pending

    def pop_max_tau_read(self) -> int:
        v, self.max_tau_read = self.max_tau_read, 0
        return v

    # -- bookkeeping helpers ------------------------------------------------

    def _check(self, m: int, idx) -> np.ndarray:
        if not 0 <= m < self.M:
            raise ProtocolError(f"unknown client {m}")
        idx = np.asarray(idx)
        if idx.ndim != 1 or idx.size == 0:
            raise ProtocolError("indices must be a nonempty 1-D array")
        if idx.min() < 0 or idx.max() >= self.N:
            raise ProtocolError("sample index out of range")
        if not self.cache.populated.all():
            raise ProtocolError("cache is not populated; run init_pass first")
        return idx

    def _note_reads(self, taus, record_for=None) -> None:
        if taus.size == 0:
            return
        mx = int(taus.max())
        if mx > self.max_tau_read:
            self.max_tau_read = mx
            if mx > self.max_tau_read_total:
                self.max_tau_read_total = mx
        if record_for is not None and self.tau_hist is not None:
            h = self.tau_hist[record_for]
            if mx >= h.size:
                h = np.concatenate([h, np.zeros(max(mx + 1, 2 * h.size) - h.size, dtype=np.int64)])
                self.tau_hist[record_for] = h
            h += np.bincount(taus, minlength=h.size)

    def _emit(self, kind: str, m: int, batch: int, tau: int) -> None:
        if self.trace is not None:
            self.trace.append((self.now, self.k, kind, m, batch, tau))

    def check_invariants(self) -> None:
        """Staleness identity between cache stamps and delay counters."""
        lr, st = self.delays.last_reset, self.cache.stamp
        ok = (lr == st) | ((lr == -1) & (st == 0))
        if not ok.all():
            raise ProtocolError("cache stamps and delay counters disagree")
        if (st > self.k).any():
            raise ProtocolError("cache stamp in the future")

    def apply_refresh(self, up: Upload) -> None:
        idx = self._check(up.m, up.indices)
        emb = np.asarray(up.embeddings, dtype=float)
        if emb.shape != (idx.size, self.cache.widths[up.m]):
            raise ProtocolError("embedding shape mismatch")
        # a refreshed cell is as fresh as a cached cell can be: delay 1 at this k
        self.cache.write(up.m, idx, emb, self.k - 1)
        self.delays.last_reset[idx, up.m] = self.k - 1


def enforce_bounded_delay(server: ServerState, batch_indices, clients=None) -> int:
    """Refresh every cell about to be read whose delay exceeds the bound.

    Returns the number of refreshed cells.  Refreshes are instantaneous and
    stamped with the current iteration.
    """
    D = server.mode.bound
    if math.isinf(D):
        return 0
    clients = range(server.M) if clients is None else clients
    n = 0
    for j in clients:
        taus = server.delays.tau_at(batch_indices, j)
        stale = batch_indices[taus > D]
        if stale.size == 0:
            continue
        stale = np.unique(stale)
        if server.refresher is None:
            raise ProtocolError("bounded mode needs a refresher to reach the clients")
        reply = server.refresher(ForcedRefreshRequest(j, stale))
        if reply.m != j or not np.array_equal(np.asarray(reply.indices), stale):
            raise ProtocolError("refresh reply does not match the request")
        server.apply_refresh(reply)
        n += stale.size
    server.forced_refreshes += n
    return n


def handle_query(server: ServerState, msg: Query) -> QueryReply:
    """Embedding gradients for client ``msg.m`` from the current head and cache."""
    idx = server._check(msg.m, msg.indices)
    enforce_bounded_delay(server, idx)
    k = server.k
    taus = k - server.delays.last_reset[idx]
    server._note_reads(taus.ravel())
    embs = server.cache.rows(idx)
    g = grad_embedding(server.head, embs, server.y[idx], msg.m)
    server._emit("query", msg.m, idx.size, int(taus.max()))
    return QueryReply(msg.m, idx, g, k)


def _server_step(server: ServerState, uploads) -> None:
    """Write the uploads, take one head step and advance the counter."""
    k = server.k
    for up in uploads:
        server.cache.write(up.m, up.indices, up.embeddings, k)
    eta0, _ = server.schedule(k)
    if server.head.trainable:
        g0 = np.zeros_like(server.head.weights)
        for up in uploads:
            embs = server.cache.rows(up.indices)
            embs[up.m] = up.embeddings
            g0 += grad_server(server.head, embs, server.y[up.indices])
        server.head.weights = server.head.weights - eta0 * (g0 / len(uploads))
    update_delays(server.delays, [u.m for u in uploads], [u.indices for u in uploads])


def handle_upload(server: ServerState, msg: Upload) -> int:
    """Process an upload; returns the iteration index it belongs to."""
    idx = server._check(msg.m, msg.indices)
    emb = np.asarray(msg.embeddings, dtype=float)
    if emb.shape != (idx.size, server.cache.widths[msg.m]):
        raise ProtocolError("embedding shape mismatch")
    if msg.refresh_only:
        server.apply_refresh(msg)
        server._emit("push", msg.m, idx.size, 0)
        return server.k
    msg = Upload(msg.m, idx, emb)
    if server.mode.kind == "tsync":
        if msg.m in server.pending:
            raise ProtocolError(f"client {msg.m} already has an upload in this round")
        server.pending[msg.m] = msg
        server._emit("upload", msg.m, idx.size, 0)
        k = server.k
        if len(server.pending) == server.mode.t:
            uploads = [server.pending[m] for m in sorted(server.pending)]
            _release(server, uploads)
        return k

    others = [j for j in range(server.M) if j != msg.m]
    enforce_bounded_delay(server, idx, others)
    k = server.k
    mx = 0
    for j in others:
        taus = k - server.delays.last_reset[idx, j]
        server._note_reads(taus, record_for=j)
        mx = max(mx, int(taus.max()))
    _server_step(server, [msg])
    server._emit("upload", msg.m, idx.size, mx)
    if server.debug:
        server.check_invariants()
    return k


def _release(server: ServerState, uploads) -> None:
    uploaded = {u.m for u in uploads}
    all_idx = np.unique(np.concatenate([u.indices for u in uploads]))
    others = [j for j in range(server.M) if j not in uploaded]
    enforce_bounded_delay(server, all_idx, others)
    k = server.k
    mx = 0
    for u in uploads:
        for j in range(server.M):
            if j in uploaded:
                continue
            taus = k - server.delays.last_reset[u.indices, j]
            server._note_reads(taus, record_for=j)
            mx = max(mx, int(taus.max()))
    _server_step(server, uploads)
    server.pending.clear()
    server._emit("release", -1, sum(u.indices.size for u in uploads), mx)
    if server.debug:
        server.check_invariants()
    for hook in server.release_hooks:
        hook()


# -- clients ----------------------------------------------------------------

class ClientState:
    """Feature holder m: its block of features, local model and random streams.

    ``step_order`` is ``upload_first`` (sample, upload, query, update) or
    ``update_first`` (query, update, then sample and upload).  With ``push_all``
    every upload is followed by a refresh-only upload of all other samples.
    """

    def __init__(self, m: int, X: np.ndarray, params: EmbeddingParams, pert: PerturbationSpec,
                 reg: RegularizerSpec, batch: BatchSpec, rng: Rng, schedule,
                 step_order: str = "upload_first", push_all: bool = False):
        if step_order not in ("upload_first", "update_first"):
            raise ConfigurationError(f"unknown step order {step_order!r}")
        pert.check_depth(params.depth)
        self.m = m
        self._X = np.asarray(X, dtype=float)
        self.params = params
        self.pert = pert
        self.reg = reg
        self.batch = batch
        self.schedule = schedule
        self.step_order = step_order
        self.push_all = push_all
        from .numerics import fork_rng
        self.rng_batch = fork_rng(rng, 0)
        self.rng_noise = fork_rng(rng, 1)
        self._pending = None  # (indices, tape) awaiting a query in update_first order
        self.updates = 0

    @property
    def N(self) -> int:
        return self._X.shape[0]

    def embed(self, idx):
        return embed_forward(self.params, self._X[idx], self.pert, self.rng_noise)

    def on_refresh(self, req: ForcedRefreshRequest) -> Upload:
        h, _ = self.embed(req.indices)
        return Upload(self.m, req.indices, h, refresh_only=True)

    def _update(self, tape, reply: QueryReply) -> None:
        gw, gb = client_backprop(self.params, tape, reply.gradients)
        _, eta = self.schedule(reply.k)
        rho = self.reg.coefficient
        p = self.params
        p.weights = [w - eta * (g + rho * w) for w, g in zip(p.weights, gw)]
        p.biases = [b - eta * (g + rho * b) for b, g in zip(p.biases, gb)]
        self.updates += 1

    def _upload_batch(self):
        idx = sample_minibatch(self.N, self.batch, self.rng_batch)
        h, tape = self.embed(idx)
        yield Upload(self.m, idx, h)
        if self.push_all:
            rest = np.setdiff1d(np.arange(self.N), idx)
            if rest.size:
                hr, _ = self.embed(rest)
                yield Upload(self.m, rest, hr, refresh_only=True)
        return idx, tape

    def activation(self):
        """One activation as a generator of outgoing messages.

        The driver sends back the server's answer to each message (the
        iteration index for uploads, a :class:`QueryReply` for queries).
        """
        if self.step_order == "upload_first":
            idx, tape = yield from self._upload_batch()
            reply = yield Query(self.m, idx)
            self._update(tape, reply)
        else:
            if self._pending is None:
                idx = sample_minibatch(self.N, self.batch, self.rng_batch)
                _, tape = self.embed(idx)
            else:
                idx, tape = self._pending
            reply = yield Query(self.m, idx)
            self._update(tape, reply)
            self._pending = yield from self._upload_batch()


class DirectLink:
    """Zero-latency delivery: every message is handled as soon as it is sent."""

    def __init__(self, server: ServerState, observer=None):
        self.server = server
        self.observer = observer

    def deliver(self, msg):
        if self.observer is not None:
            self.observer(msg)
        if isinstance(msg, Upload):
            return handle_upload(self.server, msg)
        if isinstance(msg, Query):
            reply = handle_query(self.server, msg)
            if self.observer is not None:
                self.observer(reply)
            return reply
        raise ProtocolError(f"unexpected message {type(msg).__name__}")


def client_step(client: ClientState, server: ServerState | DirectLink) -> None:
    """Run one complete activation of ``client`` with zero network latency."""
    link = server if isinstance(server, DirectLink) else DirectLink(server)
    gen = client.activation()
    try:
        msg = next(gen)
        while True:
            msg = gen.send(link.deliver(msg))
    except StopIteration:
        pass


def init_pass(server: ServerState, clients) -> None:
    """Every client uploads perturbed embeddings of all samples; no model update, k stays 0."""
    if server.cache.populated.any():
        raise ProtocolError("init_pass on a populated cache")
    all_idx = np.arange(server.N)
    for c in clients:
        h, _ = c.embed(all_idx)
        if h.shape != (server.N, server.cache.widths[c.m]):
            raise ProtocolError("initial embedding shape mismatch")
        server.cache.write(c.m, all_idx, h, 0)
        server.cache.populated[c.m] = True
    server.delays.last_reset[:] = -1
