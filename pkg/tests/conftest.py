import numpy as np
import pytest

from vafl.data import BatchSpec
from vafl.model import PerturbationSpec, RegularizerSpec, ServerHead, init_embedding
from vafl.numerics import fork_rng, make_rng
from vafl.optimizer import Schedule, ScheduleSpec
from vafl.protocol import ClientState, ProtocolMode, ServerState, init_pass

# Acceptance results collected by tests/test_acceptance.py and printed once at the end.
ACCEPTANCE_RESULTS = {}


def record_acceptance(number: int, title: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE_RESULTS[number] = (title, passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        title, ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] #{n:<2d} {title}: {detail}")


def central_diff(f, x, h=1e-6):
    """Central finite-difference gradient of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


@pytest.fixture
def rel_close():
    def check(a, b, tol):
        a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
        scale = max(np.max(np.abs(b)), 1e-8)
        assert np.max(np.abs(a - b)) <= tol * scale, (a, b)
    return check


def small_federation(M=2, N=30, p=3, hidden=(), mode=ProtocolMode(), eta0=0.1, eta=0.1, batch=4,
               sampling="uniform", seed=0, loss="binary_logistic", trainable=True, reg=0.0,
               order="upload_first", push_all=False, noise=0.0, debug=False, record=False):
    """Random linear-or-MLP federation with a populated cache; returns (server, clients, X, y)."""
    rng = make_rng(seed)
    X = rng.gen.normal(size=(N, M * p))
    y = np.sign(rng.gen.normal(size=N)) if loss == "binary_logistic" else rng.gen.normal(size=N)
    y[y == 0] = 1.0
    sched = Schedule(ScheduleSpec("constant", eta0=eta0, eta=eta))
    params = [init_embedding(p, list(hidden), 1, fork_rng(rng, 10 + m)) for m in range(M)]
    head = ServerHead(fork_rng(rng, 99).gen.normal(size=M + 1), [1] * M, trainable, loss)
    server = ServerState(head, y, mode, sched, record_staleness=record, debug=debug)
    clients = [ClientState(m, X[:, m * p:(m + 1) * p], params[m],
                           PerturbationSpec([noise] * len(hidden), noise), RegularizerSpec(reg),
                           BatchSpec(batch, sampling), fork_rng(rng, m), sched, order, push_all)
               for m in range(M)]
    server.refresher = lambda req: clients[req.m].on_refresh(req)
    init_pass(server, clients)
    return server, clients, X, y
