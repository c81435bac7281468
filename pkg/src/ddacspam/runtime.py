"""Coordinator and workers: the distributed fit, refinement, and testing.

The coordinator is a single-threaded state machine that talks to workers
only through wire messages, whatever the transport.  The in-process
transport runs each worker sequentially inside the calling process but
still serializes and parses every message in both directions, so a worker
sees byte-identical inputs to what a socket would deliver; transport
independence of the result is then a property of identical inputs rather
than a hope.  Reductions over workers (Gram sum, selection union) always
walk machines in index order, which pins the floating-point output bits.

Phases of a fit: partition features, push assignments, aggregate the Gram,
broadcast F (identity is used instead under the dac and spam baselines),
collect selections and fitted values, union, refine with ridge.  The
testing path runs the same machinery on a centered-only response and then
pulls per-feature test blocks instead of refining.
"""

from __future__ import annotations

import logging
import socket
import subprocess
import sys
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import NDArray

from . import wire
from .core import Dataset, PartitionPlan, partition_features
from .decorrelate import compute_f, local_gram
from .errors import (
    BindFailure,
    ConnectionLost,
    ConstantColumn,
    DdacError,
    OverSelected,
    ProtocolError,
    Timeout,
    UnknownFeature,
    WorkerFailure,
)
from .grouplasso import _fold_assignments, back_solve, fit_local, qr_blocks
from .inference import TestReport, estimate_sigma, run_test
from .spline import BSplineBasis, build_basis, compute_dn, design_columns, standardize
from .wire import _BitEq

log = logging.getLogger("ddacspam.runtime")

MODES = ("ddac", "dac", "spam")
DEFAULT_TIMEOUT = 600.0  # per-phase worker timeout in socket mode, seconds
DEFAULT_BASE_PORT = 53800
MAX_REFINE_RATIO = 4  # refuse to refine more than 4n basis columns
RIDGE_GRID_LENGTH = 50
RIDGE_GRID_SPAN = 1e4


# ============================================================== worker side


class WorkerSession:
    """Worker-side protocol handler, shared verbatim by both transports.

    A pure state machine: message in, list of reply messages out.  The
    transports own all byte and socket concerns.  State accumulates over
    the conversation (assignment -> design -> fit) so later test-block and
    refinement requests can be answered without recomputation.
    """

    def __init__(self):
        self.machine = 0
        self.done = False
        self._assign: wire.AssignFeatures | None = None
        self._bases: list[BSplineBasis] = []
        self._design: list = []  # DesignBlock per feature
        self._psi_std: NDArray[np.float64] | None = None  # n × Σ d_eff
        self._psi_tilde: NDArray[np.float64] | None = None
        self._offsets: list[int] = []
        self._beta: NDArray[np.float64] | None = None  # flat, Ψ̲ coordinates
        self._fit = None  # GroupLassoFit of the local solve

    # -------------------------------------------------------------- dispatch

    def handle(self, msg: wire.Message) -> list[wire.Message]:
        if isinstance(msg, wire.Shutdown):
            self.done = True
            return []
        if isinstance(msg, wire.AssignFeatures):
            return self._on_assign(msg)
        if isinstance(msg, wire.FOperator):
            return self._on_f_operator(msg)
        if isinstance(msg, wire.TestRequest):
            return self._on_test_request(msg)
        if isinstance(msg, wire.RefineRequest):
            return self._on_refine_request(msg)
        return [
            wire.Error(
                sender=self.machine,
                code=wire.ERR_BAD_STATE,
                message=f"unexpected {type(msg).__name__} in this state",
            )
        ]

    # --------------------------------------------------------------- phases

    def _on_assign(self, msg: wire.AssignFeatures) -> list[wire.Message]:
        if self._assign is not None:
            return [self._bad_state("duplicate AssignFeatures")]
        self.machine = msg.machine
        self._assign = msg
        widths = []
        for pos, j in enumerate(msg.global_indices):
            basis = build_basis(msg.x_cols[:, pos], msg.d_n, feature_index=int(j))
            block = standardize(design_columns(basis, msg.x_cols[:, pos]), int(j))
            self._bases.append(basis)
            self._design.append(block)
            widths.append(block.standardized.shape[1])
        self._offsets = [0]
        for w in widths:
            self._offsets.append(self._offsets[-1] + w)
        if msg.p_i:
            self._psi_std = np.hstack([b.standardized for b in self._design])
        else:
            self._psi_std = np.zeros((msg.n, 0))
        gram = wire.GramContribution(sender=self.machine, gram=local_gram(self._psi_std))
        if msg.expect_f:
            return [gram]
        return [gram] + self._fit_and_reply(f_matrix=None)

    def _on_f_operator(self, msg: wire.FOperator) -> list[wire.Message]:
        if self._assign is None or not self._assign.expect_f:
            return [self._bad_state("FOperator without a pending assignment")]
        if self._fit is not None:
            return [self._bad_state("duplicate FOperator")]
        if msg.f_matrix.shape[0] != self._assign.n:
            return [self._bad_state("F dimension does not match the sample size")]
        return self._fit_and_reply(f_matrix=msg.f_matrix)

    def _fit_and_reply(self, f_matrix) -> list[wire.Message]:
        assign = self._assign
        y = assign.y
        if f_matrix is None:
            self._psi_tilde = self._psi_std
            y_tilde = y
        else:
            self._psi_tilde = f_matrix @ self._psi_std
            y_tilde = f_matrix @ y
        n_collapsed = sum(1 for b in self._bases if b.collapsed)
        if assign.p_i == 0:
            self._beta = np.zeros(0)
            selection = wire.LocalSelection(sender=self.machine, records=())
            fitted = wire.FittedValues(
                sender=self.machine, p_i=0, sweeps=0, converged=True,
                n_collapsed=0, lam=0.0, y_hat=np.zeros(assign.n),
            )
            return [selection, fitted]
        blocks = qr_blocks(self._split(self._psi_tilde))
        fit = fit_local(y_tilde, blocks, folds=assign.folds, seed=assign.cv_seed)
        self._fit = fit
        self._beta = back_solve(blocks, fit.theta)
        y_hat = self._psi_std @ self._beta
        records = tuple(
            self._record_for(k - 1) for k in fit.active
        )
        selection = wire.LocalSelection(sender=self.machine, records=records)
        fitted = wire.FittedValues(
            sender=self.machine,
            p_i=assign.p_i,
            sweeps=fit.iterations,
            converged=fit.converged,
            n_collapsed=n_collapsed,
            lam=fit.lam,
            y_hat=y_hat,
        )
        return [selection, fitted]

    def _on_test_request(self, msg: wire.TestRequest) -> list[wire.Message]:
        if self._beta is None:
            return [self._bad_state("TestRequest before the fit completed")]
        records = []
        for j in msg.features:
            pos = self._position_of(int(j))
            if pos is None:
                return [self._bad_state(f"feature {int(j)} is not assigned here")]
            lo, hi = self._offsets[pos], self._offsets[pos + 1]
            records.append(
                wire.TestRecord(
                    global_j=int(j),
                    beta=self._beta[lo:hi],
                    psi_tilde=self._psi_tilde[:, lo:hi],
                )
            )
        return [wire.TestBlock(sender=self.machine, records=tuple(records))]

    def _on_refine_request(self, msg: wire.RefineRequest) -> list[wire.Message]:
        if self._beta is None:
            return [self._bad_state("RefineRequest before the fit completed")]
        records = []
        for j in msg.features:
            pos = self._position_of(int(j))
            if pos is None:
                return [self._bad_state(f"feature {int(j)} is not assigned here")]
            records.append(self._record_for(pos))
        return [wire.LocalSelection(sender=self.machine, records=tuple(records))]

    # -------------------------------------------------------------- helpers

    def _bad_state(self, detail: str) -> wire.Error:
        return wire.Error(sender=self.machine, code=wire.ERR_BAD_STATE, message=detail)

    def _position_of(self, j: int) -> int | None:
        hits = np.flatnonzero(self._assign.global_indices == j)
        return int(hits[0]) if hits.size else None

    def _record_for(self, pos: int) -> wire.SelectionRecord:
        basis = self._bases[pos]
        block = self._design[pos]
        lo, hi = self._offsets[pos], self._offsets[pos + 1]
        return wire.SelectionRecord(
            global_j=int(self._assign.global_indices[pos]),
            local_k=pos + 1,
            degree=basis.degree,
            interior_knots=np.asarray(basis.interior_knots),
            boundary_lo=basis.boundary[0],
            boundary_hi=basis.boundary[1],
            col_means=block.col_means,
            col_sds=block.col_sds,
            beta=self._beta[lo:hi],
            psi_std=block.standardized,
        )

    def _split(self, cat: NDArray[np.float64]) -> list[NDArray[np.float64]]:
        return [
            cat[:, self._offsets[k] : self._offsets[k + 1]]
            for k in range(len(self._offsets) - 1)
        ]


# =============================================================== transports


class InProcessTransport:
    """Sequential workers in the calling process, speaking real frames.

    Every message is serialized and parsed back before delivery in either
    direction.  That constantly exercises the wire format and hands the
    workers bit-identical inputs to what a socket carries, which is the
    whole cross-transport determinism argument.
    """

    def __init__(self, machines: Iterable[int]):
        self._sessions = {i: WorkerSession() for i in machines}
        self._queues: dict[int, deque] = {i: deque() for i in self._sessions}
        self.log: list[tuple[str, int, str]] = []

    def send(self, machine: int, msg: wire.Message) -> None:
        delivered = wire.deserialize(wire.serialize(msg))
        self.log.append(("send", machine, type(delivered).__name__))
        try:
            replies = self._sessions[machine].handle(delivered)
        except DdacError as exc:
            # the socket worker would answer with an Error frame; match it
            replies = [
                wire.Error(
                    sender=machine,
                    code=wire.ERR_INTERNAL,
                    message=f"{type(exc).__name__}: {exc}",
                )
            ]
        for reply in replies:
            self._queues[machine].append(wire.deserialize(wire.serialize(reply)))

    def recv(self, machine: int) -> wire.Message:
        queue = self._queues[machine]
        if not queue:
            raise ConnectionLost(machine)
        msg = queue.popleft()
        self.log.append(("recv", machine, type(msg).__name__))
        return msg

    def close(self) -> None:
        pass


def _recv_exact(conn: socket.socket, count: int) -> bytes | None:
    """Read exactly count bytes; None on clean EOF before the first byte."""
    chunks = []
    got = 0
    while got < count:
        chunk = conn.recv(min(count - got, 1 << 20))
        if not chunk:
            if got == 0:
                return None
            raise ConnectionLost(0)
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def _recv_frame(conn: socket.socket) -> wire.Message | None:
    header = _recv_exact(conn, wire.HEADER_SIZE)
    if header is None:
        return None
    length, _, _ = wire.HEADER.unpack(header)
    payload = _recv_exact(conn, length) if length else b""
    if length and payload is None:
        raise ConnectionLost(0)
    return wire.deserialize(header + (payload or b""))


class SocketTransport:
    """One TCP connection per worker; workers bind base_port + machine - 1.

    With spawn=True (the default) the coordinator launches one worker
    subprocess per live machine and tears it down on close; with
    spawn=False it connects to already-running serve_worker endpoints.
    """

    def __init__(
        self,
        machines: Sequence[int],
        base_port: int = DEFAULT_BASE_PORT,
        spawn: bool = True,
        timeout: float = DEFAULT_TIMEOUT,
        host: str = "127.0.0.1",
    ):
        self._machines = list(machines)
        self._procs: dict[int, subprocess.Popen] = {}
        self._conns: dict[int, socket.socket] = {}
        self.log: list[tuple[str, int, str]] = []
        try:
            if spawn:
                for i in self._machines:
                    port = base_port + i - 1
                    cmd = (
                        "from ddacspam.runtime import serve_worker; "
                        f"serve_worker(port={port}, timeout={timeout})"
                    )
                    self._procs[i] = subprocess.Popen(
                        [sys.executable, "-c", cmd], stdout=subprocess.DEVNULL
                    )
            deadline = time.monotonic() + min(timeout, 30.0)
            for i in self._machines:
                self._conns[i] = self._connect(host, base_port + i - 1, i, deadline)
                self._conns[i].settimeout(timeout)
        except BaseException:
            self.close()
            raise

    @staticmethod
    def _connect(host: str, port: int, machine: int, deadline: float) -> socket.socket:
        while True:
            try:
                return socket.create_connection((host, port), timeout=1.0)
            except OSError:
                if time.monotonic() >= deadline:
                    raise Timeout(machine, "connect") from None
                time.sleep(0.05)

    def send(self, machine: int, msg: wire.Message) -> None:
        self.log.append(("send", machine, type(msg).__name__))
        try:
            self._conns[machine].sendall(wire.serialize(msg))
        except OSError as exc:
            raise ConnectionLost(machine) from exc

    def recv(self, machine: int) -> wire.Message:
        try:
            msg = _recv_frame(self._conns[machine])
        except socket.timeout:
            raise Timeout(machine, "recv") from None
        except OSError as exc:
            raise ConnectionLost(machine) from exc
        if msg is None:
            raise ConnectionLost(machine)
        self.log.append(("recv", machine, type(msg).__name__))
        return msg

    def close(self) -> None:
        for conn in self._conns.values():
            try:
                conn.close()
            except OSError:
                pass
        self._conns.clear()
        for proc in self._procs.values():
            try:
                proc.wait(timeout=5.0)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()
        self._procs.clear()


def serve_worker(
    port: int,
    persistent: bool = False,
    timeout: float = DEFAULT_TIMEOUT,
    host: str = "127.0.0.1",
) -> int:
    """Run one worker endpoint; returns the number of connections served.

    Binds, accepts a coordinator connection, and answers frames until a
    Shutdown arrives or the peer disconnects.  A malformed frame earns an
    Error reply and closes the connection.  With persistent=True the
    endpoint loops for further connections until an accept times out.
    """
    try:
        listener = socket.create_server((host, port))
    except OSError as exc:
        raise BindFailure(f"cannot bind {host}:{port}: {exc}") from exc
    served = 0
    with listener:
        listener.settimeout(timeout)
        while True:
            try:
                conn, peer = listener.accept()
            except socket.timeout:
                return served
            log.debug("worker on port %d: connection from %s", port, peer)
            _serve_connection(conn, timeout)
            served += 1
            if not persistent:
                return served


def _serve_connection(conn: socket.socket, timeout: float) -> None:
    session = WorkerSession()
    conn.settimeout(timeout)
    with conn:
        while True:
            try:
                msg = _recv_frame(conn)
            except ProtocolError as exc:
                reply = wire.Error(
                    sender=session.machine,
                    code=wire.ERR_BAD_FRAME,
                    message=f"{type(exc).__name__}: {exc}",
                )
                conn.sendall(wire.serialize(reply))
                return
            except (socket.timeout, OSError):
                return
            if msg is None:
                return
            try:
                replies = session.handle(msg)
            except DdacError as exc:
                reply = wire.Error(
                    sender=session.machine,
                    code=wire.ERR_INTERNAL,
                    message=f"{type(exc).__name__}: {exc}",
                )
                conn.sendall(wire.serialize(reply))
                return
            for reply in replies:
                conn.sendall(wire.serialize(reply))
            if session.done:
                return


# ========================================================== result objects


@dataclass(frozen=True, eq=False)
class LocalFit(_BitEq):
    """Per-worker summary kept in the fit result."""

    machine: int
    assigned: int
    selected: tuple[int, ...]
    sweeps: int
    converged: bool
    n_collapsed: int
    lam: float
    idle: bool = False


@dataclass(frozen=True, eq=False)
class FeatureFunction(_BitEq):
    """Evaluates one fitted component at fresh points.

    Rebuilds the worker's basis from its description, applies the stored
    standardization constants, and contracts with the refined coefficients.
    Points outside the training range are clamped by the basis itself.
    """

    feature: int
    degree: int
    interior_knots: NDArray[np.float64]
    boundary_lo: float
    boundary_hi: float
    col_means: NDArray[np.float64]
    col_sds: NDArray[np.float64]
    beta: NDArray[np.float64]
    _basis: BSplineBasis = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        basis = BSplineBasis(
            feature_index=self.feature,
            degree=self.degree,
            interior_knots=tuple(float(v) for v in self.interior_knots),
            boundary=(self.boundary_lo, self.boundary_hi),
            requested_dn=self.beta.size,
        )
        object.__setattr__(self, "_basis", basis)

    def __call__(self, x: NDArray[np.float64]) -> NDArray[np.float64]:
        raw = design_columns(self._basis, np.asarray(x, dtype=np.float64))
        return ((raw - self.col_means) / self.col_sds) @ self.beta


@dataclass(eq=False)
class FitResult:
    """Output of a distributed fit.

    Equality covers the statistical outputs only: selection, refined
    coefficients, intercept, fitted component functions, and the worker
    summaries.  Timings and the config echo are excluded, which is what
    lets results from different transports (or the spam/dac aliases at
    m=1) compare equal field for field.
    """

    selected: tuple[int, ...]
    beta_hat: dict[int, NDArray[np.float64]]
    intercept: float
    f_hat: dict[int, FeatureFunction]
    per_worker: tuple[LocalFit, ...]
    ridge_lambda: float
    timings: dict[str, float]
    config: dict

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        if self.selected != other.selected:
            return False
        if np.float64(self.intercept).tobytes() != np.float64(other.intercept).tobytes():
            return False
        if np.float64(self.ridge_lambda).tobytes() != np.float64(other.ridge_lambda).tobytes():
            return False
        if self.beta_hat.keys() != other.beta_hat.keys():
            return False
        for j, beta in self.beta_hat.items():
            if beta.tobytes() != other.beta_hat[j].tobytes():
                return False
        if self.f_hat.keys() != other.f_hat.keys():
            return False
        for j, fn in self.f_hat.items():
            if fn != other.f_hat[j]:
                return False
        return self.per_worker == other.per_worker

    def predict_h(self, x: NDArray[np.float64]) -> NDArray[np.float64]:
        """Predict h(x) = intercept + sum of fitted components, original units."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.config["p"]:
            raise UnknownFeature(x.shape[1] if x.ndim == 2 else -1)
        out = np.full(x.shape[0], self.intercept)
        for j, fn in self.f_hat.items():
            out += fn(x[:, j - 1])
        return out


@dataclass(frozen=True)
class RidgeRefinement:
    beta: NDArray[np.float64]
    lam: float
    intercept: float
    fitted: NDArray[np.float64]
    grid: NDArray[np.float64]
    cv_errors: NDArray[np.float64]


class InferenceState:
    """Shared quantities for testing individual features after a fit.

    Provides what the test op needs: F, the residual and its scale, the
    nominal (p, d_n, n), and block_for(j) returning the local coefficient
    block, the decorrelated basis block, and its effective width.
    """

    def __init__(
        self,
        plan: PartitionPlan,
        f_matrix: NDArray[np.float64],
        eps_hat: NDArray[np.float64],
        sigma_hat: float,
        d_n: int,
        blocks: dict[int, tuple[NDArray[np.float64], NDArray[np.float64], int]],
        selected: tuple[int, ...],
        per_worker: tuple[LocalFit, ...],
        timings: dict[str, float],
        config: dict,
    ):
        self.plan = plan
        self.f_matrix = f_matrix
        self.eps_hat = eps_hat
        self.sigma_hat = sigma_hat
        self.p = plan.p
        self.d_n = d_n
        self.n = eps_hat.shape[0]
        self.blocks = blocks
        self.selected = selected
        self.per_worker = per_worker
        self.timings = timings
        self.config = config

    def block_for(self, j: int):
        try:
            return self.blocks[j]
        except KeyError:
            raise UnknownFeature(j) from None


# ============================================================= coordinator


def _worker_seeds(seed: int, m: int) -> tuple[list[int], int]:
    """Independent CV seeds for the m workers plus one for the ridge step."""
    children = np.random.SeedSequence(seed).spawn(m + 1)
    states = [int(c.generate_state(1, np.uint64)[0]) for c in children]
    return states[:m], states[m]


def _expect(transport, machine: int, cls, timings: dict, phase: str):
    try:
        msg = transport.recv(machine)
    except (Timeout, ConnectionLost) as exc:
        raise WorkerFailure(machine, f"{phase}: {exc}", dict(timings)) from exc
    if isinstance(msg, wire.Error):
        raise WorkerFailure(
            machine, f"{phase}: worker error {msg.code}: {msg.message}", dict(timings)
        )
    if not isinstance(msg, cls):
        raise WorkerFailure(
            machine,
            f"{phase}: expected {cls.__name__}, got {type(msg).__name__}",
            dict(timings),
        )
    return msg


@dataclass
class _RunState:
    plan: PartitionPlan
    d_n: int
    live: tuple[int, ...]
    transport: object
    selections: dict[int, wire.LocalSelection]
    fitted: dict[int, wire.FittedValues]
    f_matrix: NDArray[np.float64] | None
    per_worker: tuple[LocalFit, ...]
    timings: dict[str, float]
    ridge_seed: int


def _make_transport(name: str, live, base_port: int, timeout: float, spawn: bool):
    if name == "in_process":
        return InProcessTransport(live)
    if name == "socket":
        return SocketTransport(live, base_port=base_port, timeout=timeout, spawn=spawn)
    raise ValueError(f"unknown transport {name!r}; use 'in_process' or 'socket'")


def _run_workers(
    dataset: Dataset,
    y_reduced: NDArray[np.float64],
    m: int,
    r: float,
    seed: int,
    mode: str,
    transport_name: str,
    d_n: int | None,
    folds: int,
    base_port: int,
    timeout: float,
    spawn_workers: bool,
) -> _RunState:
    """Phases 2-6: partition, assign, Gram, F, local selection."""
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    plan = partition_features(dataset.p, m, seed)
    d_n = d_n if d_n is not None else compute_dn(dataset.n)
    live = tuple(i for i in range(1, m + 1) if plan.sizes[i - 1] > 0)
    cv_seeds, ridge_seed = _worker_seeds(seed, m)
    timings["partition"] = time.perf_counter() - t0

    transport = _make_transport(transport_name, live, base_port, timeout, spawn_workers)
    expect_f = mode == "ddac"
    try:
        t0 = time.perf_counter()
        for i in live:
            cols = np.asarray(plan.machines[i - 1], dtype=np.int64) - 1
            transport.send(
                i,
                wire.AssignFeatures(
                    sender=wire.COORDINATOR,
                    machine=i,
                    d_n=d_n,
                    expect_f=expect_f,
                    cv_seed=cv_seeds[i - 1],
                    folds=folds,
                    global_indices=np.asarray(plan.machines[i - 1], dtype=np.uint64),
                    y=y_reduced,
                    x_cols=dataset.x[:, cols],
                ),
            )
        timings["assign"] = time.perf_counter() - t0

        f_matrix = None
        selections: dict[int, wire.LocalSelection] = {}
        fitted: dict[int, wire.FittedValues] = {}
        if expect_f:
            t0 = time.perf_counter()
            gram_sum = np.zeros((dataset.n, dataset.n))
            for i in live:
                gram_sum += _expect(
                    transport, i, wire.GramContribution, timings, "gram"
                ).gram
            operator = compute_f(gram_sum, r)
            f_matrix = operator.f_matrix
            timings["decorrelate"] = time.perf_counter() - t0
            t0 = time.perf_counter()
            for i in live:
                transport.send(i, wire.FOperator(sender=wire.COORDINATOR, f_matrix=f_matrix))
            for i in live:
                selections[i] = _expect(transport, i, wire.LocalSelection, timings, "select")
                fitted[i] = _expect(transport, i, wire.FittedValues, timings, "select")
            timings["select"] = time.perf_counter() - t0
        else:
            t0 = time.perf_counter()
            for i in live:
                _expect(transport, i, wire.GramContribution, timings, "gram")
                selections[i] = _expect(transport, i, wire.LocalSelection, timings, "select")
                fitted[i] = _expect(transport, i, wire.FittedValues, timings, "select")
            timings["select"] = time.perf_counter() - t0
    except BaseException:
        transport.close()
        raise

    summaries = []
    for i in range(1, m + 1):
        if i not in selections:
            summaries.append(
                LocalFit(machine=i, assigned=0, selected=(), sweeps=0,
                         converged=True, n_collapsed=0, lam=0.0, idle=True)
            )
            continue
        fv = fitted[i]
        summaries.append(
            LocalFit(
                machine=i,
                assigned=plan.sizes[i - 1],
                selected=selections[i].selected,
                sweeps=fv.sweeps,
                converged=fv.converged,
                n_collapsed=fv.n_collapsed,
                lam=fv.lam,
            )
        )
    return _RunState(
        plan=plan, d_n=d_n, live=live, transport=transport,
        selections=selections, fitted=fitted, f_matrix=f_matrix,
        per_worker=tuple(summaries), timings=timings, ridge_seed=ridge_seed,
    )


def _shutdown(state: _RunState) -> None:
    try:
        for i in state.live:
            state.transport.send(i, wire.Shutdown(sender=wire.COORDINATOR))
    finally:
        state.transport.close()


def ridge_refine(
    y: NDArray[np.float64],
    psi_selected: NDArray[np.float64],
    folds: int = 5,
    grid: NDArray[np.float64] | None = None,
    seed: int = 0,
) -> RidgeRefinement:
    """Cross-validated ridge on the selected basis columns.

    The response is centered internally; the default penalty grid is 50
    geometric points spanning [1e-4, 1e4] times the mean squared column
    norm, walked from the largest penalty down so that ties in the CV
    error resolve to the stronger penalty.  A zero penalty falls back to
    plain least squares.
    """
    y = np.asarray(y, dtype=np.float64)
    psi = np.asarray(psi_selected, dtype=np.float64)
    n, q = psi.shape
    if q > MAX_REFINE_RATIO * n:
        raise OverSelected(f"{q} basis columns against {n} rows")
    intercept = float(y.mean())
    if q == 0:
        return RidgeRefinement(
            beta=np.zeros(0), lam=0.0, intercept=intercept,
            fitted=np.full(n, intercept), grid=np.zeros(0), cv_errors=np.zeros(0),
        )
    y_c = y - intercept
    if grid is None:
        scale = float(np.mean(np.sum(psi**2, axis=0)))
        grid = np.geomspace(RIDGE_GRID_SPAN * scale, scale / RIDGE_GRID_SPAN,
                            RIDGE_GRID_LENGTH)
    else:
        grid = np.asarray(grid, dtype=np.float64)

    def solve(psi_tr, y_tr, lam):
        gram = psi_tr.T @ psi_tr
        rhs = psi_tr.T @ y_tr
        if lam > 0.0:
            gram = gram + lam * np.eye(q)
            return np.linalg.solve(gram, rhs)
        return np.linalg.lstsq(psi_tr, y_tr, rcond=None)[0]

    if grid.size > 1:
        errors = np.zeros(grid.size)
        for fold in _fold_assignments(n, folds, seed):
            mask = np.ones(n, dtype=bool)
            mask[fold] = False
            psi_tr, y_tr = psi[mask], y_c[mask]
            psi_te, y_te = psi[fold], y_c[fold]
            center = float(y_tr.mean())
            for g, lam in enumerate(grid):
                beta = solve(psi_tr, y_tr - center, lam)
                resid = y_te - center - psi_te @ beta
                errors[g] += float(resid @ resid)
        chosen = int(np.argmin(errors))  # grid is descending: ties go large
    else:
        errors = np.zeros(1)
        chosen = 0
    lam = float(grid[chosen])
    beta = solve(psi, y_c, lam)
    return RidgeRefinement(
        beta=beta, lam=lam, intercept=intercept,
        fitted=intercept + psi @ beta, grid=grid, cv_errors=errors,
    )


def run_ddac_spam(
    dataset: Dataset,
    m: int,
    r: float = 1.0,
    seed: int = 0,
    mode: str = "ddac",
    transport: str = "in_process",
    d_n: int | None = None,
    folds: int = 5,
    base_port: int = DEFAULT_BASE_PORT,
    timeout: float = DEFAULT_TIMEOUT,
    spawn_workers: bool = True,
) -> FitResult:
    """Distributed fit: standardize, partition, decorrelate, select, refine.

    mode picks the decorrelation treatment: "ddac" aggregates the Gram and
    whitens with F, "dac" runs the same split without F, and "spam" is the
    single-machine baseline (it forces m = 1, also without F).  The result
    is deterministic given (dataset, m, r, seed, mode) and identical
    across transports.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if m < 1:
        raise ValueError(f"need m >= 1, got {m}")
    if mode == "spam":
        m = 1
    t_total = time.perf_counter()
    y = dataset.y
    sd_y = float(y.std(ddof=1))
    if sd_y <= 0.0:
        raise ConstantColumn("<response>")
    y_fit = (y - y.mean()) / sd_y

    state = _run_workers(
        dataset, y_fit, m, r, seed, mode, transport, d_n, folds,
        base_port, timeout, spawn_workers,
    )
    _shutdown(state)

    t0 = time.perf_counter()
    records = {}
    for i in state.live:
        for rec in state.selections[i].records:
            records[rec.global_j] = rec
    selected = tuple(sorted(records))
    total_width = sum(records[j].d_eff for j in selected)
    if total_width > MAX_REFINE_RATIO * dataset.n:
        raise OverSelected(
            f"{total_width} selected basis columns against {dataset.n} rows"
        )
    if selected:
        psi_sel = np.hstack([records[j].psi_std for j in selected])
    else:
        psi_sel = np.zeros((dataset.n, 0))
    refinement = ridge_refine(y, psi_sel, folds=folds, seed=state.ridge_seed)
    state.timings["refine"] = time.perf_counter() - t0

    beta_hat: dict[int, NDArray[np.float64]] = {}
    f_hat: dict[int, FeatureFunction] = {}
    offset = 0
    for j in selected:
        rec = records[j]
        beta_j = refinement.beta[offset : offset + rec.d_eff]
        offset += rec.d_eff
        beta_hat[j] = beta_j
        f_hat[j] = FeatureFunction(
            feature=j,
            degree=rec.degree,
            interior_knots=rec.interior_knots,
            boundary_lo=rec.boundary_lo,
            boundary_hi=rec.boundary_hi,
            col_means=rec.col_means,
            col_sds=rec.col_sds,
            beta=beta_j,
        )
    state.timings["total"] = time.perf_counter() - t_total
    log.info(
        "fit done: mode=%s m=%d |S|=%d in %.2fs",
        mode, m, len(selected), state.timings["total"],
    )
    return FitResult(
        selected=selected,
        beta_hat=beta_hat,
        intercept=refinement.intercept,
        f_hat=f_hat,
        per_worker=state.per_worker,
        ridge_lambda=refinement.lam,
        timings=state.timings,
        config={
            "n": dataset.n, "p": dataset.p, "m": m, "r": r, "seed": seed,
            "mode": mode, "d_n": state.d_n, "folds": folds,
        },
    )


def prepare_inference(
    dataset: Dataset,
    m: int,
    features: Sequence[int],
    r: float = 1.0,
    seed: int = 0,
    mode: str = "ddac",
    transport: str = "in_process",
    d_n: int | None = None,
    folds: int = 5,
    base_port: int = DEFAULT_BASE_PORT,
    timeout: float = DEFAULT_TIMEOUT,
    spawn_workers: bool = True,
) -> InferenceState:
    """Run the pipeline on the centered response and pull test blocks.

    The fitting path scales the response to unit variance; the testing
    path only centers it, because the statistic's calibration assumes
    residuals on the original noise scale.  Requested features are
    fetched in one batch per worker.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if m < 1:
        raise ValueError(f"need m >= 1, got {m}")
    if mode == "spam":
        m = 1
    features = [int(j) for j in features]
    for j in features:
        if not 1 <= j <= dataset.p:
            raise UnknownFeature(j)
    t_total = time.perf_counter()
    y_cent = dataset.y - dataset.y.mean()

    state = _run_workers(
        dataset, y_cent, m, r, seed, mode, transport, d_n, folds,
        base_port, timeout, spawn_workers,
    )
    try:
        t0 = time.perf_counter()
        fitted_sum = np.zeros(dataset.n)
        for i in state.live:
            fitted_sum += state.fitted[i].y_hat
        eps_hat, sigma_hat = estimate_sigma(y_cent, fitted_sum)

        wanted: dict[int, list[int]] = {}
        for j in sorted(set(features)):
            i, _ = state.plan.machine_of(j)
            wanted.setdefault(i, []).append(j)
        blocks: dict[int, tuple] = {}
        for i in state.live:
            if i not in wanted:
                continue
            state.transport.send(
                i,
                wire.TestRequest(
                    sender=wire.COORDINATOR,
                    features=np.asarray(wanted[i], dtype=np.uint64),
                ),
            )
            reply = _expect(state.transport, i, wire.TestBlock, state.timings, "test")
            for rec in reply.records:
                blocks[rec.global_j] = (rec.beta, rec.psi_tilde, rec.d_eff)
        state.timings["test"] = time.perf_counter() - t0
    finally:
        _shutdown(state)

    f_matrix = state.f_matrix if state.f_matrix is not None else np.eye(dataset.n)
    selected = tuple(sorted({
        j for i in state.live for j in state.selections[i].selected
    }))
    state.timings["total"] = time.perf_counter() - t_total
    return InferenceState(
        plan=state.plan,
        f_matrix=f_matrix,
        eps_hat=eps_hat,
        sigma_hat=sigma_hat,
        d_n=state.d_n,
        blocks=blocks,
        selected=selected,
        per_worker=state.per_worker,
        timings=state.timings,
        config={
            "n": dataset.n, "p": dataset.p, "m": m, "r": r, "seed": seed,
            "mode": mode, "d_n": state.d_n, "folds": folds,
        },
    )


def run_inference(
    dataset: Dataset,
    m: int,
    features: Sequence[int],
    alpha: float = 0.05,
    **kwargs,
) -> list[TestReport]:
    """Fit on the centered response, then test each requested feature."""
    fit_state = prepare_inference(dataset, m, features, **kwargs)
    return [
        run_test(dataset, fit_state.plan, fit_state, j, alpha=alpha)
        for j in features
    ]
