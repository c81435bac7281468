import socket
import struct
import threading

import numpy as np
import pytest

from ddacspam import wire
from ddacspam.core import Dataset
from ddacspam.errors import (
    ConnectionLost,
    OverSelected,
    Timeout,
    UnknownFeature,
)
from ddacspam.runtime import (
    InProcessTransport,
    SocketTransport,
    WorkerSession,
    _run_workers,
    _shutdown,
    ridge_refine,
    run_ddac_spam,
    run_inference,
    serve_worker,
)


def make_dataset(n=150, p=12, seed=0, noise=0.3):
    """Four additive signals on features 1-4, the rest pure noise."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, size=(n, p))
    h = (
        2.0 * x[:, 0]
        + np.sin(np.pi * x[:, 1])
        + 2.0 * (x[:, 2] ** 2 - 1.0 / 3.0)
        - 1.5 * x[:, 3]
    )
    y = h + noise * rng.standard_normal(n)
    return Dataset(y=y, x=x)


@pytest.fixture(scope="module")
def dataset():
    return make_dataset()


@pytest.fixture(scope="module")
def ddac_fit(dataset):
    return run_ddac_spam(dataset, m=3, seed=4, mode="ddac")


class TestFit:
    def test_signals_selected(self, ddac_fit):
        assert ddac_fit.selected == (1, 2, 3, 4)

    def test_result_fields(self, dataset, ddac_fit):
        fit = ddac_fit
        assert fit.config["d_n"] == 3
        assert fit.config["mode"] == "ddac"
        assert tuple(w.machine for w in fit.per_worker) == (1, 2, 3)
        assert all(w.converged for w in fit.per_worker)
        assert sum(w.assigned for w in fit.per_worker) == dataset.p
        for j in fit.selected:
            assert fit.beta_hat[j].shape == (fit.config["d_n"],)
        assert fit.ridge_lambda > 0.0

    def test_predict_recovers_signal(self, dataset, ddac_fit):
        y_hat = ddac_fit.predict_h(dataset.x)
        ss_res = float(np.sum((dataset.y - y_hat) ** 2))
        ss_tot = float(np.sum((dataset.y - dataset.y.mean()) ** 2))
        assert 1.0 - ss_res / ss_tot > 0.8

    def test_component_functions_match_beta(self, dataset, ddac_fit):
        # f_hat must reproduce psi_std @ beta on the training points
        j = ddac_fit.selected[0]
        manual = ddac_fit.f_hat[j](dataset.x[:, j - 1])
        assert np.all(np.isfinite(manual))
        assert abs(float(manual.mean())) < 1e-8  # standardized columns are centered

    def test_predict_shape_guard(self, ddac_fit):
        with pytest.raises(UnknownFeature):
            ddac_fit.predict_h(np.zeros((5, 3)))

    def test_deterministic(self, dataset, ddac_fit):
        again = run_ddac_spam(dataset, m=3, seed=4, mode="ddac")
        assert again == ddac_fit

    def test_spam_is_dac_m1(self, dataset):
        spam = run_ddac_spam(dataset, m=9, seed=4, mode="spam")
        dac1 = run_ddac_spam(dataset, m=1, seed=4, mode="dac")
        assert spam.config["m"] == 1
        assert spam == dac1

    def test_idle_workers(self, dataset):
        fit = run_ddac_spam(dataset, m=20, seed=4, mode="dac")
        idle = [w for w in fit.per_worker if w.idle]
        busy = [w for w in fit.per_worker if not w.idle]
        assert len(fit.per_worker) == 20
        assert len(idle) == 20 - dataset.p
        assert all(w.assigned == 0 and w.selected == () for w in idle)
        assert sum(w.assigned for w in busy) == dataset.p
        assert set(fit.selected) >= {1, 2, 3, 4}

    def test_empty_selection_predicts_mean(self):
        rng = np.random.default_rng(101)
        x = rng.uniform(-1.0, 1.0, size=(250, 6))
        y = rng.standard_normal(250)
        fit = run_ddac_spam(Dataset(y=y, x=x), m=2, seed=1, mode="ddac")
        assert fit.selected == ()
        assert fit.intercept == pytest.approx(y.mean(), abs=1e-12)
        np.testing.assert_allclose(fit.predict_h(x), np.full(250, fit.intercept))

    def test_bad_arguments(self, dataset):
        with pytest.raises(ValueError):
            run_ddac_spam(dataset, m=2, mode="magic")
        with pytest.raises(ValueError):
            run_ddac_spam(dataset, m=0)
        with pytest.raises(ValueError):
            run_ddac_spam(dataset, m=2, transport="pigeon")


class TestCensus:
    def test_message_order_pins_reduction(self, dataset):
        y_fit = (dataset.y - dataset.y.mean()) / dataset.y.std(ddof=1)
        state = _run_workers(
            dataset, y_fit, 3, 1.0, 4, "ddac", "in_process",
            None, 5, 0, 5.0, False,
        )
        log = list(state.transport.log)
        _shutdown(state)
        # every machine's conversation, in machine index order at each phase
        expected = (
            [("send", i, "AssignFeatures") for i in (1, 2, 3)]
            + [("recv", i, "GramContribution") for i in (1, 2, 3)]
            + [("send", i, "FOperator") for i in (1, 2, 3)]
        )
        assert log[: len(expected)] == expected
        tail = log[len(expected) :]
        assert tail == [
            (d, i, k)
            for i in (1, 2, 3)
            for d, k in (("recv", "LocalSelection"), ("recv", "FittedValues"))
        ]

    def test_dac_skips_f_broadcast(self, dataset):
        y_fit = (dataset.y - dataset.y.mean()) / dataset.y.std(ddof=1)
        state = _run_workers(
            dataset, y_fit, 2, 1.0, 4, "dac", "in_process",
            None, 5, 0, 5.0, False,
        )
        kinds = [k for _, _, k in state.transport.log]
        _shutdown(state)
        assert "FOperator" not in kinds
        assert "GramContribution" in kinds  # census still counts every worker


class TestWorkerSession:
    def assign(self, expect_f=False):
        rng = np.random.default_rng(11)
        x = rng.uniform(0.0, 1.0, size=(60, 3))
        y = x[:, 0] + 0.1 * rng.standard_normal(60)
        session = WorkerSession()
        msg = wire.AssignFeatures(
            sender=wire.COORDINATOR, machine=2, d_n=3, expect_f=expect_f,
            cv_seed=7, folds=4, global_indices=np.array([5, 9, 11]),
            y=y, x_cols=x,
        )
        return session, session.handle(msg)

    def test_fit_reply_sequence(self):
        _, replies = self.assign()
        assert [type(r).__name__ for r in replies] == [
            "GramContribution", "LocalSelection", "FittedValues",
        ]
        assert replies[0].gram.shape == (60, 60)
        assert all(rec.global_j in (5, 9, 11) for rec in replies[1].records)

    def test_refine_request_roundtrip(self):
        session, _ = self.assign()
        reply = session.handle(wire.RefineRequest(sender=0, features=[9]))
        assert isinstance(reply[0], wire.LocalSelection)
        rec = reply[0].records[0]
        assert rec.global_j == 9
        assert rec.psi_std.shape == (60, 3)
        assert rec.beta.shape == (3,)

    def test_refine_unknown_feature(self):
        session, _ = self.assign()
        reply = session.handle(wire.RefineRequest(sender=0, features=[4]))
        assert isinstance(reply[0], wire.Error)
        assert reply[0].code == wire.ERR_BAD_STATE

    def test_test_request_before_fit(self):
        session = WorkerSession()
        reply = session.handle(wire.TestRequest(sender=0, features=[1]))
        assert isinstance(reply[0], wire.Error)
        assert reply[0].code == wire.ERR_BAD_STATE

    def test_duplicate_assignment_rejected(self):
        session, _ = self.assign()
        rng = np.random.default_rng(0)
        dup = wire.AssignFeatures(
            sender=0, machine=2, d_n=3, expect_f=False, cv_seed=1, folds=4,
            global_indices=np.array([1]), y=rng.standard_normal(20),
            x_cols=rng.random((20, 1)),
        )
        reply = session.handle(dup)
        assert isinstance(reply[0], wire.Error)

    def test_f_dimension_check(self):
        session, replies = self.assign(expect_f=True)
        assert len(replies) == 1  # gram only, fit waits for F
        reply = session.handle(wire.FOperator(sender=0, f_matrix=np.eye(10)))
        assert isinstance(reply[0], wire.Error)


class TestRidgeRefine:
    def test_empty_selection(self):
        y = np.arange(20.0)
        out = ridge_refine(y, np.zeros((20, 0)))
        assert out.beta.size == 0
        assert out.lam == 0.0
        assert out.intercept == pytest.approx(y.mean())
        np.testing.assert_allclose(out.fitted, np.full(20, y.mean()))

    def test_zero_penalty_is_least_squares(self):
        rng = np.random.default_rng(3)
        psi = rng.standard_normal((40, 5))
        y = rng.standard_normal(40)
        out = ridge_refine(y, psi, grid=np.array([0.0]))
        direct = np.linalg.lstsq(psi, y - y.mean(), rcond=None)[0]
        np.testing.assert_allclose(out.beta, direct, atol=1e-10)

    def test_heavy_penalty_shrinks(self):
        rng = np.random.default_rng(4)
        psi = rng.standard_normal((40, 5))
        y = psi @ np.ones(5) + 0.1 * rng.standard_normal(40)
        small = ridge_refine(y, psi, grid=np.array([1e-8]))
        big = ridge_refine(y, psi, grid=np.array([1e6]))
        assert np.linalg.norm(big.beta) < 0.1 * np.linalg.norm(small.beta)

    def test_overselected(self):
        rng = np.random.default_rng(5)
        with pytest.raises(OverSelected):
            ridge_refine(rng.standard_normal(10), rng.standard_normal((10, 41)))

    def test_cv_grid_descends(self):
        rng = np.random.default_rng(6)
        psi = rng.standard_normal((50, 4))
        y = psi @ np.array([1.0, -1.0, 0.5, 0.0]) + 0.2 * rng.standard_normal(50)
        out = ridge_refine(y, psi, seed=9)
        assert out.grid[0] > out.grid[-1]  # ties in CV error resolve upward
        assert out.cv_errors.shape == out.grid.shape
        assert out.lam in out.grid


class TestInferencePath:
    def test_reports_for_requested_features(self, dataset):
        reports = run_inference(dataset, m=3, features=[1, 7], seed=4)
        assert [r.feature for r in reports] == [1, 7]
        for r in reports:
            assert 0.0 <= r.p_value <= 1.0
            assert r.dof == 3
            assert r.decision in ("Reject", "Accept")
            assert (r.p_value < r.alpha) == (r.decision == "Reject")
        # the strong linear signal must dominate the pure-noise feature
        assert reports[0].p_value < reports[1].p_value

    def test_unknown_feature(self, dataset):
        with pytest.raises(UnknownFeature):
            run_inference(dataset, m=3, features=[99], seed=4)


class TestSocketTransport:
    def test_matches_in_process(self, dataset, ddac_fit):
        via_socket = run_ddac_spam(
            dataset, m=3, seed=4, mode="ddac",
            transport="socket", base_port=53911,
        )
        assert via_socket == ddac_fit

    def test_timeout_without_server(self):
        with pytest.raises(Timeout):
            SocketTransport([1], base_port=53951, spawn=False, timeout=0.6)

    def test_worker_killed_mid_conversation(self):
        transport = SocketTransport([1], base_port=53961, spawn=True, timeout=10.0)
        try:
            rng = np.random.default_rng(0)
            transport.send(1, wire.AssignFeatures(
                sender=wire.COORDINATOR, machine=1, d_n=3, expect_f=True,
                cv_seed=1, folds=4, global_indices=np.array([1]),
                y=rng.standard_normal(30), x_cols=rng.random((30, 1)),
            ))
            assert isinstance(transport.recv(1), wire.GramContribution)
            transport._procs[1].kill()
            with pytest.raises((ConnectionLost, Timeout)):
                transport.recv(1)  # worker died while we owe it an FOperator
        finally:
            transport.close()


def _connect_retry(port, deadline=8.0):
    import time

    stop = time.monotonic() + deadline
    while True:
        try:
            return socket.create_connection(("127.0.0.1", port), timeout=8.0)
        except OSError:
            if time.monotonic() >= stop:
                raise
            time.sleep(0.02)


class TestServeWorker:
    def test_malformed_frame_earns_error(self):
        port = 53971
        thread = threading.Thread(target=serve_worker, args=(port,), kwargs={"timeout": 8.0})
        thread.start()
        try:
            with _connect_retry(port) as conn:
                conn.sendall(struct.pack("<IBI", 4, 255, 0) + b"\x00\x00\x00\x00")
                header = conn.recv(wire.HEADER_SIZE)
                length, _, _ = wire.HEADER.unpack(header)
                payload = b""
                while len(payload) < length:
                    payload += conn.recv(length - len(payload))
                reply = wire.deserialize(header + payload)
            assert isinstance(reply, wire.Error)
            assert reply.code == wire.ERR_BAD_FRAME
        finally:
            thread.join()

    def test_persistent_serves_again(self):
        port = 53981
        served = []

        def run():
            served.append(serve_worker(port, persistent=True, timeout=1.0))

        thread = threading.Thread(target=run)
        thread.start()
        try:
            for _ in range(2):
                with _connect_retry(port) as conn:
                    conn.sendall(wire.serialize(wire.Shutdown(sender=wire.COORDINATOR)))
        finally:
            thread.join()
        assert served == [2]
