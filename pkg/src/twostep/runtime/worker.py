"""Worker process: register, evaluate assignments, report, heartbeat.

The same loop serves every transport. Over TCP it connects out to a
manager; with --stdio it is a child process speaking the protocol over
stdin/stdout; in-process workers run it on a thread with a queue-backed
transport. Heartbeats tick on a background thread from registration until
shutdown so that a worker busy inside a long evaluation still looks alive.
"""
from __future__ import annotations

import argparse
import logging
import os
import socket
import sys
import threading
import time

from ..evaluators import evaluate_assignment
from . import protocol
from .protocol import ProtocolError, TrialAssignment

log = logging.getLogger("twostep.worker")

DEFAULT_EVALUATORS = ("mlp", "synthetic")
DEFAULT_HEARTBEAT_SECONDS = 10.0


class LineTransport:
    """Line-delimited JSON over a readable and a writable binary stream."""

    def __init__(self, reader, writer):
        self._reader = reader
        self._writer = writer
        self._send_lock = threading.Lock()

    def send(self, msg: dict) -> None:
        data = protocol.encode_line(msg)
        with self._send_lock:
            self._writer.write(data)
            self._writer.flush()

    def recv(self) -> dict | None:
        line = self._reader.readline()
        if not line:
            return None
        return protocol.parse_line(line.decode("utf-8"))

    def close(self) -> None:
        for stream in (self._reader, self._writer):
            try:
                stream.close()
            except OSError:
                pass


class SocketTransport(LineTransport):
    def __init__(self, sock: socket.socket):
        self._sock = sock
        super().__init__(sock.makefile("rb"), sock.makefile("wb"))

    def close(self) -> None:
        super().close()
        try:
            self._sock.close()
        except OSError:
            pass


class QueueTransport:
    """In-process transport: an inbox queue and a callback into the manager."""

    def __init__(self, inbox, deliver):
        self._inbox = inbox
        self._deliver = deliver

    def send(self, msg: dict) -> None:
        self._deliver(msg)

    def recv(self) -> dict | None:
        return self._inbox.get()

    def close(self) -> None:
        pass


class HeartbeatTicker:
    """Background thread sending heartbeats every interval until stopped."""

    def __init__(self, transport, worker_id: str, interval: float):
        self._transport = transport
        self._worker_id = worker_id
        self._interval = interval
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, daemon=True)

    def start(self) -> None:
        self._thread.start()

    def _run(self) -> None:
        while not self._stop.wait(self._interval):
            try:
                self._transport.send(protocol.heartbeat_message(self._worker_id))
            except Exception:
                return  # transport gone; the main loop will notice

    def stop(self) -> None:
        self._stop.set()


def worker_loop(transport, worker_id: str,
                evaluators=DEFAULT_EVALUATORS,
                heartbeat_seconds: float | None = DEFAULT_HEARTBEAT_SECONDS,
                eval_delay: float = 0.0) -> int:
    """Run one worker session over an open transport; returns an exit code.

    ``eval_delay`` sleeps before each evaluation; it exists so tests can
    make a worker slow without touching the evaluators.
    """
    transport.send(protocol.register_message(worker_id, list(evaluators)))
    ticker = None
    if heartbeat_seconds:
        ticker = HeartbeatTicker(transport, worker_id, heartbeat_seconds)
        ticker.start()
    try:
        while True:
            try:
                msg = transport.recv()
            except ProtocolError as exc:
                log.error("bad message from manager: %s", exc)
                return 1
            if msg is None:
                log.info("manager connection closed; shutting down")
                return 0
            mtype = msg.get("type")
            if mtype == "reject":
                log.error("manager rejected registration: %s (%s)",
                          msg.get("reason"), msg.get("code"))
                return 1
            if mtype == "drain":
                log.info("drained; shutting down")
                return 0
            if mtype == "assign":
                _handle_assignment(transport, msg, eval_delay)
            else:
                log.warning("ignoring unexpected message type %r", mtype)
    finally:
        if ticker is not None:
            ticker.stop()
        transport.close()


def _handle_assignment(transport, msg: dict, eval_delay: float) -> None:
    trial_id = msg.get("trial_id", -1)
    started = time.monotonic()
    try:
        assignment = TrialAssignment.from_wire(msg)
        if eval_delay > 0:
            time.sleep(eval_delay)
        result = evaluate_assignment(assignment)
    except Exception as exc:
        log.warning("trial %s failed to evaluate: %s", trial_id, exc)
        transport.send(protocol.error_message(
            trial_id, f"{type(exc).__name__}: {exc}"))
        return
    wall = time.monotonic() - started
    if result.failed:
        transport.send(protocol.error_message(
            trial_id, result.failure_reason or "training failed"))
        return
    transport.send(protocol.result_message(
        trial_id=assignment.trial_id,
        min_val_mse=result.min_val_mse,
        best_epoch=result.best_epoch,
        epochs_run=result.epochs_run,
        param_count=result.param_count,
        wall_seconds=wall,
    ))


def join_worker(address: tuple[str, int], worker_id: str,
                evaluators=DEFAULT_EVALUATORS,
                heartbeat_seconds: float = DEFAULT_HEARTBEAT_SECONDS,
                eval_delay: float = 0.0,
                connect_timeout: float = 10.0) -> int:
    """Connect to a manager over TCP and serve until drained."""
    sock = socket.create_connection(address, timeout=connect_timeout)
    sock.settimeout(None)
    transport = SocketTransport(sock)
    return worker_loop(transport, worker_id, evaluators,
                       heartbeat_seconds, eval_delay)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="twostep-worker",
        description="Trial evaluation worker (TCP client or stdio child)")
    mode = parser.add_mutually_exclusive_group(required=True)
    mode.add_argument("--connect", metavar="HOST:PORT",
                      help="join the manager listening at HOST:PORT")
    mode.add_argument("--stdio", action="store_true",
                      help="speak the protocol on stdin/stdout")
    parser.add_argument("--worker-id", default=f"worker-{os.getpid()}")
    parser.add_argument("--evaluators", default=",".join(DEFAULT_EVALUATORS),
                        help="comma-separated evaluator kinds to offer")
    parser.add_argument("--heartbeat", type=float,
                        default=DEFAULT_HEARTBEAT_SECONDS,
                        help="heartbeat interval in seconds")
    parser.add_argument("--eval-delay", type=float, default=0.0,
                        help="sleep this long before each evaluation (testing)")
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=os.environ.get("TWOSTEP_LOG", "WARNING").upper(),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    evaluators = [e.strip() for e in args.evaluators.split(",") if e.strip()]

    if args.stdio:
        transport = LineTransport(sys.stdin.buffer, sys.stdout.buffer)
        return worker_loop(transport, args.worker_id, evaluators,
                           args.heartbeat, args.eval_delay)

    host, _, port = args.connect.rpartition(":")
    if not host or not port.isdigit():
        parser.error("--connect expects HOST:PORT")
    return join_worker((host, int(port)), args.worker_id, evaluators,
                       args.heartbeat, args.eval_delay)


if __name__ == "__main__":
    sys.exit(main())
