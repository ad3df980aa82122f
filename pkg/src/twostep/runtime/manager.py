"""Manager: dispatches a trial queue to workers and writes the ledger.

A single scheduler thread owns all mutable state (pending queue, worker
table, ledger writer). Transport threads do nothing but push events into
its queue, which serializes every decision; workers share nothing with
each other. Dispatch is pull-based: a worker gets its next assignment the
moment it finishes, so fast workers naturally process more trials.

Fault handling in one place: a worker error, disconnect, silence past
3 heartbeats, or an assignment running past its deadline all funnel into
the same requeue-or-fail path, which retries the identical assignment
(same seeds) up to ``max_retries`` times and then writes a terminal failed
record.
"""
from __future__ import annotations

import logging
import queue
import socket
import subprocess
import sys
import threading
import time
from collections import deque
from typing import Sequence

from ..evaluators import terminal_result_fields
from . import protocol
from .ledger import (
    LedgerWriter,
    completed_record,
    failed_record,
    read_ledger,
    reassigned_record,
    resume_remaining,
)
from .protocol import ProtocolError, TrialAssignment
from .worker import QueueTransport, worker_loop

log = logging.getLogger("twostep.manager")

DEFAULT_MAX_RETRIES = 3
MISSED_HEARTBEATS_LIMIT = 3


class ManagerError(RuntimeError):
    """Queue cannot make progress (no workers, all workers lost)."""


class WorkerHandle:
    """Manager-side view of one worker connection."""

    local = False  # in-process workers are exempt from liveness timeouts

    def __init__(self):
        self.worker_id: str | None = None
        self.evaluators: tuple[str, ...] = ()
        self.registered = False
        self.busy: int | None = None  # trial_id being evaluated
        self.last_seen = time.monotonic()

    def send(self, msg: dict) -> None:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError

    def describe(self) -> str:
        return self.worker_id or "<unregistered>"


class LocalWorkerHandle(WorkerHandle):
    """Worker running on a thread in this process; queue-pair transport."""

    local = True

    def __init__(self, events: queue.Queue, worker_id: str,
                 evaluators: Sequence[str], eval_delay: float = 0.0):
        super().__init__()
        self._inbox: queue.Queue = queue.Queue()
        transport = QueueTransport(
            self._inbox, lambda msg: events.put(("message", self, msg)))
        self._thread = threading.Thread(
            target=worker_loop,
            kwargs=dict(transport=transport, worker_id=worker_id,
                        evaluators=tuple(evaluators), heartbeat_seconds=None,
                        eval_delay=eval_delay),
            name=f"worker-{worker_id}", daemon=True)
        self._thread.start()

    def send(self, msg: dict) -> None:
        self._inbox.put(msg)

    def close(self) -> None:
        self._inbox.put(None)

    def join(self, timeout: float = 5.0) -> None:
        self._thread.join(timeout)


class SubprocessWorkerHandle(WorkerHandle):
    """Worker child process speaking the protocol on its stdio."""

    def __init__(self, events: queue.Queue, worker_id: str,
                 evaluators: Sequence[str], heartbeat_seconds: float,
                 eval_delay: float = 0.0):
        super().__init__()
        cmd = [
            sys.executable, "-m", "twostep.runtime.worker", "--stdio",
            "--worker-id", worker_id,
            "--evaluators", ",".join(evaluators),
            "--heartbeat", str(heartbeat_seconds),
        ]
        if eval_delay:
            cmd += ["--eval-delay", str(eval_delay)]
        self.process = subprocess.Popen(
            cmd, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
        self._events = events
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _read_loop(self) -> None:
        try:
            for raw in self.process.stdout:
                try:
                    msg = protocol.parse_line(raw.decode("utf-8"))
                except ProtocolError as exc:
                    self._events.put(("disconnect", self, f"protocol: {exc}"))
                    return
                self._events.put(("message", self, msg))
        except (OSError, ValueError):
            pass
        self._events.put(("disconnect", self, "stdout closed"))

    def send(self, msg: dict) -> None:
        try:
            self.process.stdin.write(protocol.encode_line(msg))
            self.process.stdin.flush()
        except (OSError, ValueError):
            self._events.put(("disconnect", self, "stdin closed"))

    def close(self) -> None:
        try:
            self.process.stdin.close()
        except (OSError, ValueError):
            pass
        try:
            self.process.wait(timeout=2.0)
        except subprocess.TimeoutExpired:
            self.process.kill()


class TcpWorkerHandle(WorkerHandle):
    """Worker connected over a TCP socket."""

    def __init__(self, events: queue.Queue, sock: socket.socket):
        super().__init__()
        self._sock = sock
        self._wfile = sock.makefile("wb")
        self._events = events
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _read_loop(self) -> None:
        try:
            with self._sock.makefile("rb") as rfile:
                for raw in rfile:
                    try:
                        msg = protocol.parse_line(raw.decode("utf-8"))
                    except ProtocolError as exc:
                        self._events.put(("disconnect", self, f"protocol: {exc}"))
                        return
                    self._events.put(("message", self, msg))
        except OSError:
            pass
        self._events.put(("disconnect", self, "connection closed"))

    def send(self, msg: dict) -> None:
        try:
            self._wfile.write(protocol.encode_line(msg))
            self._wfile.flush()
        except OSError:
            self._events.put(("disconnect", self, "send failed"))

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self._sock.close()
        except OSError:
            pass


class Manager:
    """Runs one trial queue to completion against a pool of workers."""

    def __init__(self, assignments: Sequence[TrialAssignment], ledger_path: str,
                 *, heartbeat_seconds: float = 10.0,
                 max_retries: int = DEFAULT_MAX_RETRIES,
                 tick_seconds: float = 0.1):
        ids = [a.trial_id for a in assignments]
        if len(set(ids)) != len(ids):
            raise ValueError("assignment trial_ids must be unique")
        self.ledger_path = ledger_path
        self.heartbeat_seconds = heartbeat_seconds
        self.max_retries = max_retries
        self.tick_seconds = tick_seconds

        self.records: list[dict] = read_ledger(ledger_path)
        self.pending: deque[TrialAssignment] = deque(
            resume_remaining(assignments, self.records))
        self.terminal: set[int] = {
            r["assignment"]["trial_id"] for r in self.records
            if r.get("status") in ("completed", "failed")}
        self.attempts: dict[int, int] = {}
        self.outstanding: dict[int, tuple[WorkerHandle, TrialAssignment, float, float]] = {}

        self.events: queue.Queue = queue.Queue()
        self.workers: list[WorkerHandle] = []
        self._listener: socket.socket | None = None
        self._accept_thread: threading.Thread | None = None
        self._writer: LedgerWriter | None = None
        self.bound_address: tuple[str, int] | None = None

    # ------------------------------------------------------------- workers

    def add_local_worker(self, worker_id: str | None = None,
                         evaluators=("mlp", "synthetic"),
                         eval_delay: float = 0.0) -> LocalWorkerHandle:
        wid = worker_id or f"local-{len(self.workers)}"
        handle = LocalWorkerHandle(self.events, wid, evaluators, eval_delay)
        self.workers.append(handle)
        return handle

    def add_subprocess_worker(self, worker_id: str | None = None,
                              evaluators=("mlp", "synthetic"),
                              eval_delay: float = 0.0) -> SubprocessWorkerHandle:
        wid = worker_id or f"proc-{len(self.workers)}"
        handle = SubprocessWorkerHandle(self.events, wid, evaluators,
                                        self.heartbeat_seconds, eval_delay)
        self.workers.append(handle)
        return handle

    def listen(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        """Accept TCP workers; returns the bound (host, port)."""
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen()
        self._accept_thread = threading.Thread(target=self._accept_loop,
                                               daemon=True)
        self._accept_thread.start()
        self.bound_address = self._listener.getsockname()[:2]
        return self.bound_address

    def _accept_loop(self) -> None:
        while True:
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return  # listener closed
            handle = TcpWorkerHandle(self.events, sock)
            self.workers.append(handle)

    # ----------------------------------------------------------- scheduling

    def run(self, stop_event: threading.Event | None = None) -> list[dict]:
        """Drive the queue until every trial is terminal; returns all records."""
        if not self.pending:
            self._shutdown()
            return self.records
        if not self.workers and self._listener is None:
            raise ManagerError("no workers and no listen address; queue cannot run")

        self._writer = LedgerWriter(self.ledger_path)
        last_tick = time.monotonic()
        try:
            while self.pending or self.outstanding:
                if stop_event is not None and stop_event.is_set():
                    raise ManagerError("stopped by request")
                try:
                    kind, handle, payload = self.events.get(
                        timeout=self.tick_seconds)
                except queue.Empty:
                    self._on_tick()
                    last_tick = time.monotonic()
                    continue
                if kind == "message":
                    self._on_message(handle, payload)
                elif kind == "disconnect":
                    self._on_disconnect(handle, payload)
                if time.monotonic() - last_tick > self.tick_seconds:
                    # a busy event stream must not starve the timers
                    self._on_tick()
                    last_tick = time.monotonic()
        finally:
            self._writer.close()
            self._writer = None
            self._shutdown()
        return self.records

    def _shutdown(self) -> None:
        for handle in self.workers:
            if handle.registered:
                try:
                    handle.send(protocol.drain_message())
                except Exception:
                    pass
        for handle in self.workers:
            handle.close()
            if isinstance(handle, LocalWorkerHandle):
                handle.join()
        self.workers.clear()
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
            self._listener = None

    # ------------------------------------------------------------- events

    def _on_message(self, handle: WorkerHandle, msg: dict) -> None:
        try:
            protocol.validate_message(msg)
        except ProtocolError as exc:
            if msg.get("type") == "register":
                code = ("version-mismatch"
                        if msg.get("v") != protocol.PROTOCOL_VERSION
                        else "bad-register")
                handle.send(protocol.reject_message(code, str(exc)))
                self._drop_worker(handle, f"register rejected: {exc}")
            else:
                self._on_disconnect(handle, f"protocol violation: {exc}")
            return
        handle.last_seen = time.monotonic()
        mtype = msg["type"]
        if mtype == "register":
            if not msg["evaluators"]:
                handle.send(protocol.reject_message(
                    "bad-register", "empty evaluators list"))
                self._drop_worker(handle, "register rejected: no evaluators")
                return
            handle.worker_id = str(msg["worker_id"])
            handle.evaluators = tuple(msg["evaluators"])
            handle.registered = True
            log.info("worker %s registered (%s)", handle.worker_id,
                     ",".join(handle.evaluators))
            self._dispatch(handle)
        elif mtype == "heartbeat":
            pass  # last_seen already updated
        elif mtype == "result":
            self._on_result(handle, msg)
        elif mtype == "error":
            self._on_error(handle, msg)

    def _owns(self, handle: WorkerHandle, trial_id: int) -> bool:
        entry = self.outstanding.get(trial_id)
        return entry is not None and entry[0] is handle

    def _on_result(self, handle: WorkerHandle, msg: dict) -> None:
        trial_id = msg["trial_id"]
        if not self._owns(handle, trial_id):
            log.warning("stale result for trial %s from %s ignored",
                        trial_id, handle.describe())
            return
        _, assignment, _, _ = self.outstanding.pop(trial_id)
        handle.busy = None
        result_fields = terminal_result_fields(
            assignment, msg["min_val_mse"], msg["best_epoch"],
            msg["epochs_run"], msg["param_count"])
        self._append(completed_record(
            assignment, result_fields, handle.worker_id or "?",
            self.attempts.get(trial_id, 1), float(msg["wall_seconds"])))
        self.terminal.add(trial_id)
        self._dispatch(handle)

    def _on_error(self, handle: WorkerHandle, msg: dict) -> None:
        trial_id = msg["trial_id"]
        if not self._owns(handle, trial_id):
            log.warning("stale error for trial %s from %s ignored",
                        trial_id, handle.describe())
            return
        _, assignment, _, _ = self.outstanding.pop(trial_id)
        handle.busy = None
        self._requeue_or_fail(assignment, msg["reason"], handle.worker_id or "?")
        self._dispatch(handle)

    def _on_disconnect(self, handle: WorkerHandle, reason: str) -> None:
        if handle not in self.workers:
            return
        self._drop_worker(handle, reason)

    def _drop_worker(self, handle: WorkerHandle, reason: str) -> None:
        log.info("dropping worker %s: %s", handle.describe(), reason)
        if handle in self.workers:
            self.workers.remove(handle)
        handle.close()
        if handle.busy is not None and handle.busy in self.outstanding:
            trial_id = handle.busy
            _, assignment, _, _ = self.outstanding.pop(trial_id)
            handle.busy = None
            self._requeue_or_fail(
                assignment, f"worker lost: {reason}", handle.worker_id or "?")
            self._dispatch_idle()

    def _requeue_or_fail(self, assignment: TrialAssignment, reason: str,
                         worker_id: str) -> None:
        trial_id = assignment.trial_id
        attempt = self.attempts.get(trial_id, 1)
        if attempt <= self.max_retries:
            self._append(reassigned_record(assignment, reason, worker_id, attempt))
            self.pending.append(assignment)
        else:
            self._append(failed_record(assignment, reason, worker_id, attempt))
            self.terminal.add(trial_id)

    # ------------------------------------------------------------ dispatch

    def _dispatch(self, handle: WorkerHandle) -> None:
        if not handle.registered or handle.busy is not None:
            return
        for i, assignment in enumerate(self.pending):
            if assignment.evaluator in handle.evaluators:
                del self.pending[i]
                self._send_assignment(handle, assignment)
                return

    def _dispatch_idle(self) -> None:
        for handle in list(self.workers):
            if handle.registered and handle.busy is None:
                self._dispatch(handle)

    def _send_assignment(self, handle: WorkerHandle,
                         assignment: TrialAssignment) -> None:
        trial_id = assignment.trial_id
        self.attempts[trial_id] = self.attempts.get(trial_id, 0) + 1
        now = time.monotonic()
        deadline = now + assignment.timeout_seconds + 2 * self.heartbeat_seconds
        self.outstanding[trial_id] = (handle, assignment, now, deadline)
        handle.busy = trial_id
        handle.send(assignment.to_wire())

    # -------------------------------------------------------------- timers

    def _on_tick(self) -> None:
        now = time.monotonic()
        silence_limit = MISSED_HEARTBEATS_LIMIT * self.heartbeat_seconds \
            + 0.5 * self.heartbeat_seconds
        for handle in list(self.workers):
            if handle.registered and not handle.local \
                    and now - handle.last_seen > silence_limit:
                self._drop_worker(
                    handle,
                    f"no heartbeat for {now - handle.last_seen:.1f}s")
        for trial_id, (handle, _, _, deadline) in list(self.outstanding.items()):
            if now > deadline:
                self._drop_worker(handle, f"trial {trial_id} passed its deadline")
        if self.pending and not self.outstanding and self._listener is None:
            if not self.workers:
                raise ManagerError(
                    f"all workers lost with {len(self.pending)} trials pending")
            if all(h.registered and h.busy is None for h in self.workers):
                offered = {e for h in self.workers for e in h.evaluators}
                needed = {a.evaluator for a in self.pending}
                if not needed & offered:
                    raise ManagerError(
                        f"no connected worker offers {sorted(needed)} "
                        f"({len(self.pending)} trials pending)")

    # -------------------------------------------------------------- ledger

    def _append(self, record: dict) -> None:
        self._writer.append(record)
        self.records.append(record)


def run_queue(assignments: Sequence[TrialAssignment], ledger_path: str, *,
              local_workers: int = 0, subprocess_workers: int = 0,
              bind: tuple[str, int] | None = None,
              heartbeat_seconds: float = 10.0,
              max_retries: int = DEFAULT_MAX_RETRIES,
              eval_delay: float = 0.0,
              stop_event: threading.Event | None = None,
              manager_hook=None) -> list[dict]:
    """Run a queue to completion and return every ledger record.

    Resumable: trials with terminal records in an existing ledger at
    ``ledger_path`` are skipped, and re-running a finished queue appends
    nothing. With ``bind`` set the manager also accepts TCP workers; with
    zero workers and no bind it refuses to run (unless nothing remains).
    ``manager_hook``, if given, is called with the Manager before running
    (tests use it to reach worker handles mid-run).
    """
    manager = Manager(assignments, ledger_path,
                      heartbeat_seconds=heartbeat_seconds,
                      max_retries=max_retries)
    for i in range(local_workers):
        manager.add_local_worker(f"local-{i}", eval_delay=eval_delay)
    for i in range(subprocess_workers):
        manager.add_subprocess_worker(f"proc-{i}", eval_delay=eval_delay)
    if bind is not None:
        manager.listen(*bind)
    if manager_hook is not None:
        manager_hook(manager)
    return manager.run(stop_event=stop_event)
