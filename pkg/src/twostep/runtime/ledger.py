"""Append-only JSONL ledger of trial events and crash-tolerant resume.

One record per line, canonical JSON, schema-versioned:

    {"schema":1,"status":"completed","assignment":{...},"worker_id":str,
     "attempt":int,"wall_seconds":float,
     "result":{"min_val_mse":float,"best_epoch":int,"epochs_run":int,
               "param_count":int,"cost_units":float,"stopped_early":bool}}
    {"schema":1,"status":"failed","assignment":{...},"worker_id":str,
     "attempt":int,"wall_seconds":float,"reason":str}
    {"schema":1,"status":"reassigned","assignment":{...},"worker_id":str,
     "attempt":int,"wall_seconds":float,"reason":str}

``completed`` and ``failed`` are terminal: exactly one terminal record per
trial_id. ``reassigned`` records are the audit trail of retries. Failed
results never encode NaN or Inf; the failure is the status itself.

A crash can tear the final line; readers tolerate that and resume re-queues
the torn trial. Corruption anywhere else is an error naming the line.
"""
from __future__ import annotations

import os
from typing import Iterable, Sequence

from .protocol import TrialAssignment, canonical_json

LEDGER_SCHEMA = 1

TERMINAL_STATUSES = ("completed", "failed")
VOLATILE_FIELDS = ("worker_id", "attempt", "wall_seconds")


class LedgerError(ValueError):
    """Unreadable or internally inconsistent ledger."""


def completed_record(assignment: TrialAssignment, result_fields: dict,
                     worker_id: str, attempt: int, wall_seconds: float) -> dict:
    return {
        "schema": LEDGER_SCHEMA,
        "status": "completed",
        "assignment": assignment.to_json(),
        "worker_id": worker_id,
        "attempt": attempt,
        "wall_seconds": wall_seconds,
        "result": dict(result_fields),
    }


def failed_record(assignment: TrialAssignment, reason: str, worker_id: str,
                  attempt: int, wall_seconds: float = 0.0) -> dict:
    return {
        "schema": LEDGER_SCHEMA,
        "status": "failed",
        "assignment": assignment.to_json(),
        "worker_id": worker_id,
        "attempt": attempt,
        "wall_seconds": wall_seconds,
        "reason": reason,
    }


def reassigned_record(assignment: TrialAssignment, reason: str, worker_id: str,
                      attempt: int, wall_seconds: float = 0.0) -> dict:
    return {
        "schema": LEDGER_SCHEMA,
        "status": "reassigned",
        "assignment": assignment.to_json(),
        "worker_id": worker_id,
        "attempt": attempt,
        "wall_seconds": wall_seconds,
        "reason": reason,
    }


def strip_volatile(record: dict) -> dict:
    """Drop fields that vary across runs (identity and timing), leaving the
    deterministic content used for equality comparisons."""
    out = {k: v for k, v in record.items() if k not in VOLATILE_FIELDS}
    if "result" in out:
        out["result"] = dict(out["result"])
    return out


class LedgerWriter:
    """Single-writer append handle; one flushed line per record.

    Opening a ledger whose final line was torn by a crash truncates that
    fragment first; otherwise the next append would fuse with it and
    corrupt two records. Readers already ignore the fragment, so dropping
    it loses nothing.
    """

    def __init__(self, path: str):
        self.path = path
        parent = os.path.dirname(os.path.abspath(path))
        os.makedirs(parent, exist_ok=True)
        self._drop_torn_tail(path)
        self._fh = open(path, "a", encoding="utf-8")

    @staticmethod
    def _drop_torn_tail(path: str) -> None:
        if not os.path.exists(path):
            return
        with open(path, "r+b") as fh:
            data = fh.read()
            if not data or data.endswith(b"\n"):
                return
            keep = data.rfind(b"\n") + 1  # 0 when no newline at all
            fh.truncate(keep)

    def append(self, record: dict) -> None:
        self._fh.write(canonical_json(record) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "LedgerWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_ledger(path: str) -> list[dict]:
    """Parse a ledger, tolerating a torn final line (crash artifact).

    A malformed line anywhere before the end raises LedgerError naming the
    1-based line number.
    """
    if not os.path.exists(path):
        return []
    records: list[dict] = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    import json

    for i, line in enumerate(lines, start=1):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError:
            if i == len(lines):
                break  # torn tail: ignore, its trial will be re-queued
            raise LedgerError(f"{path}: corrupt record at line {i}") from None
        if not isinstance(obj, dict) or "status" not in obj:
            if i == len(lines):
                break
            raise LedgerError(f"{path}: line {i} is not a ledger record")
        records.append(obj)
    return records


def terminal_trial_ids(records: Iterable[dict]) -> set[int]:
    return {
        r["assignment"]["trial_id"]
        for r in records
        if r.get("status") in TERMINAL_STATUSES
    }


def check_exactly_once(records: Sequence[dict]) -> None:
    """Raise if any trial has more than one terminal record."""
    seen: set[int] = set()
    for r in records:
        if r.get("status") not in TERMINAL_STATUSES:
            continue
        tid = r["assignment"]["trial_id"]
        if tid in seen:
            raise LedgerError(f"trial {tid} has more than one terminal record")
        seen.add(tid)


def resume_remaining(assignments: Sequence[TrialAssignment],
                     records: Iterable[dict]) -> list[TrialAssignment]:
    """Assignments still owed a terminal record.

    Completed AND failed trials are both skipped: a failed trial already
    exhausted its retries under the same seeds, so re-running it would
    repeat the identical computation.
    """
    done = terminal_trial_ids(records)
    return [a for a in assignments if a.trial_id not in done]
