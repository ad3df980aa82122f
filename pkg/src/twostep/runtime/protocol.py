"""Wire protocol: line-delimited JSON messages shared by every transport.

One JSON object per line, UTF-8, canonical encoding (sorted keys, no
spaces, NaN/Inf forbidden). The same messages flow over TCP sockets,
subprocess stdin/stdout, and the in-process queue pair, so a worker cannot
tell transports apart.

Message shapes (v = protocol version, currently 1):

    worker -> manager:
        {"v":1,"type":"register","worker_id":str,"evaluators":[str,...]}
        {"v":1,"type":"result","trial_id":int,"min_val_mse":float,
         "best_epoch":int,"epochs_run":int,"param_count":int,
         "wall_seconds":float}
        {"v":1,"type":"error","trial_id":int,"reason":str}
        {"v":1,"type":"heartbeat","worker_id":str}
    manager -> worker:
        {"v":1,"type":"assign", ...assignment fields...}
        {"v":1,"type":"drain"}
        {"v":1,"type":"reject","code":str,"reason":str}

The reject message answers a register whose version or shape is
unacceptable; its ``code`` is machine-readable ("version-mismatch",
"bad-register").
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

from ..space import TrialConfig
from ..trainer import TrainBudget

PROTOCOL_VERSION = 1

EVALUATOR_KINDS = ("mlp", "synthetic", "external")


class ProtocolError(ValueError):
    """Malformed or out-of-contract message."""


def canonical_json(obj: Any) -> str:
    """Deterministic JSON: sorted keys, compact separators, finite numbers only."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def encode_line(obj: dict) -> bytes:
    return (canonical_json(obj) + "\n").encode("utf-8")


def parse_line(line: str) -> dict:
    try:
        msg = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"unparseable message line: {exc}") from None
    if not isinstance(msg, dict) or "type" not in msg:
        raise ProtocolError("message must be a JSON object with a 'type' field")
    return msg


@dataclass(frozen=True)
class TrialAssignment:
    """Everything a worker needs to evaluate one trial, self-contained.

    All seeds are already derived from the project master seed, so a retry
    re-executes the identical computation. ``dataset`` is a reference, not
    data: {"kind":"csv","path":...}, {"kind":"synthetic","n_samples":...,
    "gen_seed":...}, or {"kind":"virtual","n_samples":...} for the
    closed-form evaluator (optionally with "noise_scale").
    ``checkpoint_dir``, when set, asks the mlp evaluator to persist the
    trained model as trial_<id>.npz there.
    """

    trial_id: int
    step: int
    config: TrialConfig
    dataset: dict
    p_subset: float
    train_fraction: float
    subset_seed: int
    split_seed: int
    train_seed: int
    budget: TrainBudget = field(default_factory=TrainBudget)
    evaluator: str = "mlp"
    timeout_seconds: float = 3600.0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.step not in (1, 2):
            raise ProtocolError(f"step must be 1 or 2, got {self.step}")
        if self.evaluator not in EVALUATOR_KINDS:
            raise ProtocolError(f"unknown evaluator kind {self.evaluator!r}")
        if not 0 < self.p_subset <= 1:
            raise ProtocolError("p_subset must be in (0, 1]")
        if not 0 < self.train_fraction < 1:
            raise ProtocolError("train_fraction must be in (0, 1)")
        if self.timeout_seconds <= 0:
            raise ProtocolError("timeout_seconds must be positive")

    def to_json(self) -> dict:
        obj = {
            "trial_id": self.trial_id,
            "step": self.step,
            "config": self.config.to_json(),
            "dataset": dict(self.dataset),
            "p_subset": self.p_subset,
            "train_fraction": self.train_fraction,
            "subset_seed": self.subset_seed,
            "split_seed": self.split_seed,
            "train_seed": self.train_seed,
            "budget": self.budget.to_json(),
            "evaluator": self.evaluator,
            "timeout_seconds": self.timeout_seconds,
        }
        if self.checkpoint_dir is not None:
            obj["checkpoint_dir"] = self.checkpoint_dir
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "TrialAssignment":
        try:
            return cls(
                trial_id=int(obj["trial_id"]),
                step=int(obj["step"]),
                config=TrialConfig.from_json(obj["config"]),
                dataset=dict(obj["dataset"]),
                p_subset=float(obj["p_subset"]),
                train_fraction=float(obj["train_fraction"]),
                subset_seed=int(obj["subset_seed"]),
                split_seed=int(obj["split_seed"]),
                train_seed=int(obj["train_seed"]),
                budget=TrainBudget.from_json(obj["budget"]),
                evaluator=str(obj["evaluator"]),
                timeout_seconds=float(obj.get("timeout_seconds", 3600.0)),
                checkpoint_dir=obj.get("checkpoint_dir"),
            )
        except KeyError as exc:
            raise ProtocolError(f"assignment missing field {exc}") from None

    def to_wire(self) -> dict:
        msg = {"v": PROTOCOL_VERSION, "type": "assign"}
        msg.update(self.to_json())
        return msg

    @classmethod
    def from_wire(cls, msg: dict) -> "TrialAssignment":
        body = {k: v for k, v in msg.items() if k not in ("v", "type")}
        return cls.from_json(body)


def register_message(worker_id: str, evaluators: list[str]) -> dict:
    return {"v": PROTOCOL_VERSION, "type": "register",
            "worker_id": worker_id, "evaluators": list(evaluators)}


def result_message(trial_id: int, min_val_mse: float, best_epoch: int,
                   epochs_run: int, param_count: int,
                   wall_seconds: float) -> dict:
    return {"v": PROTOCOL_VERSION, "type": "result", "trial_id": trial_id,
            "min_val_mse": float(min_val_mse), "best_epoch": int(best_epoch),
            "epochs_run": int(epochs_run), "param_count": int(param_count),
            "wall_seconds": float(wall_seconds)}


def error_message(trial_id: int, reason: str) -> dict:
    return {"v": PROTOCOL_VERSION, "type": "error",
            "trial_id": trial_id, "reason": reason}


def heartbeat_message(worker_id: str) -> dict:
    return {"v": PROTOCOL_VERSION, "type": "heartbeat", "worker_id": worker_id}


def drain_message() -> dict:
    return {"v": PROTOCOL_VERSION, "type": "drain"}


def reject_message(code: str, reason: str) -> dict:
    return {"v": PROTOCOL_VERSION, "type": "reject", "code": code, "reason": reason}


_REQUIRED_FIELDS = {
    "register": ("worker_id", "evaluators"),
    "result": ("trial_id", "min_val_mse", "best_epoch", "epochs_run",
               "param_count", "wall_seconds"),
    "error": ("trial_id", "reason"),
    "heartbeat": ("worker_id",),
    "assign": ("trial_id",),
    "drain": (),
    "reject": ("code", "reason"),
}


def validate_message(msg: dict) -> dict:
    """Check version and per-type required fields; returns msg unchanged."""
    mtype = msg.get("type")
    if mtype not in _REQUIRED_FIELDS:
        raise ProtocolError(f"unknown message type {mtype!r}")
    if msg.get("v") != PROTOCOL_VERSION:
        raise ProtocolError(
            f"protocol version {msg.get('v')!r} does not match {PROTOCOL_VERSION}")
    for key in _REQUIRED_FIELDS[mtype]:
        if key not in msg:
            raise ProtocolError(f"{mtype} message missing field {key!r}")
    return msg
