"""Distributed execution: wire protocol, workers, manager, trial ledger."""
from .protocol import (
    PROTOCOL_VERSION,
    ProtocolError,
    TrialAssignment,
    canonical_json,
)
from .ledger import LEDGER_SCHEMA, LedgerError, LedgerWriter, read_ledger

__all__ = [
    "PROTOCOL_VERSION",
    "ProtocolError",
    "TrialAssignment",
    "canonical_json",
    "LEDGER_SCHEMA",
    "LedgerError",
    "LedgerWriter",
    "read_ledger",
    "Manager",
    "ManagerError",
    "run_queue",
    "worker_loop",
    "join_worker",
]

_LAZY = {
    "Manager": "manager",
    "ManagerError": "manager",
    "run_queue": "manager",
    "worker_loop": "worker",
    "join_worker": "worker",
}


def __getattr__(name: str):
    # manager/worker pull in the evaluators module, which itself imports
    # this package for the protocol; loading them lazily breaks the cycle
    module_name = _LAZY.get(name)
    if module_name is None:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
    import importlib

    module = importlib.import_module(f".{module_name}", __name__)
    return getattr(module, name)
