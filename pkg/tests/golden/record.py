"""Regenerate the golden wire transcripts.

Run from the repository root:

    python3 tests/golden/record.py

session3_synthetic.jsonl is recorded from a live TCP session between a
scripted manager and the real internal worker: every byte the worker sent
is what the file expects, with wall_seconds masked to 0.0. The scripted
side sends exactly the messages a real manager would (assignment.to_wire()
in queue order, then drain).

session3_external.jsonl is built from the same assignment generator with
evaluator "external" plus the stub-command contract used by adapter tests:
the stub reports min_val_mse=(trial_id+1)*1e-3, epochs_run=10+trial_id,
param_count=1000+trial_id, and adapters default best_epoch to epochs_run
when the result file omits it. The internal workers cannot evaluate
"external" assignments, so this half of the suite is exercised by adapter
implementations.
"""

import os
import socket
import threading

from twostep.pipeline import ProjectSpec, step1_assignments
from twostep.runtime import protocol
from twostep.runtime.worker import SocketTransport, worker_loop

HERE = os.path.dirname(os.path.abspath(__file__))
WORKER_ID = "golden-worker"


def golden_spec(evaluator: str) -> ProjectSpec:
    return ProjectSpec(
        project_id="golden",
        n_trials=3,
        p_subset=0.05,
        p_retrain=0.0,
        dataset={"kind": "virtual", "n_samples": 50_000},
        master_seed=13,
        evaluator=evaluator,
        timeout_seconds=30.0,
    )


def stub_result(trial_id: int) -> dict:
    """What the adapter stub command reports for a given trial."""
    return {
        "min_val_mse": (trial_id + 1) * 1e-3,
        "epochs_run": 10 + trial_id,
        "param_count": 1000 + trial_id,
    }


def record_synthetic() -> list[dict]:
    """Drive the real worker over TCP and record both directions."""
    assignments = step1_assignments(golden_spec("synthetic"))
    server = socket.socket()
    server.bind(("127.0.0.1", 0))
    server.listen(1)
    address = server.getsockname()

    exit_code = {}

    def run_worker():
        sock = socket.create_connection(address)
        exit_code["value"] = worker_loop(
            SocketTransport(sock), WORKER_ID, ("synthetic",),
            heartbeat_seconds=None)

    thread = threading.Thread(target=run_worker)
    thread.start()
    conn, _ = server.accept()
    transport = SocketTransport(conn)
    lines = []

    register = transport.recv()
    assert register == protocol.register_message(WORKER_ID, ["synthetic"])
    lines.append({"dir": "recv", "msg": register})
    for assignment in assignments:
        msg = assignment.to_wire()
        transport.send(msg)
        lines.append({"dir": "send", "msg": msg})
        result = dict(transport.recv())
        assert result["type"] == "result", result
        assert result["trial_id"] == assignment.trial_id
        result["wall_seconds"] = 0.0  # volatile; masked in the transcript
        lines.append({"dir": "recv", "msg": result})
    drain = protocol.drain_message()
    transport.send(drain)
    lines.append({"dir": "send", "msg": drain})
    assert transport.recv() is None, "worker should close after drain"
    thread.join(timeout=10)
    assert exit_code.get("value") == 0
    transport.close()
    server.close()
    return lines


def build_external() -> list[dict]:
    lines = [{"dir": "recv",
              "msg": protocol.register_message(WORKER_ID, ["external"])}]
    for assignment in step1_assignments(golden_spec("external")):
        lines.append({"dir": "send", "msg": assignment.to_wire()})
        reported = stub_result(assignment.trial_id)
        lines.append({"dir": "recv", "msg": protocol.result_message(
            trial_id=assignment.trial_id,
            min_val_mse=reported["min_val_mse"],
            best_epoch=reported["epochs_run"],
            epochs_run=reported["epochs_run"],
            param_count=reported["param_count"],
            wall_seconds=0.0)})
    lines.append({"dir": "send", "msg": protocol.drain_message()})
    return lines


def write_transcript(name: str, lines: list[dict]) -> str:
    path = os.path.join(HERE, name)
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(protocol.canonical_json(line) + "\n")
    return path


def main() -> None:
    print(write_transcript("session3_synthetic.jsonl", record_synthetic()))
    print(write_transcript("session3_external.jsonl", build_external()))


if __name__ == "__main__":
    main()
