"""Command-line front door for the two-step search workflow.

One binary with subcommands; flags mirror project-spec field names so there
is no second vocabulary to learn. Successful commands print a single JSON
summary line on stdout (`cost` prints bare numbers); failures print one
machine-readable JSON error line on stderr and exit with a class-specific
code:

    0  success
    1  unexpected internal error
    2  usage (bad flags or arguments)
    3  project spec unreadable or invalid
    4  dataset missing or invalid
    5  execution failure (training, selection, manager)
    6  ledger or report artifacts unreadable
    7  network (cannot reach or serve peers)

The ``TWOSTEP_LOG`` environment variable sets the log level (e.g. DEBUG).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .analysis import AnalysisError, analyze_workdir
from .data import DataError, generate_synthetic_activation, manifest_path_for, write_csv
from .evaluators import (
    EvaluatorError,
    dataset_n_samples,
    evaluate_assignment,
    resolve_dataset,
    terminal_result_fields,
)
from .pipeline import (
    DEFAULT_ERROR_THRESHOLD,
    CostModel,
    PipelineError,
    ProjectSpec,
    cost_ratio,
    final_select,
    load_project_spec,
    load_report,
    measured_cost_ratio,
    run_rank_groups,
    run_step1,
    run_step2,
    save_project_spec,
    select_topk,
    step1_assignments,
    step2_assignments,
)
from .runtime.ledger import LedgerError
from .runtime.protocol import ProtocolError, canonical_json
from .runtime.worker import join_worker
from .space import DEFAULT_LAYER_COUNT_CHOICES, DEFAULT_WIDTH_CHOICES, SearchSpace, SpaceError
from .trainer import TrainBudget, TrainerError

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_SPEC = 3
EXIT_DATA = 4
EXIT_EXEC = 5
EXIT_LEDGER = 6
EXIT_NET = 7

log = logging.getLogger("twostep.cli")


class CliError(Exception):
    """Error already classified for exit-code and stderr reporting."""

    def __init__(self, code_name: str, exit_code: int, message: str):
        super().__init__(message)
        self.code_name = code_name
        self.exit_code = exit_code


class _Parser(argparse.ArgumentParser):
    # argparse's plain-text usage errors become JSON lines like every
    # other failure, and always exit with the usage code
    def error(self, message):
        _print_error("usage", message)
        raise SystemExit(EXIT_USAGE)


def _print_error(code_name: str, message: str) -> None:
    print(canonical_json({"error": {"code": code_name, "message": message}}),
          file=sys.stderr, flush=True)


def _emit(obj: dict) -> None:
    print(canonical_json(obj), flush=True)


def _parse_hostport(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise CliError("usage", EXIT_USAGE,
                       f"expected HOST:PORT, got {text!r}")
    return host, int(port)


def _parse_int_list(text: str, flag: str) -> list[int]:
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise CliError("usage", EXIT_USAGE,
                       f"{flag} expects comma-separated integers, got {text!r}")
    if not values:
        raise CliError("usage", EXIT_USAGE, f"{flag} needs at least one value")
    return values


def _load_spec(path: str) -> ProjectSpec:
    try:
        return load_project_spec(path)
    except (OSError, json.JSONDecodeError, PipelineError, SpaceError,
            TrainerError, ValueError) as exc:
        raise CliError("spec", EXIT_SPEC, f"cannot load spec {path}: {exc}")


def _load_report(path: str):
    try:
        return load_report(path)
    except (OSError, json.JSONDecodeError, PipelineError, ValueError) as exc:
        raise CliError("ledger", EXIT_LEDGER, f"cannot load report {path}: {exc}")


def _preflight_dataset(spec: ProjectSpec) -> None:
    """Fail fast, in this process, on unusable dataset references."""
    try:
        if spec.evaluator == "mlp":
            resolve_dataset(spec.dataset)
        else:
            dataset_n_samples(spec.dataset)
    except (DataError, EvaluatorError) as exc:
        raise CliError("dataset", EXIT_DATA, str(exc))


def _announce_listener(manager) -> None:
    _emit({"listening": list(manager.bound_address)})


def _run_options(args) -> dict:
    opts = {
        "local_workers": args.local_workers,
        "subprocess_workers": args.subprocess_workers,
        "heartbeat_seconds": args.heartbeat,
        "max_retries": args.max_retries,
    }
    if args.bind:
        opts["bind"] = _parse_hostport(args.bind)
        opts["manager_hook"] = _announce_listener
    return opts


def _step_summary(report, workdir: str, ledger_name: str,
                  report_name: str) -> dict:
    return {
        "project": report.project_id,
        "step": report.step,
        "ledger": os.path.join(workdir, ledger_name),
        "report": os.path.join(workdir, report_name),
        "completed": report.completed_count,
        "failed": report.failed_count,
        "total_cost_units": report.total_cost_units,
        "unhealthy": report.unhealthy,
    }


def _format_ratio(value: float) -> str:
    # the headline ratios are percent-like (0.10 for ten percent); keep two
    # decimals when that is exact, full precision otherwise
    if abs(value * 100 - round(value * 100)) < 1e-9:
        return f"{value:.2f}"
    return f"{value:.10g}"


# ----------------------------------------------------------- subcommands


def _cmd_init(args) -> int:
    dataset: dict
    if args.dataset_csv:
        dataset = {"kind": "csv", "path": args.dataset_csv}
    elif args.dataset_synthetic:
        dataset = {"kind": "synthetic", "n_samples": args.dataset_synthetic,
                   "gen_seed": args.gen_seed}
    else:
        dataset = {"kind": "virtual", "n_samples": args.virtual_n}
        if args.noise_scale is not None:
            dataset["noise_scale"] = args.noise_scale
    try:
        spec = ProjectSpec(
            project_id=args.project_id,
            n_trials=args.n_trials,
            p_subset=args.p_subset,
            p_retrain=args.p_retrain,
            dataset=dataset,
            train_fraction=args.train_fraction,
            master_seed=args.master_seed,
            evaluator=args.evaluator,
            budget=TrainBudget(
                batch_size=args.batch_size,
                learning_rate=args.learning_rate,
                max_epochs=args.max_epochs,
                patience=args.patience,
            ),
            space=SearchSpace(
                layer_count_choices=tuple(
                    _parse_int_list(args.layer_counts, "--layer-counts")),
                width_choices=tuple(_parse_int_list(args.widths, "--widths")),
            ),
            error_threshold=args.error_threshold,
            timeout_seconds=args.timeout_seconds,
        )
    except (PipelineError, SpaceError, TrainerError) as exc:
        raise CliError("spec", EXIT_SPEC, str(exc))

    out = args.out
    tmp = out + ".tmp"
    save_project_spec(spec, tmp)
    try:
        if os.path.exists(out) and not args.force:
            with open(out, "rb") as old, open(tmp, "rb") as new:
                if old.read() == new.read():
                    _emit({"spec": out, "unchanged": True})
                    return EXIT_OK
            raise CliError(
                "spec", EXIT_SPEC,
                f"{out} exists with different content; pass --force to overwrite")
        os.replace(tmp, out)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)
    _emit({"spec": out, "project": spec.project_id, "n_trials": spec.n_trials})
    return EXIT_OK


def _cmd_gen_data(args) -> int:
    if args.n_samples < 10:
        raise CliError("usage", EXIT_USAGE, "--n-samples must be at least 10")
    handle = generate_synthetic_activation(args.n_samples, args.gen_seed)
    out = args.out
    tmp = out + ".gen.tmp"
    write_csv(handle, tmp)
    try:
        if os.path.exists(out) and not args.force:
            with open(out, "rb") as old, open(tmp, "rb") as new:
                same = old.read() == new.read()
            if same:
                _emit({"csv": out, "unchanged": True})
                return EXIT_OK
            raise CliError(
                "dataset", EXIT_DATA,
                f"{out} exists with different content; pass --force to overwrite")
        os.replace(tmp, out)
        os.replace(manifest_path_for(tmp), manifest_path_for(out))
    finally:
        for leftover in (tmp, manifest_path_for(tmp)):
            if os.path.exists(leftover):
                os.remove(leftover)
    _emit({
        "csv": out,
        "manifest": manifest_path_for(out),
        "n_samples": handle.n_samples,
        "n_inputs": handle.n_inputs,
        "n_outputs": handle.n_outputs,
    })
    return EXIT_OK


def _cmd_step1(args) -> int:
    spec = _load_spec(args.spec)
    _preflight_dataset(spec)
    report = run_step1(spec, args.workdir, **_run_options(args))
    _emit(_step_summary(report, args.workdir, "step1.jsonl",
                        "step1_report.json"))
    return EXIT_OK


def _selection_for(args, spec: ProjectSpec, workdir: str):
    report_path = args.report or os.path.join(workdir, "step1_report.json")
    report = _load_report(report_path)
    try:
        return select_topk(report, spec.p_retrain)
    except PipelineError as exc:
        raise CliError("execution", EXIT_EXEC, str(exc))


def _cmd_step2(args) -> int:
    spec = _load_spec(args.spec)
    _preflight_dataset(spec)
    selected = _selection_for(args, spec, args.workdir)
    try:
        report = run_step2(spec, selected, args.workdir, **_run_options(args))
    except PipelineError as exc:
        raise CliError("execution", EXIT_EXEC, str(exc))
    summary = _step_summary(report, args.workdir, "step2.jsonl",
                            "step2_report.json")
    summary["selected"] = [t.trial_id for t in selected]
    _emit(summary)
    return EXIT_OK


def _cmd_select(args) -> int:
    workdir = args.workdir
    if args.final:
        report_path = args.report or os.path.join(workdir, "step2_report.json")
        report = _load_report(report_path)
        try:
            picks = final_select(report, best_k=args.best_k,
                                 lightest=args.lightest,
                                 heaviest=args.heaviest,
                                 threshold=args.error_threshold)
        except PipelineError as exc:
            raise CliError("execution", EXIT_EXEC, str(exc))
        _emit({"selection": [{"label": label, "trial": trial.to_json()}
                             for label, trial in picks]})
        return EXIT_OK

    if args.p_retrain is None and not args.spec:
        raise CliError("usage", EXIT_USAGE,
                       "select needs --spec or --p-retrain")
    if args.p_retrain is not None:
        report_path = args.report or os.path.join(workdir, "step1_report.json")
        report = _load_report(report_path)
        try:
            selected = select_topk(report, args.p_retrain)
        except PipelineError as exc:
            raise CliError("execution", EXIT_EXEC, str(exc))
    else:
        selected = _selection_for(args, _load_spec(args.spec), workdir)
    _emit({
        "k": len(selected),
        "trial_ids": [t.trial_id for t in selected],
        "selected": [t.to_json() for t in selected],
    })
    return EXIT_OK


def _cmd_rank_groups(args) -> int:
    spec = _load_spec(args.spec)
    _preflight_dataset(spec)
    report_path = args.report or os.path.join(args.workdir, "step1_report.json")
    step1_report = _load_report(report_path)
    starts = _parse_int_list(args.starts, "--starts")
    try:
        grouped = run_rank_groups(spec, step1_report, starts, args.size,
                                  args.workdir, **_run_options(args))
    except PipelineError as exc:
        raise CliError("execution", EXIT_EXEC, str(exc))
    _emit({
        "groups": {
            str(start): {
                "report": os.path.join(args.workdir,
                                       f"rankgroup_{start}_report.json"),
                "completed": rep.completed_count,
                "failed": rep.failed_count,
            }
            for start, rep in grouped.items()
        },
        "size": args.size,
    })
    return EXIT_OK


def _cmd_analyze(args) -> int:
    subsample_ms = (_parse_int_list(args.subsample_ms, "--subsample-ms")
                    if args.subsample_ms else None)
    try:
        summary = analyze_workdir(
            args.workdir, args.out, k=args.k, window=args.window,
            tolerance=args.tolerance, subsample_ms=subsample_ms,
            subsample_seed=args.subsample_seed)
    except (FileNotFoundError, PipelineError, json.JSONDecodeError) as exc:
        raise CliError("ledger", EXIT_LEDGER, str(exc))
    except AnalysisError as exc:
        raise CliError("execution", EXIT_EXEC, str(exc))
    _emit({"summary": summary["summary_path"], "files": summary["files"]})
    return EXIT_OK


def _cmd_manager(args) -> int:
    spec = _load_spec(args.spec)
    _preflight_dataset(spec)
    options = _run_options(args)
    if "bind" not in options:
        raise CliError("usage", EXIT_USAGE, "manager requires --bind HOST:PORT")
    if args.step == 1:
        report = run_step1(spec, args.workdir, **options)
        _emit(_step_summary(report, args.workdir, "step1.jsonl",
                            "step1_report.json"))
    else:
        selected = _selection_for(args, spec, args.workdir)
        try:
            report = run_step2(spec, selected, args.workdir, **options)
        except PipelineError as exc:
            raise CliError("execution", EXIT_EXEC, str(exc))
        _emit(_step_summary(report, args.workdir, "step2.jsonl",
                            "step2_report.json"))
    return EXIT_OK


def _cmd_worker(args) -> int:
    address = _parse_hostport(args.connect)
    evaluators = [e.strip() for e in args.evaluators.split(",") if e.strip()]
    if not evaluators:
        raise CliError("usage", EXIT_USAGE, "--evaluators must not be empty")
    try:
        code = join_worker(address, args.worker_id, evaluators, args.heartbeat,
                           eval_delay=args.eval_delay)
    except OSError as exc:
        raise CliError("network", EXIT_NET,
                       f"cannot reach manager at {args.connect}: {exc}")
    if code != 0:
        raise CliError("network", EXIT_NET,
                       "manager rejected the worker or the session broke")
    return EXIT_OK


def _cmd_eval_one(args) -> int:
    spec = _load_spec(args.spec)
    _preflight_dataset(spec)
    if args.step == 1:
        assignments = step1_assignments(spec)
    else:
        if not args.workdir:
            raise CliError("usage", EXIT_USAGE,
                           "eval-one --step 2 needs --workdir with a step-1 report")
        selected = _selection_for(args, spec, args.workdir)
        assignments = step2_assignments(spec, selected)
    matches = [a for a in assignments if a.trial_id == args.trial_id]
    if not matches:
        raise CliError("usage", EXIT_USAGE,
                       f"trial {args.trial_id} is not in the step-{args.step} queue")
    assignment = matches[0]
    try:
        result = evaluate_assignment(assignment)
    except (EvaluatorError, DataError, TrainerError) as exc:
        raise CliError("execution", EXIT_EXEC, str(exc))
    if result.failed:
        raise CliError("execution", EXIT_EXEC,
                       f"trial failed: {result.failure_reason}")
    _emit({
        "trial_id": assignment.trial_id,
        "step": assignment.step,
        "config": assignment.config.to_json(),
        "result": terminal_result_fields(
            assignment, result.min_val_mse, result.best_epoch,
            result.epochs_run, result.param_count),
    })
    return EXIT_OK


def _cmd_cost(args) -> int:
    try:
        analytic = cost_ratio(args.p_subset, args.p_retrain)
    except PipelineError as exc:
        raise CliError("usage", EXIT_USAGE, str(exc))
    if not args.workdir:
        print(_format_ratio(analytic))
        return EXIT_OK
    if args.reference_full_cost is None:
        raise CliError("usage", EXIT_USAGE,
                       "measured cost needs --reference-full-cost")
    step1_report = _load_report(os.path.join(args.workdir, "step1_report.json"))
    step2_path = os.path.join(args.workdir, "step2_report.json")
    step2_report = _load_report(step2_path) if os.path.exists(step2_path) else None
    try:
        model = CostModel(c_sample=args.c_sample, c_overhead=args.c_overhead)
        measured = measured_cost_ratio(step1_report, step2_report,
                                       args.reference_full_cost, model)
    except PipelineError as exc:
        raise CliError("execution", EXIT_EXEC, str(exc))
    print(f"analytic {_format_ratio(analytic)}")
    print(f"measured {_format_ratio(measured)}")
    return EXIT_OK


# -------------------------------------------------------------- wiring


def _add_worker_options(parser) -> None:
    parser.add_argument("--local-workers", type=int, default=0,
                        help="in-process workers (default 1 if no other)")
    parser.add_argument("--subprocess-workers", type=int, default=0,
                        help="child-process workers over stdio")
    parser.add_argument("--bind", metavar="HOST:PORT",
                        help="also accept TCP workers; port 0 picks a free one")
    parser.add_argument("--heartbeat", type=float, default=10.0,
                        help="worker heartbeat interval in seconds")
    parser.add_argument("--max-retries", type=int, default=3,
                        help="reassignments before a trial fails for good")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="twostep",
                     description="Two-step hyperparameter search over MLPs")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("init", help="write a template project spec")
    p.add_argument("--out", default="project.json")
    p.add_argument("--project-id", default="demo")
    p.add_argument("--n-trials", type=int, default=50)
    p.add_argument("--p-subset", type=float, default=0.05)
    p.add_argument("--p-retrain", type=float, default=0.1)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--master-seed", "--seed", type=int, default=42,
                   dest="master_seed")
    p.add_argument("--evaluator", choices=("synthetic", "mlp"),
                   default="synthetic")
    p.add_argument("--dataset-csv", help="use this CSV dataset")
    p.add_argument("--dataset-synthetic", type=int, metavar="N",
                   help="use a generated activation dataset with N rows")
    p.add_argument("--gen-seed", type=int, default=0)
    p.add_argument("--virtual-n", type=int, default=100_000,
                   help="virtual dataset size for the synthetic evaluator")
    p.add_argument("--noise-scale", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=1024)
    p.add_argument("--learning-rate", type=float, default=0.001)
    p.add_argument("--max-epochs", type=int, default=100)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--layer-counts",
                   default=",".join(str(v) for v in DEFAULT_LAYER_COUNT_CHOICES))
    p.add_argument("--widths",
                   default=",".join(str(v) for v in DEFAULT_WIDTH_CHOICES))
    p.add_argument("--error-threshold", type=float,
                   default=DEFAULT_ERROR_THRESHOLD)
    p.add_argument("--timeout-seconds", type=float, default=3600.0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_init)

    p = sub.add_parser("gen-data", help="generate a synthetic activation CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--n-samples", type=int, required=True)
    p.add_argument("--gen-seed", "--seed", type=int, default=0,
                   dest="gen_seed")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("step1", help="run step-1 screening")
    p.add_argument("--spec", required=True)
    p.add_argument("--workdir", required=True)
    _add_worker_options(p)
    p.set_defaults(func=_cmd_step1)

    p = sub.add_parser("select", help="print the retrain selection")
    p.add_argument("--workdir", default=".")
    p.add_argument("--report", help="explicit report path")
    p.add_argument("--spec")
    p.add_argument("--p-retrain", type=float, default=None)
    p.add_argument("--final", action="store_true",
                   help="label final models from the step-2 report")
    p.add_argument("--best-k", type=int, default=1)
    p.add_argument("--lightest", action="store_true")
    p.add_argument("--heaviest", action="store_true")
    p.add_argument("--error-threshold", type=float,
                   default=DEFAULT_ERROR_THRESHOLD)
    p.set_defaults(func=_cmd_select)

    p = sub.add_parser("step2", help="retrain the selection on full data")
    p.add_argument("--spec", required=True)
    p.add_argument("--workdir", required=True)
    p.add_argument("--report", help="step-1 report path override")
    _add_worker_options(p)
    p.set_defaults(func=_cmd_step2)

    p = sub.add_parser("rank-groups", help="retrain contiguous rank groups")
    p.add_argument("--spec", required=True)
    p.add_argument("--workdir", required=True)
    p.add_argument("--report", help="step-1 report path override")
    p.add_argument("--starts", required=True,
                   help="comma-separated 1-based group starts, e.g. 1,1001")
    p.add_argument("--size", type=int, required=True)
    _add_worker_options(p)
    p.set_defaults(func=_cmd_rank_groups)

    p = sub.add_parser("analyze", help="write analysis tables and a summary")
    p.add_argument("--workdir", required=True)
    p.add_argument("--out", help="output directory (default: workdir)")
    p.add_argument("--k", type=int, default=50,
                   help="top-k width the convergence check must cover")
    p.add_argument("--window", type=int, default=50)
    p.add_argument("--tolerance", type=float, default=0.5)
    p.add_argument("--subsample-ms",
                   help="comma-separated draw sizes for subsample curves")
    p.add_argument("--subsample-seed", type=int, default=0)
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("manager", help="serve a step's queue to TCP workers")
    p.add_argument("--spec", required=True)
    p.add_argument("--workdir", required=True)
    p.add_argument("--step", type=int, choices=(1, 2), default=1)
    p.add_argument("--report", help="step-1 report path override (step 2)")
    _add_worker_options(p)
    p.set_defaults(func=_cmd_manager)

    p = sub.add_parser("worker", help="join a manager over TCP")
    p.add_argument("--connect", required=True, metavar="HOST:PORT")
    p.add_argument("--worker-id", default=f"worker-{os.getpid()}")
    p.add_argument("--evaluators", default="mlp,synthetic")
    p.add_argument("--heartbeat", type=float, default=10.0)
    p.add_argument("--eval-delay", type=float, default=0.0,
                   help="sleep this many seconds before each evaluation")
    p.set_defaults(func=_cmd_worker)

    p = sub.add_parser("eval-one", help="evaluate one trial in process")
    p.add_argument("--spec", required=True)
    p.add_argument("--trial-id", type=int, required=True)
    p.add_argument("--step", type=int, choices=(1, 2), default=1)
    p.add_argument("--workdir", help="needed for --step 2 (step-1 report)")
    p.add_argument("--report", help="step-1 report path override")
    p.set_defaults(func=_cmd_eval_one)

    p = sub.add_parser("cost", help="print analytic (and measured) cost ratios")
    p.add_argument("--p-subset", type=float, required=True)
    p.add_argument("--p-retrain", type=float, required=True)
    p.add_argument("--workdir", help="measure from this project's reports")
    p.add_argument("--reference-full-cost", type=float, default=None)
    p.add_argument("--c-sample", type=float, default=1.0)
    p.add_argument("--c-overhead", type=float, default=0.0)
    p.set_defaults(func=_cmd_cost)

    return parser


_MAPPED_ERRORS = (
    (SpaceError, "spec", EXIT_SPEC),
    (TrainerError, "execution", EXIT_EXEC),
    (DataError, "dataset", EXIT_DATA),
    (EvaluatorError, "dataset", EXIT_DATA),
    (LedgerError, "ledger", EXIT_LEDGER),
    (AnalysisError, "execution", EXIT_EXEC),
    (ProtocolError, "network", EXIT_NET),
    (ConnectionError, "network", EXIT_NET),
)


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("TWOSTEP_LOG", "WARNING").upper(),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return int(args.func(args) or 0)
    except CliError as exc:
        _print_error(exc.code_name, str(exc))
        return exc.exit_code
    except Exception as exc:
        for kind, code_name, exit_code in _MAPPED_ERRORS:
            if isinstance(exc, kind):
                _print_error(code_name, str(exc))
                return exit_code
        # RuntimeError covers manager failures (all workers lost, livelock)
        if isinstance(exc, RuntimeError):
            _print_error("execution", str(exc))
            return EXIT_EXEC
        log.exception("unhandled error")
        _print_error("internal", f"{type(exc).__name__}: {exc}")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
