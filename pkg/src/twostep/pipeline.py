"""Two-step search orchestration: cheap broad Step 1, full retrain Step 2.

Step 1 evaluates ``n_trials`` sampled architectures on a ``p_subset``
fraction of the data and ranks them by minimum validation MSE. The top
``round_half_up(p_retrain * n_trials)`` are then retrained on the full
data in Step 2. With a linear cost model the whole procedure costs a
``p_subset + p_retrain`` fraction of evaluating every trial on all data;
``p_subset=1, p_retrain=0`` degenerates to the classic one-step search.

Every assignment's seeds are derived up front from the project master
seed, keyed by step and trial index, so execution order, worker count, and
retries cannot change any result. Step 2 deliberately derives fresh seeds
(step label 2) instead of reusing Step-1 seeds: retraining is a new
stochastic experiment, not a replay.
"""
from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field
from typing import Sequence

from .evaluators import (
    dataset_n_samples,
    evaluate_assignment,
    resolve_dataset,
    terminal_result_fields,
)
from .runtime.ledger import (
    LedgerWriter,
    completed_record,
    failed_record,
    read_ledger,
    resume_remaining,
)
from .runtime.manager import run_queue
from .runtime.protocol import (
    EVALUATOR_KINDS,
    TrialAssignment,
    canonical_json,
)
from .space import MASK64, SearchSpace, TrialConfig, derive_seed, sample_config
from .trainer import TrainBudget

SPEC_SCHEMA = 1
REPORT_SCHEMA = 1

DEFAULT_ERROR_THRESHOLD = 1e-4
UNHEALTHY_FAILURE_FRACTION = 0.10


class PipelineError(ValueError):
    """Invalid project spec, selection, or report operation."""


def round_half_up(x: float) -> int:
    """Round to nearest integer, halves away from zero for positive x.

    The small epsilon absorbs float error in products like 0.005 * 10000
    (= 50.000000000000007) without changing any exact half case.
    """
    return int(math.floor(x + 0.5 + 1e-9))


@dataclass(frozen=True)
class ProjectSpec:
    """Everything that defines one search project; JSON-serializable."""

    project_id: str
    n_trials: int
    p_subset: float
    p_retrain: float
    dataset: dict
    train_fraction: float = 0.8
    master_seed: int = 42
    evaluator: str = "synthetic"
    budget: TrainBudget = field(default_factory=TrainBudget)
    space: SearchSpace = field(default_factory=SearchSpace)
    error_threshold: float = DEFAULT_ERROR_THRESHOLD
    timeout_seconds: float = 3600.0

    def __post_init__(self):
        if not self.project_id or not isinstance(self.project_id, str):
            raise PipelineError("project_id must be a non-empty string")
        if self.n_trials < 1:
            raise PipelineError("n_trials must be >= 1")
        if not 0 < self.p_subset <= 1:
            raise PipelineError("p_subset must be in (0, 1]")
        if not 0 <= self.p_retrain <= 1:
            raise PipelineError("p_retrain must be in [0, 1]")
        if not 0 < self.train_fraction < 1:
            raise PipelineError("train_fraction must be in (0, 1)")
        if not 0 <= self.master_seed <= MASK64:
            raise PipelineError("master_seed must be an unsigned 64-bit integer")
        if self.evaluator not in EVALUATOR_KINDS:
            raise PipelineError(f"unknown evaluator kind {self.evaluator!r}")
        if not isinstance(self.dataset, dict) or "kind" not in self.dataset:
            raise PipelineError("dataset must be a reference object with a 'kind'")
        if self.error_threshold <= 0:
            raise PipelineError("error_threshold must be positive")
        if self.timeout_seconds <= 0:
            raise PipelineError("timeout_seconds must be positive")

    @property
    def selection_size(self) -> int:
        """Step-2 trial count k; at least 1 whenever p_retrain > 0."""
        if self.p_retrain == 0:
            return 0
        return max(1, round_half_up(self.p_retrain * self.n_trials))

    def to_json(self) -> dict:
        return {
            "schema": SPEC_SCHEMA,
            "project_id": self.project_id,
            "n_trials": self.n_trials,
            "p_subset": self.p_subset,
            "p_retrain": self.p_retrain,
            "dataset": dict(self.dataset),
            "train_fraction": self.train_fraction,
            "master_seed": self.master_seed,
            "evaluator": self.evaluator,
            "budget": self.budget.to_json(),
            "space": self.space.to_json(),
            "error_threshold": self.error_threshold,
            "timeout_seconds": self.timeout_seconds,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ProjectSpec":
        if obj.get("schema") != SPEC_SCHEMA:
            raise PipelineError(
                f"unsupported project spec schema {obj.get('schema')!r}")
        try:
            return cls(
                project_id=obj["project_id"],
                n_trials=int(obj["n_trials"]),
                p_subset=float(obj["p_subset"]),
                p_retrain=float(obj["p_retrain"]),
                dataset=dict(obj["dataset"]),
                train_fraction=float(obj.get("train_fraction", 0.8)),
                master_seed=int(obj.get("master_seed", 42)),
                evaluator=str(obj.get("evaluator", "synthetic")),
                budget=TrainBudget.from_json(obj["budget"])
                if "budget" in obj else TrainBudget(),
                space=SearchSpace.from_json(obj["space"])
                if "space" in obj else SearchSpace(),
                error_threshold=float(
                    obj.get("error_threshold", DEFAULT_ERROR_THRESHOLD)),
                timeout_seconds=float(obj.get("timeout_seconds", 3600.0)),
            )
        except KeyError as exc:
            raise PipelineError(f"project spec missing field {exc}") from None


def save_project_spec(spec: ProjectSpec, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(spec.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_project_spec(path: str) -> ProjectSpec:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise PipelineError(f"cannot read project spec: {exc}") from None
    except json.JSONDecodeError as exc:
        raise PipelineError(f"{path} is not valid JSON: {exc}") from None
    return ProjectSpec.from_json(obj)


@dataclass(frozen=True)
class RankedTrial:
    """One completed trial as it appears in a ranked report."""

    trial_id: int
    hidden_widths: tuple[int, ...]
    config_id: int
    min_val_mse: float
    best_epoch: int
    epochs_run: int
    param_count: int
    cost_units: float
    stopped_early: bool

    @classmethod
    def from_record(cls, record: dict) -> "RankedTrial":
        assignment = record["assignment"]
        config = TrialConfig.from_json(assignment["config"])
        result = record["result"]
        return cls(
            trial_id=int(assignment["trial_id"]),
            hidden_widths=config.hidden_widths,
            config_id=config.config_id,
            min_val_mse=float(result["min_val_mse"]),
            best_epoch=int(result["best_epoch"]),
            epochs_run=int(result["epochs_run"]),
            param_count=int(result["param_count"]),
            cost_units=float(result["cost_units"]),
            stopped_early=bool(result["stopped_early"]),
        )

    def to_json(self) -> dict:
        return {
            "trial_id": self.trial_id,
            "hidden_widths": list(self.hidden_widths),
            "config_id": self.config_id,
            "min_val_mse": self.min_val_mse,
            "best_epoch": self.best_epoch,
            "epochs_run": self.epochs_run,
            "param_count": self.param_count,
            "cost_units": self.cost_units,
            "stopped_early": self.stopped_early,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RankedTrial":
        return cls(
            trial_id=int(obj["trial_id"]),
            hidden_widths=tuple(int(w) for w in obj["hidden_widths"]),
            config_id=int(obj["config_id"]),
            min_val_mse=float(obj["min_val_mse"]),
            best_epoch=int(obj["best_epoch"]),
            epochs_run=int(obj["epochs_run"]),
            param_count=int(obj["param_count"]),
            cost_units=float(obj["cost_units"]),
            stopped_early=bool(obj["stopped_early"]),
        )


@dataclass(frozen=True)
class StepReport:
    """Ranked outcome of one step: completed trials sorted by validation MSE
    ascending, ties broken by lower trial_id."""

    project_id: str
    step: int
    n_trials: int
    ranked: tuple[RankedTrial, ...]
    failed: tuple[tuple[int, str], ...]
    total_cost_units: float
    unhealthy: bool

    @property
    def completed_count(self) -> int:
        return len(self.ranked)

    @property
    def failed_count(self) -> int:
        return len(self.failed)

    def to_json(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "project_id": self.project_id,
            "step": self.step,
            "n_trials": self.n_trials,
            "ranked": [t.to_json() for t in self.ranked],
            "failed": [[tid, reason] for tid, reason in self.failed],
            "total_cost_units": self.total_cost_units,
            "completed_count": self.completed_count,
            "failed_count": self.failed_count,
            "unhealthy": self.unhealthy,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "StepReport":
        if obj.get("schema") != REPORT_SCHEMA:
            raise PipelineError(
                f"unsupported report schema {obj.get('schema')!r}")
        return cls(
            project_id=obj["project_id"],
            step=int(obj["step"]),
            n_trials=int(obj["n_trials"]),
            ranked=tuple(RankedTrial.from_json(t) for t in obj["ranked"]),
            failed=tuple((int(t), str(r)) for t, r in obj["failed"]),
            total_cost_units=float(obj["total_cost_units"]),
            unhealthy=bool(obj["unhealthy"]),
        )


def save_report(report: StepReport, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(report.to_json()) + "\n")


def load_report(path: str) -> StepReport:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return StepReport.from_json(json.load(fh))
    except OSError as exc:
        raise PipelineError(f"cannot read report: {exc}") from None
    except json.JSONDecodeError as exc:
        raise PipelineError(f"{path} is not valid JSON: {exc}") from None


def build_report(project_id: str, step: int, n_trials: int,
                 records: Sequence[dict]) -> StepReport:
    """Rank a ledger's completed records; failures are listed, not imputed."""
    completed = []
    failures = []
    for record in records:
        if record["status"] == "completed":
            completed.append(RankedTrial.from_record(record))
        elif record["status"] == "failed":
            failures.append((int(record["assignment"]["trial_id"]),
                             str(record["reason"])))
    completed.sort(key=lambda t: (t.min_val_mse, t.trial_id))
    failures.sort()
    total_cost = float(sum(t.cost_units for t in completed))
    unhealthy = len(failures) > UNHEALTHY_FAILURE_FRACTION * n_trials
    return StepReport(
        project_id=project_id,
        step=step,
        n_trials=n_trials,
        ranked=tuple(completed),
        failed=tuple(failures),
        total_cost_units=total_cost,
        unhealthy=unhealthy,
    )


# ---------------------------------------------------------------- assignments


def stamped_dataset_ref(ref: dict) -> dict:
    """Copy of a dataset reference carrying an explicit n_samples hint.

    Resolving a CSV's row count happens here, once, in the orchestrating
    process; workers and the manager's cost accounting then agree on n
    without re-reading files.
    """
    out = dict(ref)
    if "n_samples" not in out:
        out["n_samples"] = resolve_dataset(ref).n_samples
    else:
        dataset_n_samples(out)  # validate the hint
    return out


def step1_assignments(spec: ProjectSpec) -> list[TrialAssignment]:
    """The full Step-1 queue, all seeds fixed up front."""
    dataset = stamped_dataset_ref(spec.dataset)
    subset_seed = derive_seed(spec.master_seed, 1, 0, "subset")
    split_seed = derive_seed(spec.master_seed, 1, 0, "split")
    assignments = []
    for i in range(spec.n_trials):
        config = sample_config(
            spec.space, derive_seed(spec.master_seed, 1, i, "sample"))
        assignments.append(TrialAssignment(
            trial_id=i,
            step=1,
            config=config,
            dataset=dataset,
            p_subset=spec.p_subset,
            train_fraction=spec.train_fraction,
            subset_seed=subset_seed,
            split_seed=split_seed,
            train_seed=derive_seed(spec.master_seed, 1, i, "train"),
            budget=spec.budget,
            evaluator=spec.evaluator,
            timeout_seconds=spec.timeout_seconds,
        ))
    return assignments


def step2_assignments(spec: ProjectSpec, selected: Sequence[RankedTrial],
                      checkpoint_dir: str | None = None) -> list[TrialAssignment]:
    """Full-data retrain queue for the selected trials.

    Trial ids are kept from Step 1 (same architecture, new experiment);
    the step label 2 in every seed derivation makes all randomness fresh.
    """
    dataset = stamped_dataset_ref(spec.dataset)
    subset_seed = derive_seed(spec.master_seed, 2, 0, "subset")
    split_seed = derive_seed(spec.master_seed, 2, 0, "split")
    assignments = []
    for trial in selected:
        assignments.append(TrialAssignment(
            trial_id=trial.trial_id,
            step=2,
            config=TrialConfig(trial.hidden_widths),
            dataset=dataset,
            p_subset=1.0,
            train_fraction=spec.train_fraction,
            subset_seed=subset_seed,
            split_seed=split_seed,
            train_seed=derive_seed(spec.master_seed, 2, trial.trial_id, "train"),
            budget=spec.budget,
            evaluator=spec.evaluator,
            timeout_seconds=spec.timeout_seconds,
            checkpoint_dir=checkpoint_dir,
        ))
    return assignments


# ----------------------------------------------------------------- execution


def _execute(assignments: Sequence[TrialAssignment], ledger_path: str,
             run_options: dict) -> list[dict]:
    options = dict(run_options)
    if not any(options.get(k) for k in
               ("local_workers", "subprocess_workers", "bind")):
        options["local_workers"] = 1
    return run_queue(assignments, ledger_path, **options)


def run_step1(spec: ProjectSpec, workdir: str, **run_options) -> StepReport:
    """Execute Step 1 and write step1.jsonl plus step1_report.json.

    Resume-safe: trials already terminal in the ledger are not re-run.
    ``run_options`` go to the runtime (local_workers, subprocess_workers,
    bind, heartbeat_seconds, max_retries); default is one local worker.
    """
    os.makedirs(workdir, exist_ok=True)
    records = _execute(step1_assignments(spec),
                       os.path.join(workdir, "step1.jsonl"), run_options)
    report = build_report(spec.project_id, 1, spec.n_trials, records)
    save_report(report, os.path.join(workdir, "step1_report.json"))
    return report


def select_topk(report: StepReport, p_retrain: float) -> list[RankedTrial]:
    """Lowest-MSE completed trials; k = round_half_up(p_retrain * n_trials).

    Failed trials are never candidates. Having fewer completed trials than
    k is an error rather than a silent shorter list.
    """
    if not 0 <= p_retrain <= 1:
        raise PipelineError("p_retrain must be in [0, 1]")
    if p_retrain == 0:
        return []
    k = max(1, round_half_up(p_retrain * report.n_trials))
    if len(report.ranked) < k:
        raise PipelineError(
            f"need {k} completed trials to select from, "
            f"have {len(report.ranked)}")
    return list(report.ranked[:k])


def run_step2(spec: ProjectSpec, selected: Sequence[RankedTrial],
              workdir: str, **run_options) -> StepReport:
    """Retrain the selection on the full data; write step2 ledger and report.

    For the mlp evaluator the retrained weights are persisted under
    ``workdir/checkpoints/step2/trial_<id>.npz``.
    """
    if not selected:
        raise PipelineError("Step 2 needs a non-empty selection")
    os.makedirs(workdir, exist_ok=True)
    checkpoint_dir = None
    if spec.evaluator == "mlp":
        checkpoint_dir = os.path.join(workdir, "checkpoints", "step2")
    assignments = step2_assignments(spec, selected, checkpoint_dir)
    records = _execute(assignments, os.path.join(workdir, "step2.jsonl"),
                       run_options)
    report = build_report(spec.project_id, 2, len(assignments), records)
    save_report(report, os.path.join(workdir, "step2_report.json"))
    return report


def run_two_step(spec: ProjectSpec, workdir: str, **run_options,
                 ) -> tuple[StepReport, list[RankedTrial], StepReport | None]:
    """Step 1, selection, Step 2; returns all three stages' outcomes.

    With p_retrain=0 (the classic one-step special case) the selection is
    empty and no Step 2 runs; the third element is then None.
    """
    report1 = run_step1(spec, workdir, **run_options)
    selected = select_topk(report1, spec.p_retrain)
    if not selected:
        return report1, [], None
    report2 = run_step2(spec, selected, workdir, **run_options)
    return report1, selected, report2


def run_rank_groups(spec: ProjectSpec, step1_report: StepReport,
                    group_starts: Sequence[int], group_size: int,
                    workdir: str, **run_options) -> dict[int, StepReport]:
    """Retrain contiguous rank groups (1-based starts) on the full data.

    Each group gets its own ledger (rankgroup_<start>.jsonl) and report.
    Retrains use the same step-2 seed derivations as run_step2, so a group
    that equals the top-k selection reproduces its results exactly.
    """
    if group_size < 1:
        raise PipelineError("group_size must be >= 1")
    os.makedirs(workdir, exist_ok=True)
    reports: dict[int, StepReport] = {}
    for start in group_starts:
        if start < 1 or start - 1 + group_size > len(step1_report.ranked):
            raise PipelineError(
                f"rank group {start}..{start + group_size - 1} is outside "
                f"the {len(step1_report.ranked)} ranked trials")
        group = list(step1_report.ranked[start - 1:start - 1 + group_size])
        assignments = step2_assignments(spec, group)
        ledger_path = os.path.join(workdir, f"rankgroup_{start}.jsonl")
        records = _execute(assignments, ledger_path, run_options)
        report = build_report(spec.project_id, 2, len(assignments), records)
        save_report(report,
                    os.path.join(workdir, f"rankgroup_{start}_report.json"))
        reports[start] = report
    return reports


# ---------------------------------------------------------------- cost model


@dataclass(frozen=True)
class CostModel:
    """Abstract trial cost: c_sample per sample-epoch plus c_overhead per
    trial. Units are sample-epochs by default (c_sample=1, c_overhead=0)."""

    c_sample: float = 1.0
    c_overhead: float = 0.0

    def __post_init__(self):
        if self.c_sample < 0 or self.c_overhead < 0:
            raise PipelineError("cost coefficients must be non-negative")

    def trial_cost(self, cost_units: float) -> float:
        return self.c_sample * cost_units + self.c_overhead


def cost_ratio(p_subset: float, p_retrain: float) -> float:
    """Analytic cost of the two-step search relative to one full-data pass
    over all trials: p_subset + p_retrain, under linear cost scaling."""
    if not 0 <= p_subset <= 1 or not 0 <= p_retrain <= 1:
        raise PipelineError("cost ratio inputs must be in [0, 1]")
    return p_subset + p_retrain


def report_cost(report: StepReport, cost_model: CostModel = CostModel()) -> float:
    """Total cost of a report's completed trials under the cost model."""
    return float(sum(cost_model.trial_cost(t.cost_units) for t in report.ranked))


def measured_cost_ratio(step1_report: StepReport, step2_report: StepReport | None,
                        reference_full_cost: float,
                        cost_model: CostModel = CostModel()) -> float:
    """Actually-spent cost divided by the full-data-everywhere reference.

    The reference is n_trials times the mean full-data trial cost under the
    same cost model. With zero overhead and exactly representable subset
    arithmetic this equals cost_ratio(p_subset, p_retrain); per-trial
    overhead makes it exceed the analytic value, most visibly at tiny
    p_subset where overhead dominates the shrunken compute.
    """
    if reference_full_cost <= 0:
        raise PipelineError("reference cost must be positive")
    total = report_cost(step1_report, cost_model)
    if step2_report is not None:
        total += report_cost(step2_report, cost_model)
    return total / reference_full_cost


# ------------------------------------------------------------ final selection


def final_select(step2_report: StepReport, *, best_k: int = 1,
                 lightest: bool = False, heaviest: bool = False,
                 threshold: float = DEFAULT_ERROR_THRESHOLD,
                 ) -> list[tuple[str, RankedTrial]]:
    """Pick deliverable models from a Step-2 report.

    Trials with MSE above ``threshold`` are treated as erroneous and
    dropped first. The survivors yield up to best_k rank leaders plus,
    optionally, the lightest and heaviest by parameter count (MSE then
    trial_id breaking ties). Labels mark why each trial was chosen; a
    trial picked for several reasons keeps its first label.
    """
    passing = [t for t in step2_report.ranked if t.min_val_mse <= threshold]
    if not passing:
        raise PipelineError(
            f"no trial at or below the {threshold:g} error threshold")
    chosen: list[tuple[str, RankedTrial]] = []
    seen: set[int] = set()

    def add(label: str, trial: RankedTrial) -> None:
        if trial.trial_id not in seen:
            seen.add(trial.trial_id)
            chosen.append((label, trial))

    for i, trial in enumerate(passing[:max(0, best_k)], start=1):
        add(f"best-{i}", trial)
    if lightest:
        add("lightest", min(passing, key=lambda t: (t.param_count,
                                                    t.min_val_mse,
                                                    t.trial_id)))
    if heaviest:
        add("heaviest", max(passing, key=lambda t: (t.param_count,
                                                    -t.min_val_mse,
                                                    -t.trial_id)))
    return chosen


# ------------------------------------------------------- sequential reference


def one_step_search(spec: ProjectSpec, workdir: str,
                    ledger_name: str = "one_step.jsonl") -> StepReport:
    """Classic single-step random search, evaluated sequentially in-process.

    A deliberately independent execution path from the manager runtime: it
    walks the same Step-1 assignment list one by one and writes the same
    record shapes. A two-step spec with p_subset=1 and p_retrain=0 run on
    the runtime must produce ledger content identical to this, which pins
    the orchestration layers against each other.
    """
    os.makedirs(workdir, exist_ok=True)
    assignments = step1_assignments(spec)
    ledger_path = os.path.join(workdir, ledger_name)
    records = read_ledger(ledger_path)
    remaining = resume_remaining(assignments, records)
    with LedgerWriter(ledger_path) as writer:
        for assignment in remaining:
            started = time.monotonic()
            try:
                result = evaluate_assignment(assignment)
            except Exception as exc:
                record = failed_record(
                    assignment, f"{type(exc).__name__}: {exc}",
                    worker_id="sequential", attempt=1,
                    wall_seconds=time.monotonic() - started)
            else:
                wall = time.monotonic() - started
                if result.failed:
                    record = failed_record(
                        assignment, result.failure_reason or "training failed",
                        worker_id="sequential", attempt=1, wall_seconds=wall)
                else:
                    record = completed_record(
                        assignment,
                        terminal_result_fields(
                            assignment, result.min_val_mse, result.best_epoch,
                            result.epochs_run, result.param_count),
                        worker_id="sequential", attempt=1, wall_seconds=wall)
            writer.append(record)
            records.append(record)
    report = build_report(spec.project_id, 1, spec.n_trials, records)
    save_report(report, os.path.join(
        workdir, ledger_name.replace(".jsonl", "_report.json")))
    return report
