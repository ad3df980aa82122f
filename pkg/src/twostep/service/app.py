"""FastAPI application wrapping the pipeline.

Layout under the service root:

    root/
      datasets/<name>.csv            generated activation datasets
      projects/<id>/project.json     stored project spec
      projects/<id>/run/             workdir (ledgers, reports, checkpoints)

One job runs per project at a time; jobs execute on daemon threads and are
polled via /jobs. Everything the job writes lands in the project workdir,
so crash recovery is the pipeline's resume path, not service state.
"""

from __future__ import annotations

import itertools
import json
import os
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Literal, Optional

from fastapi import FastAPI, HTTPException, Request, Response
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from ..analysis import AnalysisError, analyze_workdir
from ..data import DataError, generate_synthetic_activation, manifest_path_for, write_csv
from ..evaluators import (
    EvaluatorError,
    dataset_n_samples,
    evaluate_assignment,
    resolve_dataset,
    terminal_result_fields,
)
from ..pipeline import (
    DEFAULT_ERROR_THRESHOLD,
    CostModel,
    PipelineError,
    ProjectSpec,
    StepReport,
    cost_ratio,
    load_project_spec,
    load_report,
    measured_cost_ratio,
    run_rank_groups,
    run_step1,
    run_step2,
    run_two_step,
    save_project_spec,
    select_topk,
    step1_assignments,
    step2_assignments,
)
from ..space import DEFAULT_LAYER_COUNT_CHOICES, DEFAULT_WIDTH_CHOICES, SearchSpace, SpaceError
from ..trainer import TrainBudget, TrainerError

# Names become path components under the root; no separators, no dot-runs.
SAFE_NAME = r"^[A-Za-z0-9][A-Za-z0-9._-]{0,63}$"

JobKind = Literal["step1", "step2", "two_step", "rank_groups"]
JobState = Literal["running", "done", "failed"]


class BudgetModel(BaseModel):
    batch_size: int = Field(default=1024, ge=1)
    learning_rate: float = Field(default=0.001, gt=0)
    max_epochs: int = Field(default=100, ge=1)
    patience: int = Field(default=5, ge=1)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-7

    def to_budget(self) -> TrainBudget:
        return TrainBudget(**self.model_dump())


class SpaceModel(BaseModel):
    layer_count_choices: list[int] = Field(
        default_factory=lambda: list(DEFAULT_LAYER_COUNT_CHOICES))
    width_choices: list[int] = Field(
        default_factory=lambda: list(DEFAULT_WIDTH_CHOICES))

    def to_space(self) -> SearchSpace:
        return SearchSpace(tuple(self.layer_count_choices),
                           tuple(self.width_choices))


class ProjectSpecModel(BaseModel):
    """Request body mirroring the project spec file, field for field."""

    project_id: str = Field(pattern=SAFE_NAME)
    n_trials: int = Field(ge=1)
    p_subset: float
    p_retrain: float
    dataset: dict
    train_fraction: float = 0.8
    master_seed: int = 42
    evaluator: Literal["synthetic", "mlp"] = "synthetic"
    budget: BudgetModel = Field(default_factory=BudgetModel)
    space: SpaceModel = Field(default_factory=SpaceModel)
    error_threshold: float = DEFAULT_ERROR_THRESHOLD
    timeout_seconds: float = 3600.0

    def to_spec(self) -> ProjectSpec:
        # Range rules live in one place (the core constructor); domain
        # violations surface as PipelineError and map to 422 below.
        return ProjectSpec(
            project_id=self.project_id,
            n_trials=self.n_trials,
            p_subset=self.p_subset,
            p_retrain=self.p_retrain,
            dataset=dict(self.dataset),
            train_fraction=self.train_fraction,
            master_seed=self.master_seed,
            evaluator=self.evaluator,
            budget=self.budget.to_budget(),
            space=self.space.to_space(),
            error_threshold=self.error_threshold,
            timeout_seconds=self.timeout_seconds,
        )


class CostRequest(BaseModel):
    p_subset: float
    p_retrain: float
    project: Optional[str] = Field(default=None, pattern=SAFE_NAME)
    reference_full_cost: Optional[float] = Field(default=None, gt=0)
    c_sample: float = Field(default=1.0, ge=0)
    c_overhead: float = Field(default=0.0, ge=0)


class DatasetRequest(BaseModel):
    name: str = Field(pattern=SAFE_NAME)
    n_samples: int = Field(ge=10)
    gen_seed: int = 0


class JobRequest(BaseModel):
    kind: JobKind
    local_workers: int = Field(default=0, ge=0)
    subprocess_workers: int = Field(default=0, ge=0)
    heartbeat_seconds: float = Field(default=10.0, gt=0)
    max_retries: int = Field(default=3, ge=0)
    eval_delay: float = Field(default=0.0, ge=0)
    starts: Optional[list[int]] = None
    size: Optional[int] = Field(default=None, ge=1)

    def run_options(self) -> dict:
        return {
            "local_workers": self.local_workers,
            "subprocess_workers": self.subprocess_workers,
            "heartbeat_seconds": self.heartbeat_seconds,
            "max_retries": self.max_retries,
            "eval_delay": self.eval_delay,
        }


class AnalysisRequest(BaseModel):
    k: int = Field(default=50, ge=1)
    window: int = Field(default=50, ge=1)
    tolerance: float = Field(default=0.5, gt=0)
    subsample_ms: Optional[list[int]] = None
    subsample_seed: int = 0


class EvalRequest(BaseModel):
    project: str = Field(pattern=SAFE_NAME)
    trial_id: int = Field(ge=0)
    step: Literal[1, 2] = 1


class JobModel(BaseModel):
    job_id: str
    project: str
    kind: JobKind
    state: JobState
    error: Optional[str] = None
    summary: Optional[dict] = None
    created_at: float
    finished_at: Optional[float] = None


@dataclass
class _Job:
    job_id: str
    project: str
    kind: str
    state: str = "running"
    error: str | None = None
    summary: dict | None = None
    created_at: float = field(default_factory=time.time)
    finished_at: float | None = None

    def to_model(self) -> JobModel:
        return JobModel(job_id=self.job_id, project=self.project,
                        kind=self.kind, state=self.state, error=self.error,
                        summary=self.summary, created_at=self.created_at,
                        finished_at=self.finished_at)


class JobRegistry:
    """Thread-backed jobs, at most one running per project.

    The per-project exclusivity enforces the pipeline's sequential model:
    concurrent writers to one workdir's ledgers are never created.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._jobs: dict[str, _Job] = {}
        self._busy: set[str] = set()
        self._ids = itertools.count(1)

    def start(self, project: str, kind: str, work) -> _Job:
        with self._lock:
            if project in self._busy:
                raise HTTPException(
                    status_code=409,
                    detail=f"project {project!r} already has a running job")
            job = _Job(job_id=f"job-{next(self._ids)}", project=project,
                       kind=kind)
            self._jobs[job.job_id] = job
            self._busy.add(project)

        def runner():
            try:
                summary = work()
            except Exception as exc:  # terminal job state, not a crash
                with self._lock:
                    job.state = "failed"
                    job.error = f"{type(exc).__name__}: {exc}"
                    job.finished_at = time.time()
                    self._busy.discard(project)
                return
            with self._lock:
                job.state = "done"
                job.summary = summary
                job.finished_at = time.time()
                self._busy.discard(project)

        threading.Thread(target=runner, daemon=True,
                         name=f"twostep-{job.job_id}").start()
        return job

    def get(self, job_id: str) -> _Job | None:
        with self._lock:
            return self._jobs.get(job_id)

    def all(self) -> list[_Job]:
        with self._lock:
            return sorted(self._jobs.values(), key=lambda j: j.created_at)

    def running_kind(self, project: str) -> str | None:
        with self._lock:
            for job in self._jobs.values():
                if job.project == project and job.state == "running":
                    return job.kind
        return None


def _job_writes(kind: str, report_name: str) -> bool:
    """Whether a running job of ``kind`` may be writing this report file.

    Report writes are not atomic, so reads of a file the running job
    produces are refused rather than risk serving a torn JSON document.
    """
    if kind == "step1":
        return report_name == "step1"
    if kind == "step2":
        return report_name == "step2"
    if kind == "two_step":
        return report_name in ("step1", "step2")
    return report_name.startswith("rankgroup_")


def _step_summary(report: StepReport, workdir: str, ledger_name: str,
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


def create_app(root: str | os.PathLike) -> FastAPI:
    """Build the service bound to ``root`` (created if missing)."""
    root = os.path.abspath(os.fspath(root))
    os.makedirs(os.path.join(root, "datasets"), exist_ok=True)
    os.makedirs(os.path.join(root, "projects"), exist_ok=True)

    app = FastAPI(title="twostep", version="1.0.0")
    jobs = JobRegistry()
    # Serializes spec-file writes; job exclusivity is JobRegistry's.
    write_lock = threading.Lock()

    def project_dir(project: str) -> str:
        return os.path.join(root, "projects", project)

    def spec_path(project: str) -> str:
        return os.path.join(project_dir(project), "project.json")

    def workdir(project: str) -> str:
        return os.path.join(project_dir(project), "run")

    def load_spec_or_404(project: str) -> ProjectSpec:
        path = spec_path(project)
        if not os.path.exists(path):
            raise HTTPException(status_code=404,
                                detail=f"unknown project {project!r}")
        spec = load_project_spec(path)
        dataset = dict(spec.dataset)
        if dataset.get("kind") == "csv" and not os.path.isabs(dataset["path"]):
            # Stored specs keep relative paths portable; resolve only for use.
            dataset["path"] = os.path.join(root, dataset["path"])
            spec = ProjectSpec.from_json({**spec.to_json(), "dataset": dataset})
        return spec

    def preflight(spec: ProjectSpec) -> None:
        if spec.evaluator == "mlp":
            resolve_dataset(spec.dataset)
        else:
            dataset_n_samples(spec.dataset)

    def guard_report_read(project: str, name: str) -> None:
        kind = jobs.running_kind(project)
        if kind and _job_writes(kind, name):
            raise HTTPException(
                status_code=409,
                detail=f"a {kind} job is writing reports for {project!r}; "
                       "poll /jobs until it finishes")

    def report_or_404(project: str, name: str) -> StepReport:
        guard_report_read(project, name)
        path = os.path.join(workdir(project), f"{name}_report.json")
        if not os.path.exists(path):
            raise HTTPException(status_code=404,
                                detail=f"no {name} report for {project!r}")
        return load_report(path)

    @app.exception_handler(PipelineError)
    @app.exception_handler(SpaceError)
    @app.exception_handler(TrainerError)
    @app.exception_handler(DataError)
    @app.exception_handler(EvaluatorError)
    @app.exception_handler(AnalysisError)
    async def domain_error(request: Request, exc: Exception) -> JSONResponse:
        return JSONResponse(status_code=422, content={"detail": str(exc)})

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "root": root}

    @app.post("/cost")
    def cost(req: CostRequest) -> dict:
        analytic = cost_ratio(req.p_subset, req.p_retrain)
        measured = None
        if req.project is not None:
            if req.reference_full_cost is None:
                raise HTTPException(
                    status_code=422,
                    detail="measured cost needs reference_full_cost")
            step1 = report_or_404(req.project, "step1")
            step2_file = os.path.join(workdir(req.project), "step2_report.json")
            step2 = load_report(step2_file) if os.path.exists(step2_file) else None
            model = CostModel(c_sample=req.c_sample, c_overhead=req.c_overhead)
            measured = measured_cost_ratio(step1, step2,
                                           req.reference_full_cost, model)
        return {"analytic": analytic, "measured": measured}

    @app.post("/datasets", status_code=201)
    def create_dataset(req: DatasetRequest, response: Response) -> dict:
        handle = generate_synthetic_activation(req.n_samples, req.gen_seed)
        out = os.path.join(root, "datasets", f"{req.name}.csv")
        fields = {"csv": out, "manifest": manifest_path_for(out),
                  "n_samples": handle.n_samples, "n_inputs": handle.n_inputs,
                  "n_outputs": handle.n_outputs}
        tmp = out + ".tmp"
        with write_lock:
            write_csv(handle, tmp)
            try:
                if os.path.exists(out):
                    with open(out, "rb") as old, open(tmp, "rb") as new:
                        if old.read() == new.read():
                            response.status_code = 200
                            return {**fields, "created": False}
                    raise HTTPException(
                        status_code=409,
                        detail=f"dataset {req.name!r} exists with different content")
                os.replace(tmp, out)
                os.replace(manifest_path_for(tmp), manifest_path_for(out))
            finally:
                for leftover in (tmp, manifest_path_for(tmp)):
                    if os.path.exists(leftover):
                        os.remove(leftover)
        return {**fields, "created": True}

    @app.post("/projects", status_code=201)
    def create_project(body: ProjectSpecModel, response: Response) -> dict:
        spec = body.to_spec()
        path = spec_path(spec.project_id)
        with write_lock:
            os.makedirs(project_dir(spec.project_id), exist_ok=True)
            tmp = path + ".tmp"
            save_project_spec(spec, tmp)
            try:
                if os.path.exists(path):
                    with open(path, "rb") as old, open(tmp, "rb") as new:
                        same = old.read() == new.read()
                    if not same:
                        raise HTTPException(
                            status_code=409,
                            detail=f"project {spec.project_id!r} exists "
                                   "with a different spec")
                    response.status_code = 200
                    return {"project": spec.project_id, "spec": path,
                            "created": False}
                os.replace(tmp, path)
            finally:
                if os.path.exists(tmp):
                    os.remove(tmp)
        return {"project": spec.project_id, "spec": path, "created": True}

    @app.get("/projects")
    def list_projects() -> dict:
        base = os.path.join(root, "projects")
        ids = sorted(d for d in os.listdir(base)
                     if os.path.exists(spec_path(d)))
        return {"projects": ids}

    @app.get("/projects/{project}")
    def get_project(project: str) -> dict:
        path = spec_path(project)
        if not os.path.exists(path):
            raise HTTPException(status_code=404,
                                detail=f"unknown project {project!r}")
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)

    @app.post("/projects/{project}/jobs", status_code=202)
    def submit_job(project: str, req: JobRequest) -> JobModel:
        spec = load_spec_or_404(project)
        preflight(spec)
        wd = workdir(project)
        options = req.run_options()

        if req.kind == "rank_groups":
            if not req.starts or req.size is None:
                raise HTTPException(
                    status_code=422,
                    detail="rank_groups needs starts and size")
            step1 = report_or_404(project, "step1")
            starts, size = list(req.starts), req.size

            def work_groups() -> dict:
                grouped = run_rank_groups(spec, step1, starts, size, wd,
                                          **options)
                return {
                    "groups": {
                        str(start): {
                            "report": os.path.join(
                                wd, f"rankgroup_{start}_report.json"),
                            "completed": rep.completed_count,
                            "failed": rep.failed_count,
                        } for start, rep in grouped.items()},
                    "size": size,
                }

            return jobs.start(project, req.kind, work_groups).to_model()

        if req.kind == "step2":
            # Selection happens before the thread starts so a missing or
            # short step-1 report fails the request, not the job.
            selected = select_topk(report_or_404(project, "step1"),
                                   spec.p_retrain)

            def work_step2() -> dict:
                report = run_step2(spec, selected, wd, **options)
                summary = _step_summary(report, wd, "step2.jsonl",
                                        "step2_report.json")
                summary["selected"] = [t.trial_id for t in selected]
                return summary

            return jobs.start(project, req.kind, work_step2).to_model()

        if req.kind == "step1":
            def work_step1() -> dict:
                report = run_step1(spec, wd, **options)
                return _step_summary(report, wd, "step1.jsonl",
                                     "step1_report.json")

            return jobs.start(project, req.kind, work_step1).to_model()

        def work_two_step() -> dict:
            report1, selected, report2 = run_two_step(spec, wd, **options)
            return {
                "step1": _step_summary(report1, wd, "step1.jsonl",
                                       "step1_report.json"),
                "selected": [t.trial_id for t in selected],
                "step2": None if report2 is None else _step_summary(
                    report2, wd, "step2.jsonl", "step2_report.json"),
            }

        return jobs.start(project, req.kind, work_two_step).to_model()

    @app.get("/jobs")
    def list_jobs() -> dict:
        return {"jobs": [j.to_model().model_dump() for j in jobs.all()]}

    @app.get("/jobs/{job_id}")
    def get_job(job_id: str) -> JobModel:
        job = jobs.get(job_id)
        if job is None:
            raise HTTPException(status_code=404,
                                detail=f"unknown job {job_id!r}")
        return job.to_model()

    @app.get("/projects/{project}/reports/{name}")
    def get_report(project: str, name: str) -> dict:
        if not os.path.exists(spec_path(project)):
            raise HTTPException(status_code=404,
                                detail=f"unknown project {project!r}")
        if not re.fullmatch(r"step1|step2|rankgroup_\d+", name):
            raise HTTPException(status_code=404,
                                detail=f"unknown report name {name!r}")
        guard_report_read(project, name)
        path = os.path.join(workdir(project), f"{name}_report.json")
        if not os.path.exists(path):
            raise HTTPException(status_code=404,
                                detail=f"no {name} report for {project!r}")
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)

    @app.post("/projects/{project}/analyses")
    def run_analysis(project: str, req: AnalysisRequest) -> dict:
        if not os.path.exists(spec_path(project)):
            raise HTTPException(status_code=404,
                                detail=f"unknown project {project!r}")
        kind = jobs.running_kind(project)
        if kind:  # analysis reads every report the workdir holds
            raise HTTPException(
                status_code=409,
                detail=f"a {kind} job is running for {project!r}; "
                       "poll /jobs until it finishes")
        try:
            return analyze_workdir(
                workdir(project), k=req.k, window=req.window,
                tolerance=req.tolerance, subsample_ms=req.subsample_ms,
                subsample_seed=req.subsample_seed)
        except FileNotFoundError as exc:
            raise HTTPException(status_code=404, detail=str(exc))

    @app.post("/eval")
    def eval_one(req: EvalRequest) -> dict:
        spec = load_spec_or_404(req.project)
        preflight(spec)
        if req.step == 1:
            assignments = step1_assignments(spec)
        else:
            selected = select_topk(report_or_404(req.project, "step1"),
                                   spec.p_retrain)
            assignments = step2_assignments(spec, selected)
        matches = [a for a in assignments if a.trial_id == req.trial_id]
        if not matches:
            raise HTTPException(
                status_code=404,
                detail=f"trial {req.trial_id} is not in the "
                       f"step-{req.step} queue")
        assignment = matches[0]
        result = evaluate_assignment(assignment)
        if result.failed:
            raise HTTPException(status_code=422,
                                detail=f"trial failed: {result.failure_reason}")
        return {
            "trial_id": assignment.trial_id,
            "step": assignment.step,
            "config": assignment.config.to_json(),
            "result": terminal_result_fields(
                assignment, result.min_val_mse, result.best_epoch,
                result.epochs_run, result.param_count),
        }

    return app
