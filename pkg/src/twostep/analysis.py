"""Plot-ready diagnostics computed from run ledgers and reports.

Every function here is a pure projection of completed-trial records: the
same input always yields the same table, and nothing mutates its argument.
Results come back as small dataclasses plus ``*_table`` helpers that flatten
them into (header, rows) pairs for CSV or JSON-lines output.
"""

from __future__ import annotations

import csv
import glob
import json
import os
import re
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from typing import Union

import numpy as np

from .pipeline import RankedTrial, StepReport, load_report
from .runtime.ledger import read_ledger
from .space import TrialConfig, derive_seed, param_count, permutation_array
from .trainer import MlpModel, forward, mse_loss

# Per-unit activation costs for the FLOP proxy. A linear layer is charged
# 2*d_in*d_out: one multiply per weight plus one add, which exactly covers
# the (d_in - 1) accumulation adds and the bias add per output unit.
RELU_FLOPS_PER_UNIT = 1
SIGMOID_FLOPS_PER_UNIT = 4

DEFAULT_WINDOW = 50
DEFAULT_TOLERANCE = 0.5


class AnalysisError(ValueError):
    """Raised when a diagnostic is asked of data that cannot support it."""


# A trial source is a ledger path, a list of ledger records, or a report.
TrialSource = Union[str, os.PathLike, StepReport, Sequence[dict]]


def _completed_trials(source: TrialSource) -> list[RankedTrial]:
    if isinstance(source, StepReport):
        return list(source.ranked)
    if isinstance(source, (str, os.PathLike)):
        records: Sequence[dict] = read_ledger(os.fspath(source))
    else:
        records = list(source)
    return [RankedTrial.from_record(r) for r in records
            if r.get("status") == "completed"]


def _rank_order(trials: Iterable[RankedTrial]) -> list[RankedTrial]:
    return sorted(trials, key=lambda t: (t.min_val_mse, t.trial_id))


@dataclass(frozen=True)
class RankCurve:
    """Completed trials sorted by minimum validation MSE, ranks from 1."""

    project: str
    points: tuple[tuple[int, float], ...]

    def __post_init__(self):
        ranks = [r for r, _ in self.points]
        if ranks != list(range(1, len(self.points) + 1)):
            raise AnalysisError("ranks must run 1..n without gaps")
        mses = [m for _, m in self.points]
        if any(b < a for a, b in zip(mses, mses[1:])):
            raise AnalysisError("rank curve MSES must be non-decreasing")

    def __len__(self) -> int:
        return len(self.points)

    def mses(self) -> tuple[float, ...]:
        return tuple(m for _, m in self.points)

    def to_json(self) -> dict:
        return {"project": self.project,
                "points": [[r, m] for r, m in self.points]}

    @classmethod
    def from_json(cls, obj: dict) -> "RankCurve":
        points = tuple((int(r), float(m)) for r, m in obj["points"])
        return cls(project=str(obj["project"]), points=points)


def rank_curve(source: TrialSource, project: str | None = None) -> RankCurve:
    """Sort a project's completed trials by validation MSE.

    ``source`` may be a ledger path, ledger records, or a step report; ties
    break on lower trial id so the curve is deterministic. The label defaults
    to the report's project id when one is available.
    """
    trials = _rank_order(_completed_trials(source))
    if not trials:
        raise AnalysisError("no completed trials to rank")
    if project is None:
        project = source.project_id if isinstance(source, StepReport) else ""
    points = tuple((i + 1, t.min_val_mse) for i, t in enumerate(trials))
    return RankCurve(project=project, points=points)


@dataclass(frozen=True)
class ScatterPoint:
    """One retrained trial: subset-data MSE against full-data MSE."""

    trial_id: int
    step1_mse: float
    step2_mse: float

    def to_json(self) -> dict:
        return {"trial_id": self.trial_id, "step1_mse": self.step1_mse,
                "step2_mse": self.step2_mse}


def step_scatter(step1_report: StepReport,
                 step2_report: StepReport) -> tuple[ScatterPoint, ...]:
    """Pair each retrained trial's step-2 MSE with its step-1 MSE.

    Every completed step-2 trial must exist in step 1; one row per retrained
    trial, ordered by trial id.
    """
    step1_mse = {t.trial_id: t.min_val_mse for t in step1_report.ranked}
    points = []
    for trial in sorted(step2_report.ranked, key=lambda t: t.trial_id):
        if trial.trial_id not in step1_mse:
            raise AnalysisError(
                f"trial {trial.trial_id} was retrained but never completed step 1")
        points.append(ScatterPoint(trial.trial_id,
                                   step1_mse[trial.trial_id],
                                   trial.min_val_mse))
    if not points:
        raise AnalysisError("no retrained trials to pair")
    return tuple(points)


@dataclass(frozen=True)
class ComplexityRow:
    """Architecture size next to achieved MSE for one completed trial."""

    project: str
    trial_id: int
    depth: int
    params: int
    mse: float

    def to_json(self) -> dict:
        return {"project": self.project, "trial_id": self.trial_id,
                "depth": self.depth, "params": self.params, "mse": self.mse}


def complexity_maps(reports: Union[StepReport, Iterable[StepReport]],
                    ) -> tuple[ComplexityRow, ...]:
    """Project completed trials onto (depth, params, mse) rows per project."""
    if isinstance(reports, StepReport):
        reports = [reports]
    rows = []
    for report in reports:
        for trial in sorted(report.ranked, key=lambda t: t.trial_id):
            rows.append(ComplexityRow(
                project=report.project_id,
                trial_id=trial.trial_id,
                depth=len(trial.hidden_widths),
                params=trial.param_count,
                mse=trial.min_val_mse,
            ))
    return tuple(rows)


@dataclass(frozen=True)
class BoxStats:
    """Five-number box summary with 1.5*IQR whiskers.

    Quartiles use linear interpolation between order statistics (the common
    plotting default); whiskers sit on the most extreme data points still
    within 1.5*IQR of the box, and everything beyond them is an outlier.
    """

    n: int
    median: float
    q1: float
    q3: float
    whisker_low: float
    whisker_high: float
    outliers: tuple[float, ...]

    def __post_init__(self):
        if not (self.q1 <= self.median <= self.q3):
            raise AnalysisError("box quartiles out of order")
        # interpolated quartiles can fall outside the in-fence data range
        # when a tiny group holds a far outlier, so whiskers are only
        # required to be ordered, not to bracket the box
        if self.whisker_low > self.whisker_high:
            raise AnalysisError("whiskers out of order")

    def to_json(self) -> dict:
        return {"n": self.n, "median": self.median, "q1": self.q1,
                "q3": self.q3, "whisker_low": self.whisker_low,
                "whisker_high": self.whisker_high,
                "outliers": list(self.outliers)}


def box_stats(values: Sequence[float]) -> BoxStats:
    """Summarize values as a box plot would draw them."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise AnalysisError("cannot summarize an empty group")
    if not np.all(np.isfinite(arr)):
        raise AnalysisError("box stats need finite values")
    q1, median, q3 = (float(q) for q in np.quantile(arr, [0.25, 0.5, 0.75]))
    iqr = q3 - q1
    low_fence = q1 - 1.5 * iqr
    high_fence = q3 + 1.5 * iqr
    inside = arr[(arr >= low_fence) & (arr <= high_fence)]
    # the box itself always lies inside the fences, so `inside` is non-empty
    outliers = arr[(arr < low_fence) | (arr > high_fence)]
    return BoxStats(
        n=int(arr.size),
        median=median,
        q1=q1,
        q3=q3,
        whisker_low=float(inside.min()),
        whisker_high=float(inside.max()),
        outliers=tuple(sorted(float(v) for v in outliers)),
    )


def rank_group_boxes(grouped_reports: Mapping[int, StepReport],
                     ) -> dict[int, BoxStats]:
    """Box-summarize retrained MSEs for each rank group, keyed by group start."""
    if not grouped_reports:
        raise AnalysisError("no rank groups to summarize")
    boxes: dict[int, BoxStats] = {}
    for start in sorted(grouped_reports):
        report = grouped_reports[start]
        mses = [t.min_val_mse for t in report.ranked]
        if not mses:
            raise AnalysisError(f"rank group {start} has no completed trials")
        boxes[start] = box_stats(mses)
    return boxes


def subsample_rank_curves(source: TrialSource, m_values: Sequence[int],
                          seed: int, project: str | None = None,
                          ) -> dict[int, RankCurve]:
    """Rank curves of m trials drawn without replacement, per requested m.

    One permutation (keyed off ``seed``) is drawn over the trials ordered by
    trial id, and each m takes its prefix, so the draws are nested: every
    smaller sample is a subset of every larger one, and m equal to the trial
    count reproduces the full curve exactly.
    """
    trials = sorted(_completed_trials(source), key=lambda t: t.trial_id)
    n = len(trials)
    if n == 0:
        raise AnalysisError("no completed trials to subsample")
    if project is None:
        project = source.project_id if isinstance(source, StepReport) else ""
    order = permutation_array(n, derive_seed(seed, 0, 0, "subsample"))
    curves: dict[int, RankCurve] = {}
    for m in m_values:
        m = int(m)
        if not 1 <= m <= n:
            raise AnalysisError(f"subsample size {m} outside 1..{n}")
        chosen = _rank_order(trials[i] for i in order[:m])
        points = tuple((i + 1, t.min_val_mse) for i, t in enumerate(chosen))
        curves[m] = RankCurve(project=project, points=points)
    return curves


def _relative_change(prev: float, cur: float) -> float:
    if prev == 0.0:
        return 0.0 if cur == 0.0 else float("inf")
    return abs(cur - prev) / abs(prev)


def convergence_diagnostic(curve: RankCurve, k: int,
                           window: int = DEFAULT_WINDOW,
                           tolerance: float = DEFAULT_TOLERANCE) -> dict:
    """Decide whether a rank curve has flattened enough to trust its top k.

    The curve is cut into consecutive full windows of ``window`` ranks and
    each window reduced to its median MSE. The plateau starts at the first
    window from which every later consecutive pair of medians changes by
    less than ``tolerance`` relative to the earlier one; a plateau must span
    at least two windows. Converged means such a plateau exists and covers
    at least ``k`` ranks. ``plateau_start`` is the plateau's first rank, or
    None when no plateau exists.
    """
    mses = curve.mses()
    n = len(mses)
    if window < 1:
        raise AnalysisError("window must be at least 1")
    if window > n:
        raise AnalysisError(f"window {window} exceeds curve length {n}")
    if not 1 <= k <= n:
        raise AnalysisError(f"k {k} outside curve length {n}")
    if tolerance <= 0:
        raise AnalysisError("tolerance must be positive")

    n_windows = n // window
    medians = [float(np.median(mses[j * window:(j + 1) * window]))
               for j in range(n_windows)]
    last_break = -1
    for j in range(n_windows - 1):
        if _relative_change(medians[j], medians[j + 1]) >= tolerance:
            last_break = j
    first_stable = last_break + 1
    if first_stable > n_windows - 2:
        return {"converged": False, "plateau_start": None}
    plateau_start = first_stable * window + 1
    width = n - plateau_start + 1
    return {"converged": k <= width, "plateau_start": plateau_start}


def inference_cost(config: Union[TrialConfig, Sequence[int]],
                   n_inputs: int, n_outputs: int) -> dict:
    """Parameter count and per-sample FLOP estimate for one architecture.

    FLOPs charge 2*d_in*d_out per linear layer (see the constants above for
    why that includes bias adds) plus 1 per ReLU unit and 4 per sigmoid
    output unit.
    """
    if isinstance(config, TrialConfig):
        widths = config.hidden_widths
    else:
        widths = tuple(int(w) for w in config)
    if n_inputs < 1 or n_outputs < 1:
        raise AnalysisError("layer sizes must be positive")
    dims = (n_inputs, *widths, n_outputs)
    flops = sum(2 * a * b for a, b in zip(dims, dims[1:]))
    flops += RELU_FLOPS_PER_UNIT * sum(widths)
    flops += SIGMOID_FLOPS_PER_UNIT * n_outputs
    return {"params": param_count(widths, n_inputs, n_outputs),
            "flops_per_sample": flops}


def evaluate_holdout(model: MlpModel,
                     holdout_view: tuple[np.ndarray, np.ndarray]) -> dict:
    """MSE and R-squared of a trained model on unseen rows.

    ``holdout_view`` is an (inputs, targets) pair whose inputs were already
    transformed by the standardizer fitted on the model's training rows.
    R-squared is 1 - SS_res/SS_tot computed per output column; the scalar
    ``r_squared`` is their uniform average and the per-column values are
    returned alongside it.
    """
    x, y = (np.asarray(a, dtype=np.float64) for a in holdout_view)
    if x.ndim != 2 or y.ndim != 2 or len(x) != len(y):
        raise AnalysisError("holdout inputs and targets must be matching 2-D arrays")
    if len(x) < 2:
        raise AnalysisError("holdout needs at least two rows")
    pred = forward(model, x)
    ss_res = np.sum((y - pred) ** 2, axis=0)
    ss_tot = np.sum((y - np.mean(y, axis=0)) ** 2, axis=0)
    if np.any(ss_tot == 0.0):
        flat = [i for i, s in enumerate(ss_tot) if s == 0.0]
        raise AnalysisError(f"holdout target columns {flat} are constant")
    r2 = 1.0 - ss_res / ss_tot
    return {
        "mse": mse_loss(pred, y),
        "r_squared": float(np.mean(r2)),
        "r_squared_per_output": [float(v) for v in r2],
    }


# table helpers: flatten analysis results into (header, rows) for the CLI

RANK_CURVE_HEADER = ("rank", "min_val_mse")
SCATTER_HEADER = ("trial_id", "step1_mse", "step2_mse")
COMPLEXITY_HEADER = ("project", "trial_id", "depth", "params", "mse")
BOX_HEADER = ("group_start", "n", "median", "q1", "q3",
              "whisker_low", "whisker_high", "outliers")
SUBSAMPLE_HEADER = ("m", "rank", "min_val_mse")


def rank_curve_table(curve: RankCurve):
    return RANK_CURVE_HEADER, [(r, m) for r, m in curve.points]


def scatter_table(points: Sequence[ScatterPoint]):
    return SCATTER_HEADER, [(p.trial_id, p.step1_mse, p.step2_mse)
                            for p in points]


def complexity_table(rows: Sequence[ComplexityRow]):
    return COMPLEXITY_HEADER, [(r.project, r.trial_id, r.depth, r.params, r.mse)
                               for r in rows]


def box_table(boxes: Mapping[int, BoxStats]):
    rows = []
    for start in sorted(boxes):
        b = boxes[start]
        rows.append((start, b.n, b.median, b.q1, b.q3,
                     b.whisker_low, b.whisker_high,
                     json.dumps(list(b.outliers))))
    return BOX_HEADER, rows


def subsample_table(curves: Mapping[int, RankCurve]):
    rows = []
    for m in sorted(curves):
        rows.extend((m, r, mse) for r, mse in curves[m].points)
    return SUBSAMPLE_HEADER, rows


def write_table_csv(path: str, header: Sequence[str],
                    rows: Iterable[Sequence]) -> None:
    """Write one analysis table as a CSV file, floats at full precision."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v
                             for v in row])


def analysis_file_name(project: str, analysis: str, ext: str = "csv") -> str:
    return f"{project}_{analysis}.{ext}"


def analyze_workdir(workdir: str, out_dir: str | None = None, *,
                    k: int = DEFAULT_WINDOW, window: int = DEFAULT_WINDOW,
                    tolerance: float = DEFAULT_TOLERANCE,
                    subsample_ms: Sequence[int] | None = None,
                    subsample_seed: int = 0) -> dict:
    """Write every applicable analysis table for one project's workdir.

    Reads step1_report.json (required) plus step2 and rank-group reports when
    present, writes ``<project>_<analysis>.csv`` tables and a
    ``<project>_summary.json`` into ``out_dir`` (default: the workdir), and
    returns the summary dict with a ``summary_path`` entry added. The
    convergence diagnostic is included whenever the curve is long enough for
    the requested k and window.
    """
    out_dir = out_dir or workdir
    os.makedirs(out_dir, exist_ok=True)
    step1_path = os.path.join(workdir, "step1_report.json")
    if not os.path.exists(step1_path):
        raise FileNotFoundError(f"no step-1 report at {step1_path}")
    report1 = load_report(step1_path)
    project = report1.project_id
    files: dict[str, str] = {}

    def _write(name: str, header, rows) -> None:
        path = os.path.join(out_dir, analysis_file_name(project, name))
        write_table_csv(path, header, rows)
        files[name] = path

    curve = rank_curve(report1)
    _write("rank_curve", *rank_curve_table(curve))

    reports = [report1]
    step2_report = None
    step2_path = os.path.join(workdir, "step2_report.json")
    if os.path.exists(step2_path):
        step2_report = load_report(step2_path)
        reports.append(step2_report)
        _write("step_scatter",
               *scatter_table(step_scatter(report1, step2_report)))
    _write("complexity", *complexity_table(complexity_maps(reports)))

    grouped: dict[int, StepReport] = {}
    for path in sorted(glob.glob(os.path.join(workdir,
                                              "rankgroup_*_report.json"))):
        match = re.search(r"rankgroup_(\d+)_report\.json$", path)
        if match:
            grouped[int(match.group(1))] = load_report(path)
    if grouped:
        _write("rank_group_boxes", *box_table(rank_group_boxes(grouped)))

    if subsample_ms:
        curves = subsample_rank_curves(report1, list(subsample_ms),
                                       seed=subsample_seed)
        _write("subsample_rank_curves", *subsample_table(curves))

    convergence = None
    if k <= len(curve) and window <= len(curve):
        convergence = convergence_diagnostic(curve, k=k, window=window,
                                             tolerance=tolerance)

    def _report_counts(report: StepReport) -> dict:
        return {"completed": report.completed_count,
                "failed": report.failed_count,
                "total_cost_units": report.total_cost_units,
                "unhealthy": report.unhealthy}

    summary = {
        "project": project,
        "step1": _report_counts(report1),
        "step2": None if step2_report is None else _report_counts(step2_report),
        "best_step1_trial": report1.ranked[0].to_json(),
        "convergence": convergence,
        "files": files,
    }
    summary_path = os.path.join(out_dir,
                                analysis_file_name(project, "summary", "json"))
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return {**summary, "summary_path": summary_path}
