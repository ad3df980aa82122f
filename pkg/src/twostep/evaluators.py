"""Worker-side evaluation of one TrialAssignment.

Dispatches on the assignment's evaluator kind:

* ``synthetic`` -- the closed-form surrogate; the dataset reference is
  {"kind":"virtual","n_samples":N[,"noise_scale":s]} and nothing is
  materialized. The surrogate's noise seed is the assignment's train seed.
* ``mlp`` -- the reference trainer on a real dataset (CSV file or the
  deterministic synthetic generator). Subset, split, and standardization
  follow the data module; inputs are z-scored with statistics fitted on
  the training rows only, targets stay untouched.

Loaded datasets are cached per process keyed by their canonical reference,
so a worker evaluating many trials of one project loads the data once.
"""
from __future__ import annotations

import os
import threading

from .data import (
    DatasetHandle,
    generate_synthetic_activation,
    load_csv,
    make_split,
    make_subset,
    subset_size,
    train_size,
    Standardizer,
)
from .runtime.protocol import TrialAssignment, canonical_json
from .space import derive_seed
from .trainer import (
    TrialResult,
    init_model,
    save_checkpoint,
    synthetic_objective,
    train,
)


class EvaluatorError(ValueError):
    """Assignment cannot be evaluated (bad reference, missing file)."""


_cache: dict[str, DatasetHandle] = {}
_cache_lock = threading.Lock()


def clear_dataset_cache() -> None:
    with _cache_lock:
        _cache.clear()


def resolve_dataset(ref: dict) -> DatasetHandle:
    """Load or generate the referenced dataset, memoized per process."""
    kind = ref.get("kind")
    if kind == "virtual":
        raise EvaluatorError("virtual dataset references carry no rows to load")
    key = canonical_json(ref)
    with _cache_lock:
        if key in _cache:
            return _cache[key]
    if kind == "csv":
        handle = load_csv(ref["path"], targets=ref.get("targets"))
    elif kind == "synthetic":
        handle = generate_synthetic_activation(int(ref["n_samples"]),
                                               int(ref["gen_seed"]))
    else:
        raise EvaluatorError(f"unknown dataset kind {kind!r}")
    with _cache_lock:
        _cache[key] = handle
    return handle


def dataset_n_samples(ref: dict) -> int:
    """Row count of a dataset reference, without loading data if avoidable.

    Any reference may carry an ``n_samples`` hint; the manager relies on it
    for cost accounting so that it never has to read a CSV itself.
    """
    if "n_samples" in ref:
        n = int(ref["n_samples"])
        if n < 1:
            raise EvaluatorError("dataset n_samples must be >= 1")
        return n
    if ref.get("kind") == "virtual":
        raise EvaluatorError("virtual dataset needs n_samples >= 1")
    return resolve_dataset(ref).n_samples


def assignment_train_rows(assignment: TrialAssignment) -> int:
    """Training rows implied by an assignment's subset and split settings.

    Shared by evaluation and by the manager's cost accounting, so both
    sides agree exactly on the abstract cost of a trial.
    """
    n = dataset_n_samples(assignment.dataset)
    k = subset_size(n, assignment.p_subset)
    return train_size(k, assignment.train_fraction)


def terminal_result_fields(assignment: TrialAssignment, min_val_mse: float,
                           best_epoch: int, epochs_run: int,
                           param_count: int) -> dict:
    """Result block of a completed ledger record.

    cost_units (epochs times training rows) and stopped_early are derived
    here rather than trusted from the worker, and the sequential search
    path uses the same function, so every execution route writes
    byte-identical result content for the same evaluation.
    """
    return {
        "min_val_mse": float(min_val_mse),
        "best_epoch": int(best_epoch),
        "epochs_run": int(epochs_run),
        "param_count": int(param_count),
        "cost_units": float(epochs_run) * assignment_train_rows(assignment),
        "stopped_early": int(epochs_run) < assignment.budget.max_epochs,
    }


def evaluate_assignment(assignment: TrialAssignment) -> TrialResult:
    if assignment.evaluator == "synthetic":
        return _evaluate_synthetic(assignment)
    if assignment.evaluator == "mlp":
        return _evaluate_mlp(assignment)
    raise EvaluatorError(
        f"evaluator kind {assignment.evaluator!r} is not built in")


def _evaluate_synthetic(assignment: TrialAssignment) -> TrialResult:
    n_train = assignment_train_rows(assignment)
    noise_scale = float(assignment.dataset.get("noise_scale", 0.2))
    return synthetic_objective(
        assignment.config, n_train,
        noise_seed=assignment.train_seed,
        noise_scale=noise_scale,
    )


def _evaluate_mlp(assignment: TrialAssignment) -> TrialResult:
    handle = resolve_dataset(assignment.dataset)
    subset = make_subset(handle, assignment.p_subset, assignment.subset_seed)
    split = make_split(subset, assignment.train_fraction, assignment.split_seed)

    std = Standardizer.fit(split.train_features(), handle.feature_names)
    train_view = (std.transform(split.train_features()), split.train_targets())
    val_view = (std.transform(split.val_features()), split.val_targets())

    model = init_model(
        assignment.config, handle.n_inputs, handle.n_outputs,
        init_seed=derive_seed(assignment.train_seed, 0, 0, "init"))
    best_model, result = train(model, train_view, val_view,
                               assignment.budget, assignment.train_seed)

    if assignment.checkpoint_dir and not result.failed:
        os.makedirs(assignment.checkpoint_dir, exist_ok=True)
        path = os.path.join(assignment.checkpoint_dir,
                            f"trial_{assignment.trial_id}.npz")
        save_checkpoint(best_model, path, extra={
            "trial_id": assignment.trial_id,
            "step": assignment.step,
            "hidden_widths": list(assignment.config.hidden_widths),
            "min_val_mse": result.min_val_mse,
            "standardizer": std.to_json(),
            "dataset": assignment.dataset,
        })
    return result
