"""MLP trial evaluation: a from-scratch trainer and a closed-form surrogate.

The reference evaluator trains a dense network (ReLU hidden layers, sigmoid
output, MSE loss) with mini-batch Adam and patience-based early stopping.
Everything is written against plain float64 numpy arrays; no ML framework
is involved, which keeps the arithmetic auditable and lets the gradient
check compare backpropagation to finite differences as two genuinely
independent routes.

The surrogate evaluator (`synthetic_objective`) is a deterministic formula
shaped like a learning curve: an architecture-dependent error floor plus a
generalization gap that shrinks with training-set size, scaled by seeded
multiplicative noise. It exists so orchestration-level behavior can be
tested with millisecond trials.

Conventions that affect determinism, all fixed here: the last partial
mini-batch is kept, ReLU'(0) = 0, per-epoch shuffles come from
derive_seed(train_seed, 0, epoch, "shuffle"), and the loss is the mean over
all output elements of the batch.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Sequence

import numpy as np
from scipy.special import expit

from .space import TrialConfig, derive_seed, param_count, permutation_array, uniform01_array


class TrainerError(ValueError):
    """Invalid trainer input (shape mismatch, empty view, bad budget)."""


@dataclass(frozen=True)
class TrainBudget:
    """Fixed training recipe applied to every trial."""

    batch_size: int = 1024
    learning_rate: float = 0.001
    max_epochs: int = 100
    patience: int = 5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-7

    def __post_init__(self):
        if min(self.batch_size, self.max_epochs, self.patience) < 1:
            raise TrainerError("batch_size, max_epochs, patience must be >= 1")
        if self.learning_rate <= 0 or self.adam_epsilon <= 0:
            raise TrainerError("learning_rate and adam_epsilon must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise TrainerError("Adam betas must lie in [0, 1)")
        if self.patience > self.max_epochs:
            raise TrainerError("patience cannot exceed max_epochs")

    def to_json(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2,
            "adam_epsilon": self.adam_epsilon,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrainBudget":
        return cls(**obj)


@dataclass(frozen=True)
class TrialResult:
    """Outcome of one trial evaluation.

    ``val_mse_history`` is the raw per-epoch validation curve; it is
    returned to callers for inspection but is not part of the wire or
    ledger encoding. Failed trials (non-finite loss) carry an infinite
    ``min_val_mse`` sentinel in memory; persistent encodings represent the
    failure as a status, never as NaN or Inf.
    """

    min_val_mse: float
    best_epoch: int
    epochs_run: int
    param_count: int
    cost_units: float
    stopped_early: bool
    failed: bool = False
    failure_reason: str | None = None
    val_mse_history: tuple[float, ...] = field(default=(), repr=False)


@dataclass
class MlpModel:
    """Dense network weights: ReLU hidden layers, sigmoid output."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_outputs(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def hidden_widths(self) -> tuple[int, ...]:
        return tuple(w.shape[1] for w in self.weights[:-1])

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "MlpModel":
        return MlpModel([w.copy() for w in self.weights],
                        [b.copy() for b in self.biases])

    def check_finite(self) -> bool:
        return all(np.all(np.isfinite(w)) for w in self.weights) and \
            all(np.all(np.isfinite(b)) for b in self.biases)


def init_model(config: TrialConfig, n_inputs: int, n_outputs: int,
               init_seed: int) -> MlpModel:
    """Glorot-uniform weights (limit sqrt(6/(fan_in+fan_out))), zero biases.

    Each layer draws from its own derived stream, so the weights are a pure
    function of (config, dims, init_seed).
    """
    dims = [n_inputs, *config.hidden_widths, n_outputs]
    weights, biases = [], []
    for layer, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        u = uniform01_array(derive_seed(init_seed, 0, layer, "glorot"),
                            fan_in * fan_out)
        weights.append(((u * 2.0 - 1.0) * limit).reshape(fan_in, fan_out))
        biases.append(np.zeros(fan_out))
    return MlpModel(weights, biases)


def _forward_trace(model: MlpModel, x: np.ndarray):
    """Forward pass keeping pre-activations and activations for backprop."""
    pre, act = [], [x]
    h = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w + b
        pre.append(z)
        h = expit(z) if i == last else np.maximum(z, 0.0)
        act.append(h)
    return pre, act


def forward(model: MlpModel, inputs: np.ndarray) -> np.ndarray:
    """Model predictions for a batch of rows; outputs lie in (0, 1)."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.n_inputs:
        raise TrainerError(
            f"input width {x.shape[-1] if x.ndim == 2 else '?'} does not match "
            f"model input width {model.n_inputs}")
    return _forward_trace(model, x)[1][-1]


def mse_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean squared error over all elements of the batch."""
    d = pred - target
    return float(np.mean(d * d))


def _backprop(model: MlpModel, x: np.ndarray, y: np.ndarray):
    """Analytic gradients of mse_loss w.r.t. every weight and bias."""
    pre, act = _forward_trace(model, x)
    out = act[-1]
    # d(mean((out-y)^2))/d(out); the mean spans batch * output elements.
    delta = (2.0 * (out - y) / out.size) * out * (1.0 - out)
    grads_w = [None] * len(model.weights)
    grads_b = [None] * len(model.biases)
    for i in range(len(model.weights) - 1, -1, -1):
        grads_w[i] = act[i].T @ delta
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i].T) * (pre[i - 1] > 0.0)
    return grads_w, grads_b


class _AdamState:
    def __init__(self, model: MlpModel, budget: TrainBudget):
        self.budget = budget
        self.t = 0
        self.m_w = [np.zeros_like(w) for w in model.weights]
        self.v_w = [np.zeros_like(w) for w in model.weights]
        self.m_b = [np.zeros_like(b) for b in model.biases]
        self.v_b = [np.zeros_like(b) for b in model.biases]

    def step(self, model: MlpModel, grads_w, grads_b) -> None:
        b = self.budget
        self.t += 1
        c1 = 1.0 - b.adam_beta1 ** self.t
        c2 = 1.0 - b.adam_beta2 ** self.t
        for i in range(len(model.weights)):
            for params, grad, m, v in (
                (model.weights[i], grads_w[i], self.m_w[i], self.v_w[i]),
                (model.biases[i], grads_b[i], self.m_b[i], self.v_b[i]),
            ):
                m *= b.adam_beta1
                m += (1.0 - b.adam_beta1) * grad
                v *= b.adam_beta2
                v += (1.0 - b.adam_beta2) * grad * grad
                params -= b.learning_rate * (m / c1) / (np.sqrt(v / c2) + b.adam_epsilon)


class EarlyStopTracker:
    """Patience bookkeeping over a stream of per-epoch validation MSEs."""

    def __init__(self):
        self.epoch = 0
        self.best_epoch = 0
        self.best_mse = math.inf

    def update(self, val_mse: float) -> bool:
        """Record one epoch's validation MSE; True if it strictly improved."""
        self.epoch += 1
        if val_mse < self.best_mse:
            self.best_mse = val_mse
            self.best_epoch = self.epoch
            return True
        return False

    def should_stop(self, patience: int) -> bool:
        return self.epoch - self.best_epoch >= patience


def simulate_early_stop(val_mses: Sequence[float], patience: int,
                        max_epochs: int) -> tuple[int, int, bool]:
    """Pure early-stopping arithmetic on a given validation-MSE sequence.

    Returns (best_epoch, epochs_run, stopped_early) exactly as the training
    loop would decide them, epochs numbered from 1. Improvement at epochs
    1..k followed by a plateau stops at epoch k + patience.
    """
    tracker = EarlyStopTracker()
    for mse in list(val_mses)[:max_epochs]:
        tracker.update(mse)
        if tracker.should_stop(patience):
            return tracker.best_epoch, tracker.epoch, True
    return tracker.best_epoch, tracker.epoch, False


def train(model: MlpModel, train_view, val_view, budget: TrainBudget,
          train_seed: int) -> tuple[MlpModel, TrialResult]:
    """Train with mini-batch Adam and early stopping; rank on min val MSE.

    ``train_view`` and ``val_view`` are (inputs, targets) array pairs,
    already standardized by the caller. After each epoch the validation MSE
    is computed over the whole validation view; training stops once it has
    not improved for ``budget.patience`` consecutive epochs or at
    ``budget.max_epochs``. The returned model carries the weights of the
    best-validation epoch, and cost_units = epochs_run * len(train).

    A non-finite training loss or validation MSE ends the trial with a
    failure result rather than an exception.
    """
    x_tr, y_tr = (np.asarray(a, dtype=np.float64) for a in train_view)
    x_val, y_val = (np.asarray(a, dtype=np.float64) for a in val_view)
    if len(x_tr) < 1 or len(x_val) < 1:
        raise TrainerError("train and validation views must be non-empty")
    if x_tr.shape[1] != model.n_inputs or y_tr.shape[1] != model.n_outputs:
        raise TrainerError("view shapes do not match model")
    n = len(x_tr)

    adam = _AdamState(model, budget)
    tracker = EarlyStopTracker()
    best_model = model.copy()
    history: list[float] = []
    stopped_early = False
    failure: str | None = None

    for epoch in range(1, budget.max_epochs + 1):
        perm = permutation_array(n, derive_seed(train_seed, 0, epoch, "shuffle"))
        # Divergence shows up as non-finite values and is handled below;
        # the intermediate overflows that produce them are expected noise.
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            for start in range(0, n, budget.batch_size):
                rows = perm[start:start + budget.batch_size]
                xb, yb = x_tr[rows], y_tr[rows]
                grads_w, grads_b = _backprop(model, xb, yb)
                adam.step(model, grads_w, grads_b)
        if not model.check_finite():
            failure = f"non-finite weights after epoch {epoch}"
        else:
            val_mse = mse_loss(forward(model, x_val), y_val)
            if not math.isfinite(val_mse):
                failure = f"non-finite validation MSE at epoch {epoch}"
        if failure is not None:
            result = TrialResult(
                min_val_mse=math.inf,
                best_epoch=tracker.best_epoch,
                epochs_run=epoch,
                param_count=model.n_params,
                cost_units=float(epoch * n),
                stopped_early=False,
                failed=True,
                failure_reason=failure,
                val_mse_history=tuple(history),
            )
            return best_model, result
        history.append(val_mse)
        if tracker.update(val_mse):
            best_model = model.copy()
        if tracker.should_stop(budget.patience):
            stopped_early = True
            break

    result = TrialResult(
        min_val_mse=tracker.best_mse,
        best_epoch=tracker.best_epoch,
        epochs_run=tracker.epoch,
        param_count=model.n_params,
        cost_units=float(tracker.epoch * n),
        stopped_early=stopped_early,
        val_mse_history=tuple(history),
    )
    return best_model, result


def grad_check(model: MlpModel, inputs: np.ndarray, targets: np.ndarray,
               h: float = 1e-5) -> float:
    """Worst relative disagreement between backprop and finite differences.

    Each parameter is perturbed by +-h and the loss difference quotient is
    compared against the analytic gradient. The error is normalized by the
    largest gradient magnitude seen on either route (floored at 1e-12), so
    the figure is meaningful even when most entries are near zero. Intended
    for small models (<= ~1e3 parameters) and batches (<= 64 rows).
    """
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    grads_w, grads_b = _backprop(model, x, y)

    worst_abs = 0.0
    scale = 1e-12
    for arrays, grads in ((model.weights, grads_w), (model.biases, grads_b)):
        for arr, grad in zip(arrays, grads):
            flat = arr.reshape(-1)
            gflat = grad.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                hi = mse_loss(forward(model, x), y)
                flat[i] = orig - h
                lo = mse_loss(forward(model, x), y)
                flat[i] = orig
                fd = (hi - lo) / (2.0 * h)
                worst_abs = max(worst_abs, abs(fd - gflat[i]))
                scale = max(scale, abs(fd), abs(gflat[i]))
    return worst_abs / scale


CHECKPOINT_VERSION = 1


def save_checkpoint(model: MlpModel, path: str, extra: dict | None = None) -> None:
    """Persist weights as an .npz archive: W0, b0, W1, b1, ... plus a
    ``meta`` JSON blob (layer sizes, checkpoint version, caller extras)."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "n_inputs": model.n_inputs,
        "n_outputs": model.n_outputs,
        "hidden_widths": list(model.hidden_widths),
    }
    if extra:
        meta["extra"] = extra
    arrays = {}
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        arrays[f"W{i}"] = w
        arrays[f"b{i}"] = b
    meta_bytes = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    np.savez(path, meta=meta_bytes, **arrays)


def load_checkpoint(path: str) -> tuple[MlpModel, dict]:
    """Inverse of save_checkpoint; returns (model, meta)."""
    with np.load(path) as archive:
        meta = json.loads(bytes(archive["meta"].tobytes()).decode("utf-8"))
        n_layers = len(meta["hidden_widths"]) + 1
        weights = [archive[f"W{i}"] for i in range(n_layers)]
        biases = [archive[f"b{i}"] for i in range(n_layers)]
    model = MlpModel(weights, biases)
    if not model.check_finite():
        raise TrainerError(f"checkpoint {path} contains non-finite values")
    return model, meta


SURROGATE_N_INPUTS = 15
SURROGATE_N_OUTPUTS = 4


def synthetic_mean_mse(config: TrialConfig, n_train: int) -> float:
    """Noise-free value of the surrogate objective.

    With P = param_count(config, 15, 4) and L = depth:

        floor = 1e-5 * (1 + 2*max(0, 2-L) + 0.1*max(0, L-3))
                     * (1 + |log10(P) - 4.5|)
        gap   = 0.05 * sqrt(P) / n_train

    The floor penalizes depth 1 hard and very deep nets mildly, with a
    capacity sweet spot near 10^4.5 parameters; the gap shrinks linearly
    with training-set size. Returns floor + gap.
    """
    if n_train < 1:
        raise TrainerError("n_train must be >= 1")
    p = param_count(config.hidden_widths, SURROGATE_N_INPUTS, SURROGATE_N_OUTPUTS)
    depth = config.depth
    floor = 1e-5 * (1.0 + 2.0 * max(0, 2 - depth) + 0.1 * max(0, depth - 3)) \
        * (1.0 + abs(math.log10(p) - 4.5))
    gap = 0.05 * math.sqrt(p) / n_train
    return floor + gap


def synthetic_noise_factor(config_id: int, noise_seed: int,
                           noise_scale: float = 0.2) -> float:
    """Multiplicative log-normal trial noise, deterministic per
    (config_id, noise_seed): exp(noise_scale * z) with z standard normal."""
    u = (derive_seed(noise_seed, 0, config_id, "synthetic-noise") + 0.5) / 2.0 ** 64
    return math.exp(noise_scale * NormalDist().inv_cdf(u))


def synthetic_objective(config: TrialConfig, n_train: int, noise_seed: int,
                        noise_scale: float = 0.2) -> TrialResult:
    """Closed-form surrogate trial: min_val_mse = mean * noise, cost n_train.

    noise_scale=0 gives the exact noise-free mean, which analysis tests use
    to isolate formula behavior from noise.
    """
    mean = synthetic_mean_mse(config, n_train)
    eta = synthetic_noise_factor(config.config_id, noise_seed, noise_scale) \
        if noise_scale != 0.0 else 1.0
    return TrialResult(
        min_val_mse=mean * eta,
        best_epoch=1,
        epochs_run=1,
        param_count=param_count(config.hidden_widths, SURROGATE_N_INPUTS,
                                SURROGATE_N_OUTPUTS),
        cost_units=float(n_train),
        stopped_early=False,
    )
