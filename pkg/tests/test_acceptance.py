"""End-to-end acceptance gate: nine criteria, one printed verdict line each.

Each test covers one criterion (A1..A9) and prints exactly one PASS/FAIL
line, echoed again in the terminal summary by conftest.py so the verdicts
survive pytest's output capture. Every criterion carries a wall-clock
budget that is asserted, not just reported. Run the gate alone with:

    pytest -s tests/test_acceptance.py
"""
import contextlib
import itertools
import math
import statistics
import threading
import time
from dataclasses import replace

import numpy as np
from scipy.special import expit

from twostep.analysis import (
    box_stats,
    evaluate_holdout,
    rank_curve,
    subsample_rank_curves,
)
from twostep.data import Standardizer, generate_synthetic_activation, train_size
from twostep.evaluators import evaluate_assignment
from twostep.pipeline import (
    CostModel,
    ProjectSpec,
    cost_ratio,
    measured_cost_ratio,
    one_step_search,
    run_rank_groups,
    run_step1,
    run_two_step,
    select_topk,
    step1_assignments,
)
from twostep.runtime.ledger import (
    check_exactly_once,
    read_ledger,
    resume_remaining,
    strip_volatile,
)
from twostep.runtime.manager import SubprocessWorkerHandle, run_queue
from twostep.runtime.protocol import TrialAssignment
from twostep.space import SearchSpace, TrialConfig, derive_seed, sample_config
from twostep.trainer import (
    TrainBudget,
    forward,
    grad_check,
    init_model,
    load_checkpoint,
    mse_loss,
    simulate_early_stop,
    train,
)

VERDICT_LINES: list[str] = []


def _record(line: str) -> None:
    VERDICT_LINES.append(line)
    print(line, flush=True)


@contextlib.contextmanager
def verdict(code: str, title: str, budget_seconds: float):
    started = time.monotonic()
    try:
        yield
    except BaseException:
        _record(f"{code} FAIL {title} ({time.monotonic() - started:.1f}s)")
        raise
    elapsed = time.monotonic() - started
    if elapsed >= budget_seconds:
        _record(f"{code} FAIL {title} "
                f"(ran {elapsed:.1f}s, budget {budget_seconds:g}s)")
        raise AssertionError(
            f"{code} finished correct but overran its {budget_seconds:g}s "
            f"budget: {elapsed:.1f}s")
    _record(f"{code} PASS {title} "
            f"({elapsed:.1f}s, budget {budget_seconds:g}s)")


def spec(project_id, **overrides):
    base = dict(
        project_id=project_id,
        n_trials=40,
        p_subset=0.05,
        p_retrain=0.05,
        dataset={"kind": "virtual", "n_samples": 1_000_000},
        evaluator="synthetic",
    )
    base.update(overrides)
    return ProjectSpec(**base)


def completed(records):
    return [r for r in records if r["status"] == "completed"]


def mse_map(records):
    return {r["assignment"]["trial_id"]: r["result"]["min_val_mse"]
            for r in completed(records)}


def test_a1_cost_model(tmp_path):
    with verdict("A1", "cost model: analytic identities, measured parity, "
                 "overhead penalty at tiny subsets", 1.0):
        assert cost_ratio(0.05, 0.05) == 0.10
        assert cost_ratio(1, 0) == 1.0

        # subset sizes chosen to make every rounding step exact, so the
        # measured ratio must land on the analytic one to float precision
        s = spec("a1", dataset={"kind": "virtual", "n_samples": 10_000})
        r1, _, r2 = run_two_step(s, str(tmp_path / "a1"))
        reference = s.n_trials * train_size(10_000, s.train_fraction)
        measured = measured_cost_ratio(r1, r2, reference)
        assert abs(measured - cost_ratio(0.05, 0.05)) < 1e-9

        tiny = spec("a1tiny", p_subset=0.005, p_retrain=0.025)
        r1t, _, r2t = run_two_step(tiny, str(tmp_path / "a1tiny"))
        model = CostModel(c_sample=1.0, c_overhead=100.0)
        full = model.trial_cost(train_size(1_000_000, tiny.train_fraction))
        with_overhead = measured_cost_ratio(r1t, r2t, tiny.n_trials * full,
                                            model)
        assert with_overhead > cost_ratio(0.005, 0.025)


def test_a2_topk_selection_exact(tmp_path):
    with verdict("A2", "10,000-trial search selects exactly the brute-force "
                 "top 50", 60.0):
        s = spec("a2", n_trials=10_000, p_retrain=0.005, master_seed=2)
        report = run_step1(s, str(tmp_path), local_workers=2)
        selected = select_topk(report, s.p_retrain)
        assert len(selected) == 50

        records = read_ledger(str(tmp_path / "step1.jsonl"))
        done = completed(records)
        assert len(done) == 10_000
        oracle = sorted((r["result"]["min_val_mse"],
                         r["assignment"]["trial_id"]) for r in done)[:50]
        assert [(t.min_val_mse, t.trial_id) for t in selected] == oracle


def test_a3_subset_fidelity_across_fractions(tmp_path):
    with verdict("A3", "best retrained MSE within 10x of the full-data "
                 "search across subset fractions, 5 seeds", 300.0):
        fractions = (0.005, 0.05, 0.5, 1.0)
        for seed in (1, 2, 3, 4, 5):
            best = {}
            for p in fractions:
                s = spec(f"a3-s{seed}-p{p}", n_trials=400, p_subset=p,
                         p_retrain=0.05, master_seed=seed)
                _, selected, r2 = run_two_step(
                    s, str(tmp_path / f"s{seed}p{p}"))
                assert len(selected) == 20
                assert r2.completed_count == 20
                best[p] = r2.ranked[0].min_val_mse
            base = best[1.0]
            for p in fractions[:-1]:
                ratio = best[p] / base
                assert 0.1 < ratio < 10.0, (seed, p, ratio)


def test_a4_flat_bottom_rank_groups(tmp_path):
    with verdict("A4", "retrained MSE medians of rank groups 1-50 and "
                 "1001-1050 agree within 2x", 300.0):
        s = spec("a4", n_trials=5_000, p_retrain=0.0, master_seed=1,
                 dataset={"kind": "virtual", "n_samples": 20_000_000},
                 space=SearchSpace((2, 3), (64, 128, 256, 512)))
        report = run_step1(s, str(tmp_path), local_workers=2)
        assert report.completed_count == 5_000
        groups = run_rank_groups(s, report, (1, 1001), 50, str(tmp_path))
        medians = {start: statistics.median(
            t.min_val_mse for t in groups[start].ranked)
            for start in (1, 1001)}
        assert groups[1].completed_count == 50
        assert groups[1001].completed_count == 50
        lo, hi = sorted(medians.values())
        assert hi < 2.0 * lo, medians


def test_a5_trainer_correctness():
    with verdict("A5", "gradient check on 20+ architectures, best-epoch "
                 "restore, patience arithmetic", 120.0):
        # backprop vs central differences; biases jittered away from the
        # ReLU kink where finite differences are legitimately undefined
        space = SearchSpace(layer_count_choices=(1, 2, 3),
                            width_choices=(3, 4, 8))
        rng = np.random.default_rng(5)
        seen = {}
        for i in itertools.count():
            cfg = sample_config(space, derive_seed(31, 0, i, "sample"))
            if cfg.config_id in seen:
                continue
            seen[cfg.config_id] = cfg
            m = init_model(cfg, 3, 2, i)
            for b in m.biases:
                b += rng.uniform(0.01, 0.1, size=b.shape)
            x = rng.normal(size=(8, 3))
            y = rng.uniform(0.1, 0.9, size=(8, 2))
            assert grad_check(m, x, y) < 1e-4, cfg.hidden_widths
            if len(seen) >= 22:
                break
        assert len(seen) >= 20

        # the returned model must be the best-validation epoch's weights:
        # re-evaluating it reproduces min_val_mse, which is the history min
        data_rng = np.random.default_rng(11)
        x_all = data_rng.normal(size=(300, 6))
        w_true = data_rng.normal(size=(6, 3))
        y_all = expit(x_all @ w_true + data_rng.normal(0, 0.3, size=(300, 3)))
        budget = TrainBudget(batch_size=32, learning_rate=0.01,
                             max_epochs=15, patience=5)
        for j, widths in enumerate(((8,), (8, 8), (4, 4, 4))):
            model = init_model(TrialConfig(widths), 6, 3, init_seed=j)
            best_model, result = train(
                model, (x_all[:240], y_all[:240]), (x_all[240:], y_all[240:]),
                budget, train_seed=derive_seed(7, 1, j, "train"))
            assert not result.failed
            re_evaluated = mse_loss(forward(best_model, x_all[240:]),
                                    y_all[240:])
            assert abs(re_evaluated - result.min_val_mse) <= 1e-10
            assert result.min_val_mse == min(result.val_mse_history)
            assert result.best_epoch == (
                result.val_mse_history.index(result.min_val_mse) + 1)

        # patience-5 decisions on crafted validation sequences, plus the
        # general arithmetic on a few patience values
        assert simulate_early_stop([5, 4, 3, 2, 1] + [1] * 10, 5, 100) \
            == (5, 10, True)
        assert simulate_early_stop([1] * 10, 5, 100) == (1, 6, True)
        assert simulate_early_stop([3, 2, 2, 2, 2, 2], 4, 100) == (2, 6, True)
        assert simulate_early_stop([5, 4, 6, 6, 3, 6, 6, 6, 6, 6], 4, 100) \
            == (5, 9, True)
        assert simulate_early_stop([5, 4, 3, 2, 1], 5, 5) == (5, 5, False)
        assert simulate_early_stop(list(range(10, 0, -1)), 3, 10) \
            == (10, 10, False)
        assert simulate_early_stop([2.0, 2.0], 1, 100) == (1, 2, True)

        # a genuine plateau run must stop by the same arithmetic: updates
        # below float64 resolution keep the validation MSE bit-identical
        frozen = TrainBudget(batch_size=32, learning_rate=1e-30,
                             max_epochs=30, patience=5)
        _, result = train(init_model(TrialConfig((8,)), 6, 3, init_seed=0),
                          (x_all[:240], y_all[:240]),
                          (x_all[240:], y_all[240:]), frozen, train_seed=3)
        assert result.stopped_early
        assert result.best_epoch == 1
        assert result.epochs_run - result.best_epoch == frozen.patience


def test_a6_two_step_end_to_end_quality(tmp_path):
    with verdict("A6", "two-step search on 50k-row activation data matches "
                 "one-step quality on a holdout", 1800.0):
        space = SearchSpace((1, 2, 3), (16, 32, 64))
        dataset = {"kind": "synthetic", "n_samples": 50_000, "gen_seed": 17}
        two = ProjectSpec(project_id="a6two", n_trials=60, p_subset=0.05,
                          p_retrain=0.1, dataset=dataset, evaluator="mlp",
                          master_seed=7, space=space)
        one = ProjectSpec(project_id="a6one", n_trials=60, p_subset=1.0,
                          p_retrain=0.0, dataset=dataset, evaluator="mlp",
                          master_seed=7, space=space)

        r1, selected, r2 = run_two_step(two, str(tmp_path / "two"))
        assert r1.completed_count == 60
        assert len(selected) == 6
        assert r2.completed_count == 6

        rep_one = run_step1(one, str(tmp_path / "one"))
        assert rep_one.completed_count == 60
        best_one = rep_one.ranked[0]

        # retrain the one-step winner with a checkpoint dir to capture its
        # weights; determinism makes this reproduce the searched MSE exactly
        winner = next(a for a in step1_assignments(one)
                      if a.trial_id == best_one.trial_id)
        winner = replace(winner, checkpoint_dir=str(tmp_path / "one_ckpt"))
        res = evaluate_assignment(winner)
        assert res.min_val_mse == best_one.min_val_mse

        def holdout_metrics(checkpoint_path, hold):
            model, meta = load_checkpoint(checkpoint_path)
            std = Standardizer.from_json(meta["extra"]["standardizer"])
            return evaluate_holdout(
                model, (std.transform(hold.features), hold.targets))

        hold = generate_synthetic_activation(10_000, 999)
        two_eval = holdout_metrics(
            str(tmp_path / "two" / "checkpoints" / "step2"
                / f"trial_{r2.ranked[0].trial_id}.npz"), hold)
        one_eval = holdout_metrics(
            str(tmp_path / "one_ckpt" / f"trial_{best_one.trial_id}.npz"),
            hold)

        assert two_eval["mse"] <= 2.0 * one_eval["mse"], (two_eval, one_eval)
        assert two_eval["r_squared"] > 0.9
        assert one_eval["r_squared"] > 0.9


def _assignments(n, *, master_seed=42, n_samples=10_000):
    space = SearchSpace()
    return [TrialAssignment(
        trial_id=i,
        step=1,
        config=sample_config(space, derive_seed(master_seed, 1, i, "sample")),
        dataset={"kind": "virtual", "n_samples": n_samples},
        p_subset=0.05,
        train_fraction=0.8,
        subset_seed=derive_seed(master_seed, 0, 0, "subset"),
        split_seed=derive_seed(master_seed, 0, 0, "split"),
        train_seed=derive_seed(master_seed, 1, i, "train"),
        evaluator="synthetic",
        timeout_seconds=3600.0,
    ) for i in range(n)]


def test_a7_runtime_robustness(tmp_path):
    with verdict("A7", "worker loss recovery, worker-count invariance, "
                 "torn-ledger resume", 120.0):
        # kill a busy worker process mid-queue: every trial still completes
        assignments = _assignments(100)
        captured = {}

        def kill_one_when_busy():
            deadline = time.monotonic() + 60
            while time.monotonic() < deadline:
                manager = captured.get("manager")
                if manager is not None and len(manager.records) >= 5:
                    for handle in manager.workers:
                        if (isinstance(handle, SubprocessWorkerHandle)
                                and handle.busy is not None):
                            handle.process.kill()
                            return
                time.sleep(0.005)

        killer = threading.Thread(target=kill_one_when_busy, daemon=True)
        killer.start()
        records = run_queue(assignments, str(tmp_path / "kill.jsonl"),
                            subprocess_workers=2, eval_delay=0.05,
                            heartbeat_seconds=5.0,
                            manager_hook=lambda m: captured.update(manager=m))
        killer.join(timeout=10)
        check_exactly_once(records)
        assert len(completed(records)) == 100
        assert sum(r["status"] == "reassigned" for r in records) >= 1

        # worker count must not leak into results
        records1 = run_queue(assignments, str(tmp_path / "w1.jsonl"),
                             local_workers=1)
        records4 = run_queue(assignments, str(tmp_path / "w4.jsonl"),
                             local_workers=4)
        assert len(completed(records1)) == 100
        assert mse_map(records1) == mse_map(records4) == mse_map(records)

        # a torn final line is invisible to resume except as missing work
        path = str(tmp_path / "torn.jsonl")
        short = _assignments(10, master_seed=9)
        run_queue(short, path, local_workers=1)
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
        torn = read_ledger(path)[-1]
        with open(path, "w", encoding="utf-8") as fh:
            fh.writelines(lines[:9])
            fh.write(lines[9][: len(lines[9]) // 2])
        remaining = resume_remaining(short, read_ledger(path))
        assert [a.trial_id for a in remaining] \
            == [torn["assignment"]["trial_id"]]
        rerun = run_queue(short, path, local_workers=1)
        check_exactly_once(rerun)
        assert len(completed(rerun)) == 10
        redone = [r for r in rerun if r["assignment"]["trial_id"]
                  == torn["assignment"]["trial_id"]][-1]
        assert strip_volatile(redone) == strip_volatile(torn)


def test_a8_analysis_oracles(tmp_path):
    with verdict("A8", "box stats match brute force on 1,000 arrays, "
                 "subsampling and rank curves behave", 60.0):
        def quantile7(ordered, p):
            h = (len(ordered) - 1) * p
            lo = math.floor(h)
            hi = min(lo + 1, len(ordered) - 1)
            return ordered[lo] + (h - lo) * (ordered[hi] - ordered[lo])

        rng = np.random.default_rng(2024)
        for _ in range(1000):
            size = int(rng.integers(1, 40))
            values = list(rng.normal(0.0, 1.0, size))
            if rng.random() < 0.3:
                values.append(float(rng.choice([-50.0, 50.0])))
            ordered = sorted(values)
            q1, med, q3 = (quantile7(ordered, p) for p in (0.25, 0.5, 0.75))
            iqr = q3 - q1
            inside = [v for v in ordered
                      if q1 - 1.5 * iqr <= v <= q3 + 1.5 * iqr]
            outliers = [v for v in ordered
                        if v < q1 - 1.5 * iqr or v > q3 + 1.5 * iqr]
            box = box_stats(values)
            assert math.isclose(box.q1, q1, rel_tol=1e-12, abs_tol=1e-12)
            assert math.isclose(box.median, med, rel_tol=1e-12, abs_tol=1e-12)
            assert math.isclose(box.q3, q3, rel_tol=1e-12, abs_tol=1e-12)
            assert box.whisker_low == inside[0]
            assert box.whisker_high == inside[-1]
            assert list(box.outliers) == outliers

        ledgers = []
        for seed, n in ((23, 200), (24, 120)):
            s = spec(f"a8-{seed}", n_trials=n, p_retrain=0.0,
                     master_seed=seed)
            run_step1(s, str(tmp_path / str(seed)))
            ledgers.append(str(tmp_path / str(seed) / "step1.jsonl"))

        # drawing m = n must reproduce the full curve bit for bit
        full = rank_curve(ledgers[0])
        sub = subsample_rank_curves(ledgers[0], [len(full)], seed=9)
        assert sub[len(full)].points == full.points

        for ledger in ledgers:
            mses = rank_curve(ledger).mses()
            assert all(a <= b for a, b in zip(mses, mses[1:]))


def test_a9_degenerate_two_step_is_one_step(tmp_path):
    with verdict("A9", "p_subset=1, p_retrain=0 reproduces the sequential "
                 "one-step search ledger", 60.0):
        s = spec("a9", n_trials=30, p_subset=1.0, p_retrain=0.0,
                 master_seed=17, dataset={"kind": "virtual",
                                          "n_samples": 10_000})
        r1, selected, r2 = run_two_step(s, str(tmp_path / "mgr"),
                                        local_workers=3)
        assert selected == [] and r2 is None
        seq_report = one_step_search(s, str(tmp_path / "seq"))

        key = lambda r: r["assignment"]["trial_id"]
        mgr = sorted((strip_volatile(r) for r in
                      read_ledger(str(tmp_path / "mgr" / "step1.jsonl"))),
                     key=key)
        seq = sorted((strip_volatile(r) for r in
                      read_ledger(str(tmp_path / "seq" / "one_step.jsonl"))),
                     key=key)
        assert mgr == seq
        assert r1.to_json() == seq_report.to_json()
