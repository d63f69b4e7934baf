import json
import math

import numpy as np
import pytest

from hyperlr.harness import (ANALYTIC_EPOCH_STEPS, COMPARE_CSV_HEADER,
                             SWEEP_CSV_HEADER, TRACE_HEADER, ConfigError,
                             compare_methods, emit_compare_csv,
                             emit_history_csv, emit_schedule_csv,
                             emit_summary_json, emit_sweep_csv,
                             emit_trace_csv, load_experiment_config,
                             parse_compare_config, parse_experiment_config,
                             parse_schedule_search_config, parse_sweep_config,
                             random_sweep, read_trace_csv, run_experiment,
                             run_schedule_search, version_string)


def quad_cfg(**overrides):
    data = {
        "problem": {"kind": "quadratic", "a_diag": [1.0], "start": [1.0]},
        "dynamics": {"kind": "sgd"},
        "scheduler": {"kind": "constant", "eta0": 0.1},
        "horizon": 3,
    }
    data.update(overrides)
    return parse_experiment_config(data)


def mlp_cfg(**overrides):
    data = {
        "problem": {"kind": "mlp", "hidden": [8], "weight_decay": 1e-4},
        "dataset": {"source": "blobs", "n": 60, "num_classes": 3, "dim": 4,
                    "spread": 0.3, "n_train": 40, "n_val": 10, "n_test": 10},
        "dynamics": {"kind": "sgd"},
        "scheduler": {"kind": "marthe", "eta0": 0.05, "beta": 1e-3, "mu": 0.9},
        "horizon": 12,
        "batch_size": 10,
        "seed": 3,
    }
    data.update(overrides)
    return parse_experiment_config(data)


def test_minimal_config_fills_defaults():
    cfg = parse_experiment_config({"problem": {"kind": "quadratic"},
                                   "scheduler": {"kind": "constant"}})
    assert cfg.problem.kind == "quadratic" and cfg.problem.a_diag == (1.0,)
    assert cfg.dataset is None
    assert cfg.dynamics.kind == "sgd"
    assert cfg.scheduler.eta0 == 0.01
    assert cfg.horizon == 100 and cfg.seed == 0


def test_problem_and_scheduler_kinds_are_required():
    with pytest.raises(ConfigError) as info:
        parse_experiment_config({})
    text = "; ".join(info.value.problems)
    assert "problem.kind" in text and "scheduler.kind" in text


def test_all_config_problems_reported_at_once():
    with pytest.raises(ConfigError) as info:
        parse_experiment_config({
            "horizon": 0,
            "typo_key": 1,
            "scheduler": {"kind": "bogus", "mistyped": 2},
            "dynamics": {"rho": "fast"},
        })
    text = "; ".join(info.value.problems)
    assert "config.horizon" in text
    assert "config.typo_key" in text and "unknown field" in text
    assert "scheduler.kind" in text
    assert "scheduler.mistyped" in text
    assert "dynamics.rho" in text
    assert len(info.value.problems) >= 5


def test_dataset_section_is_mlp_only():
    with pytest.raises(ConfigError, match="only meaningful"):
        parse_experiment_config({"dataset": {"n": 100}})


def test_mlp_size_constraints():
    with pytest.raises(ConfigError) as info:
        mlp_cfg(dataset={"n": 30, "n_train": 25, "n_val": 10, "n_test": 10},
                batch_size=26)
    text = "; ".join(info.value.problems)
    assert "n_train + n_val + n_test" in text
    assert "batch_size" in text


def test_config_round_trips_through_dict():
    for cfg in (quad_cfg(), mlp_cfg()):
        again = parse_experiment_config(cfg.to_dict())
        assert again == cfg


def test_load_experiment_config_reads_json(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"problem": {"kind": "beale"},
                             "scheduler": {"kind": "constant"},
                             "horizon": 7}))
    assert load_experiment_config(str(p)).horizon == 7


def test_quadratic_constant_run_matches_closed_form():
    trace, summary = run_experiment(quad_cfg())
    # w_t = 0.9^t from w_0 = 1; the trace logs the pre-step loss.
    assert [r.train_loss for r in trace] == [
        pytest.approx(0.5 * 0.9 ** (2 * t), rel=1e-14) for t in range(3)]
    assert all(r.eta == 0.1 for r in trace)
    assert all(math.isnan(r.delta_eta) and math.isnan(r.z_norm) for r in trace)
    assert all(r.wall_ms == 0.0 for r in trace)
    assert summary["final_train_loss"] == pytest.approx(0.5 * 0.9 ** 6, rel=1e-14)
    assert summary["steps_run"] == 3 and not summary["diverged"]
    assert summary["final_eta"] == 0.1 and summary["max_eta"] == 0.1
    assert not summary["hit_zero_eta"]
    assert summary["test_accuracy"] is None
    assert summary["schema"] == "experiment-summary-v1"


def test_summary_config_echo_reparses_to_same_config():
    cfg = mlp_cfg()
    _, summary = run_experiment(cfg)
    assert parse_experiment_config(summary["config"]) == cfg


def test_marthe_adapts_the_rate_through_the_harness():
    trace, summary = run_experiment(mlp_cfg())
    assert trace[0].eta == 0.05  # first step passes eta0 through
    assert any(r.eta != 0.05 for r in trace[1:])
    assert summary["steps_run"] == 12
    assert math.isfinite(summary["best_val_loss"])
    assert 0.0 <= summary["best_val_accuracy"] <= 1.0
    assert summary["test_accuracy"] is not None


def test_hd_is_bitwise_marthe_with_zero_momentum():
    base = mlp_cfg()
    t_hd, s_hd = run_experiment(mlp_cfg(scheduler={"kind": "hd", "eta0": 0.05,
                                                   "beta": 1e-3}))
    t_m0, s_m0 = run_experiment(mlp_cfg(scheduler={"kind": "marthe", "eta0": 0.05,
                                                   "beta": 1e-3, "mu": 0.0}))
    for a, b in zip(t_hd, t_m0):
        assert (a.eta, a.delta_eta, a.train_loss, a.val_loss, a.z_norm) == \
               (b.eta, b.delta_eta, b.train_loss, b.val_loss, b.z_norm)
    assert s_hd["final_train_loss"] == s_m0["final_train_loss"]
    assert base.scheduler.mu == 0.9  # sanity: the mu knob exists and differs


def test_divergent_run_is_reported_not_raised():
    cfg = quad_cfg(problem={"kind": "quadratic", "a_diag": [1.0], "start": [1e300]},
                   scheduler={"kind": "constant", "eta0": 300.0}, horizon=50)
    trace, summary = run_experiment(cfg)
    assert summary["diverged"] and summary["divergence_step"] is not None
    assert summary["steps_run"] < 50
    # metrics at the last finite state may themselves overflow
    assert not math.isfinite(summary["final_train_loss"])
    rendered = json.dumps(_roundtrip_safe(summary))
    assert "NaN" not in rendered and "Infinity" not in rendered


def _roundtrip_safe(summary):
    from hyperlr.harness import _json_safe
    return _json_safe(summary)


def test_early_stopping_counts_flat_epochs():
    cfg = quad_cfg(scheduler={"kind": "constant", "eta0": 0.0},
                   horizon=10 * ANALYTIC_EPOCH_STEPS,
                   patience_epochs=2)
    trace, summary = run_experiment(cfg)
    assert summary["stopped_early"]
    assert summary["steps_run"] == 2 * ANALYTIC_EPOCH_STEPS
    assert summary["final_train_loss"] == 0.5  # nothing moved


def test_eval_cadence_leaves_gaps_as_nan():
    cfg = mlp_cfg(eval_every=5)
    trace, _ = run_experiment(cfg)
    for r in trace:
        assert math.isfinite(r.val_loss) == (r.t % 5 == 0)


def test_wall_time_is_zero_unless_requested():
    t0, _ = run_experiment(mlp_cfg())
    assert all(r.wall_ms == 0.0 for r in t0)
    t1, _ = run_experiment(mlp_cfg(record_wall_time=True))
    assert any(r.wall_ms > 0.0 for r in t1)


def test_trace_csv_is_bitwise_reproducible(tmp_path):
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    emit_trace_csv(run_experiment(mlp_cfg())[0], str(p1))
    emit_trace_csv(run_experiment(mlp_cfg())[0], str(p2))
    assert p1.read_bytes() == p2.read_bytes()
    text = p1.read_text()
    assert text.splitlines()[0] == TRACE_HEADER


def test_trace_csv_round_trip_preserves_values(tmp_path):
    trace, _ = run_experiment(mlp_cfg())
    p = tmp_path / "trace.csv"
    emit_trace_csv(trace, str(p))
    back = read_trace_csv(str(p))
    assert len(back) == len(trace)
    for a, b in zip(trace, back):
        assert a.t == b.t and a.eta == b.eta and a.train_loss == b.train_loss
        assert a.z_norm == b.z_norm or (math.isnan(a.z_norm) and math.isnan(b.z_norm))


def test_trace_csv_header_is_checked(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("t,eta,oops\n0,0.1,1\n")
    with pytest.raises(ValueError, match="header"):
        read_trace_csv(str(p))


def test_summary_json_replaces_nonfinite_with_null(tmp_path):
    p = tmp_path / "summary.json"
    emit_summary_json({"a": float("nan"), "b": float("inf"),
                       "c": np.float64(2.5), "d": [1.0, float("-inf")]}, str(p))
    data = json.loads(p.read_text())
    assert data == {"a": None, "b": None, "c": 2.5, "d": [1.0, None]}


def test_version_string_is_nonempty():
    v = version_string()
    assert isinstance(v, str) and v


def sweep_data(**overrides):
    data = {
        "experiment": {
            "problem": {"kind": "quadratic", "a_diag": [1.0, 2.0], "start": [1.0, 1.0]},
            "scheduler": {"kind": "constant", "eta0": 0.05},
            "horizon": 5,
        },
        "methods": ["marthe", "exponential"],
        "budget_s": 30.0,
        "max_trials": 3,
        "seeds": [0, 1],
        "sweep_seed": 11,
        "patience_epochs": None,
    }
    data.update(overrides)
    return data


def test_sweep_config_validation():
    with pytest.raises(ConfigError) as info:
        parse_sweep_config(sweep_data(methods=["marthe", "sgd"],
                                      beta_log_range=[1e-3, 1e-6],
                                      seeds=[0.5]))
    text = "; ".join(info.value.problems)
    assert "sweep.methods" in text
    assert "beta_log_range" in text
    assert "sweep.seeds" in text
    # experiment problems get forwarded with a prefix
    with pytest.raises(ConfigError, match="experiment config.horizon"):
        parse_sweep_config(sweep_data(experiment={"horizon": -1}))


def test_sweep_draw_sequence_is_deterministic():
    r1 = random_sweep(parse_sweep_config(sweep_data()))
    r2 = random_sweep(parse_sweep_config(sweep_data()))
    for method in ("marthe", "exponential"):
        t1 = r1["methods"][method]["trials"]
        t2 = r2["methods"][method]["trials"]
        assert len(t1) == len(t2) == 3
        assert [t["beta"] for t in t1] == [t["beta"] for t in t2]
        assert [t["mu"] for t in t1] == [t["mu"] for t in t2]
        assert [t["gamma"] for t in t1] == [t["gamma"] for t in t2]
        assert [t["seed"] for t in t1] == [0, 1, 0]  # seeds cycle


def test_sweep_methods_draw_only_their_own_knobs():
    report = random_sweep(parse_sweep_config(sweep_data(max_trials=2)))
    for t in report["methods"]["marthe"]["trials"]:
        assert t["beta"] is not None and t["mu"] is not None and t["gamma"] is None
        assert 1e-6 <= t["beta"] <= 1e-3
        assert 0.9 <= t["mu"] <= 0.999
    for t in report["methods"]["exponential"]["trials"]:
        assert t["beta"] is None and t["mu"] is None
        assert 0.9 <= t["gamma"] <= 1.0


def test_sweep_zero_budget_still_runs_one_trial_per_method():
    report = random_sweep(parse_sweep_config(sweep_data(budget_s=0.0,
                                                        max_trials=None)))
    for method in ("marthe", "exponential"):
        assert report["methods"][method]["n_trials"] == 1
        best = report["methods"][method]["best"]
        assert best["index"] == 0


def test_sweep_best_tracks_the_metric():
    report = random_sweep(parse_sweep_config(sweep_data()))
    for method_report in report["methods"].values():
        trials = method_report["trials"]
        losses = [t["best_val_loss"] for t in trials]
        assert method_report["best"]["best_val_loss"] == min(losses)
        so_far = [t["best_so_far_metric"] for t in trials]
        assert so_far == sorted(so_far)  # monotone nondecreasing


def test_sweep_csv_layout(tmp_path):
    report = random_sweep(parse_sweep_config(sweep_data(max_trials=2)))
    p = tmp_path / "trials.csv"
    emit_sweep_csv(report, str(p))
    lines = p.read_text().splitlines()
    assert lines[0] == SWEEP_CSV_HEADER
    assert len(lines) == 1 + 2 * 2  # two methods, two trials each
    row = lines[1].split(",")
    assert row[0] == "marthe" and row[1] == "0"


def compare_data(**overrides):
    data = {
        "experiment": {
            "problem": {"kind": "beale"},
            "scheduler": {"kind": "constant", "eta0": 1e-3},
            "horizon": 20,
        },
        "methods": ["hd", "rtho"],
        "beta_grid": [1e-6, 1e-5],
        "seeds": [0],
    }
    data.update(overrides)
    return data


def test_compare_config_log_grid():
    data = compare_data(beta_grid=None,
                        beta_grid_log={"lo": 1e-6, "hi": 1e-2, "num": 5})
    del data["beta_grid"]
    ccfg = parse_compare_config(data)
    assert len(ccfg.beta_grid) == 5
    assert ccfg.beta_grid[0] == pytest.approx(1e-6)
    assert ccfg.beta_grid[-1] == pytest.approx(1e-2)
    ratios = np.diff(np.log(np.array(ccfg.beta_grid)))
    assert np.allclose(ratios, ratios[0])


def test_compare_config_requires_a_grid():
    data = compare_data()
    del data["beta_grid"]
    with pytest.raises(ConfigError, match="beta grid is required"):
        parse_compare_config(data)


def test_compare_runs_full_grid():
    rows = compare_methods(parse_compare_config(compare_data()))
    assert len(rows) == 4  # 2 methods x 2 betas x 1 seed
    assert {(r["method"], r["beta"]) for r in rows} == {
        ("hd", 1e-6), ("hd", 1e-5), ("rtho", 1e-6), ("rtho", 1e-5)}
    for r in rows:
        assert r["steps_run"] == 20 and not r["diverged"]
        assert r["best_objective"] <= r["final_objective"] + 1e-15
        assert r["mu"] is None


def test_compare_schedule_methods_skip_beta(tmp_path):
    rows = compare_methods(parse_compare_config(compare_data(
        methods=["constant"])))
    assert len(rows) == 1 and rows[0]["beta"] is None
    p = tmp_path / "compare.csv"
    emit_compare_csv(rows, str(p))
    lines = p.read_text().splitlines()
    assert lines[0] == COMPARE_CSV_HEADER
    assert lines[1].startswith("constant,,")  # empty beta cell


def test_schedule_search_improves_on_tiny_quadratic(tmp_path):
    data = {
        "experiment": {
            "problem": {"kind": "quadratic", "a_diag": [1.0], "start": [1.0]},
            "scheduler": {"kind": "constant", "eta0": 0.05},
            "horizon": 5,
        },
        "hyper_steps": 40,
        "hyper_lr": 0.2,
    }
    result = run_schedule_search(parse_schedule_search_config(data))
    assert result["schema"] == "schedule-search-v1"
    assert len(result["schedule"]) == 5
    assert len(result["history"]) == 40
    assert result["diverged_iterations"] == 0
    assert result["final_val_loss"] < result["history"][0]
    assert all(e >= 0.0 for e in result["schedule"])
    emit_schedule_csv(result["schedule"], str(tmp_path / "schedule.csv"))
    emit_history_csv(result["history"], str(tmp_path / "history.csv"))
    sched_lines = (tmp_path / "schedule.csv").read_text().splitlines()
    assert sched_lines[0] == "t,eta" and len(sched_lines) == 6
    hist_lines = (tmp_path / "history.csv").read_text().splitlines()
    assert hist_lines[0] == "iteration,objective" and len(hist_lines) == 41


def test_schedule_search_config_validation():
    with pytest.raises(ConfigError, match="hyper_lr"):
        parse_schedule_search_config({"experiment": {}, "hyper_lr": -0.5})
