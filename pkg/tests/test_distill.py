import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from capnav.dataset import REACHED, TERMINAL, check_terminal_flags
from capnav.distill import (
    G_MAX,
    ExpertUnusableError,
    IterationReport,
    MixPlan,
    capability_gap,
    collect_offline,
    compute_gap,
    compute_proportions,
    dagger_collect,
    evaluation_suite,
    iterate,
    make_student,
    pretrain_student,
    read_reports,
    uniform_plan,
)
from capnav.evalbench import run_benchmark
from capnav.rlexpert import ExpertPolicy
from capnav.world import TRAINING_CAPABILITIES, Capability
from scripted import Frozen, GoalSeeker, experts, open_field_config

CAPS = [c.value for c in TRAINING_CAPABILITIES]
gap_value = st.floats(0.1, 1e3, allow_nan=False)


# -- gaps ---------------------------------------------------------------------


def test_gap_examples():
    assert compute_gap(60, 40) == pytest.approx(0.6)
    assert compute_gap(30, 40) == pytest.approx(0.1)
    assert compute_gap(math.inf, 40) == G_MAX + 0.1


def test_gap_domain_errors():
    for bad in (0.0, -1.0, math.inf, math.nan):
        with pytest.raises(ValueError):
            compute_gap(50, bad)
    with pytest.raises(ValueError):
        compute_gap(math.nan, 40)


def test_capability_gap_with_failing_expert():
    assert capability_gap(50.0, math.inf) == 0.1
    assert capability_gap(60.0, 40.0) == compute_gap(60.0, 40.0)


@given(st.floats(0.01, 1e4), st.floats(0.01, 1e4))
def test_gap_floor(w_vla, w_rl):
    g = compute_gap(w_vla, w_rl)
    assert g >= 0.1
    if w_vla <= w_rl:
        assert g == 0.1


# -- proportions ----------------------------------------------------------------


def test_proportion_examples():
    p = compute_proportions(dict(zip(CAPS, (0.1, 0.1, 0.1)))).proportions
    assert all(abs(v - 1 / 3) < 1e-12 for v in p.values())
    p = compute_proportions(dict(zip(CAPS, (0.6, 0.1, 0.1)))).proportions
    assert p["reaching"] == pytest.approx(0.46117348980303791167, abs=1e-12)
    assert p["squeezing"] == pytest.approx(0.26941325509848104416, abs=1e-12)


def test_proportions_with_sentinel_gap():
    p = compute_proportions(dict(zip(CAPS, (G_MAX + 0.1, 0.1, 0.1)))).proportions
    assert abs(sum(p.values()) - 1) < 1e-12
    assert p["reaching"] > 0.9


def test_uniform_plan():
    assert uniform_plan(TRAINING_CAPABILITIES).proportions == {c: 1 / 3 for c in CAPS}


def test_bad_gaps_rejected():
    with pytest.raises(ValueError):
        compute_proportions({})
    with pytest.raises(ValueError):
        compute_proportions({"reaching": 0.0, "squeezing": 1.0})


@given(st.tuples(gap_value, gap_value, gap_value))
def test_proportions_normalize(gaps):
    p = compute_proportions(dict(zip(CAPS, gaps))).proportions
    assert abs(sum(p.values()) - 1.0) < 1e-9
    assert all(v > 0 for v in p.values())


@given(st.tuples(gap_value, gap_value, gap_value), st.floats(1e-3, 1e3))
def test_proportions_scale_invariant(gaps, c):
    a = compute_proportions(dict(zip(CAPS, gaps))).proportions
    b = compute_proportions(dict(zip(CAPS, [g * c for g in gaps]))).proportions
    assert all(abs(a[k] - b[k]) < 1e-12 for k in CAPS)


@given(st.tuples(gap_value, gap_value, gap_value), st.integers(0, 2), st.floats(1.01, 10))
def test_proportions_monotone(gaps, k, factor):
    a = compute_proportions(dict(zip(CAPS, gaps))).proportions
    raised = list(gaps)
    raised[k] *= factor
    b = compute_proportions(dict(zip(CAPS, raised))).proportions
    assert b[CAPS[k]] > a[CAPS[k]]
    assert all(b[c] < a[c] for i, c in enumerate(CAPS) if i != k)


@given(gap_value, gap_value)
def test_smoothing_pulls_toward_uniform(a, b):
    assume(a > b * (1 + 1e-9))
    smooth = compute_proportions({"reaching": a, "squeezing": b}, alpha=0.3).proportions
    raw = compute_proportions({"reaching": a, "squeezing": b}, alpha=1.0).proportions
    assert smooth["reaching"] / smooth["squeezing"] < raw["reaching"] / raw["squeezing"]


# -- offline collection ------------------------------------------------------------


def test_offline_collection_keeps_only_successes():
    cfg = open_field_config()
    data = collect_offline(experts(), cfg, seed=0, total_steps=600)
    rec = data.records
    per_cap = {c: int(np.sum(rec["capability"] == Capability(c).code)) for c in CAPS}
    assert all(n >= 200 for n in per_cap.values())
    assert check_terminal_flags(data) is None
    for ep in np.unique(rec["episode"]):
        rows = rec[rec["episode"] == ep]
        last = rows[np.argmax(rows["step"])]
        assert last["flags"] == TERMINAL | REACHED
        # the stored goal is before the final step, so it is at most one stride outside the radius
        assert np.linalg.norm(last["goal_rel"]) <= 0.5 + 0.15 + 1e-9
        assert np.array_equal(np.sort(rows["step"]), np.arange(len(rows)))
    fovs = np.array(list(data.fovs.values()))
    assert set(data.fovs) == set(np.unique(rec["episode"]).tolist())
    assert np.all((fovs >= 100) & (fovs <= 140))


def test_offline_collection_is_deterministic():
    cfg = open_field_config()
    a = collect_offline(experts(), cfg, seed=3, total_steps=150)
    b = collect_offline(experts(), cfg, seed=3, total_steps=150)
    assert a.records.tobytes() == b.records.tobytes()


class _Idle(GoalSeeker):
    def act(self, obs):
        mean, value, hist = super().act(obs)
        return np.zeros_like(mean), value, hist


def test_useless_expert_is_rejected():
    cfg = open_field_config(timeout=0.5)
    cfg.distill.expert_check_episodes = 16
    with pytest.raises(ExpertUnusableError, match="reaching"):
        collect_offline({Capability.REACHING: _Idle()}, cfg, seed=0, total_steps=100)


# -- DAgger ----------------------------------------------------------------------


def test_single_capability_plan_collects_only_that_capability():
    cfg = open_field_config()
    plan = MixPlan({"reaching": 1.0, "squeezing": 0.0, "avoiding": 0.0}, 0.3)
    data = dagger_collect(Frozen((0.5, 0, 0)), experts(), plan, cfg, seed=1, budget=100)
    assert len(data) > 0
    assert set(np.unique(data.capabilities()).tolist()) == {Capability.REACHING.code}


@pytest.mark.parametrize("props", [(0.5, 0.3, 0.2), (0.2, 0.2, 0.6)])
def test_budget_split_within_one_episode(props):
    cfg = open_field_config(timeout=3.0)  # a parked student times out after exactly 30 steps
    plan = MixPlan(dict(zip(CAPS, props)), 0.3)
    budget = 1000
    data = dagger_collect(Frozen(), experts(), plan, cfg, seed=2, budget=budget,
                          mean_lengths={c: 30.0 for c in CAPS})
    for c, p in zip(CAPS, props):
        n = int(np.sum(data.capabilities() == Capability(c).code))
        assert abs(n - p * budget) <= 30


def test_dagger_logs_student_actions_and_expert_labels():
    cfg = open_field_config(timeout=2.0)
    cfg.sensing.rays = 32
    student = make_student(cfg, seed=0)
    expert = ExpertPolicy(32, 8, (16, 8), seed=1)
    trace = []
    plan = MixPlan({"reaching": 1.0}, 0.3)
    data = dagger_collect(student, {Capability.REACHING: expert}, plan, cfg, seed=4, budget=20,
                          mean_lengths={"reaching": 20.0}, trace=trace)
    assert len(trace) == len(data) > 0
    for row in trace:
        executed = student.act(row["fine"][None], row["coarse"][None], row["goal"][None])[0]
        assert np.array_equal(row["executed"], executed)
        label = expert.act({"depth": row["depth"][None], "last_action": row["last_action"][None],
                            "goal": row["goal"][None], "history": row["history"][None]})[0][0]
        assert np.array_equal(row["label"], label)
    # every visited state carries exactly one label, in visiting order per episode
    stored = {(float(r["timestamp"]), r["fine"].tobytes()) for r in data.records}
    assert len(stored) == len(data)
    assert np.allclose(np.sort(data.records["expert_action"], axis=0),
                       np.sort(np.array([r["label"] for r in trace]), axis=0))


def test_history_restarts_each_episode():
    cfg = open_field_config(timeout=1.0)
    trace = []
    dagger_collect(Frozen(), {Capability.REACHING: GoalSeeker()}, MixPlan({"reaching": 1.0}, 0.3), cfg,
                   seed=5, budget=40, mean_lengths={"reaching": 10.0}, trace=trace)
    starts = [r for r in trace if not r["last_action"].any() and r["history"][0] == 0]
    assert len(starts) == 4  # four 10-step episodes, each starting from an empty token


# -- aggregation loop ---------------------------------------------------------------


def test_report_json_round_trip():
    rep = IterationReport(1, {"reaching": {"sr": 0.0, "cr": 0.0, "wtt": math.inf}}, {}, {}, {"reaching": G_MAX + 0.1},
                          {"reaching": 1.0}, {"reaching": 10}, 10, 10, 0.0, False, [0.5])
    back = IterationReport.from_json(rep.to_json())
    assert back == rep


def test_iterate_fixed_point_gives_equal_ratio_and_stops(tmp_path):
    cfg = open_field_config()
    cfg.distill.iter_steps = 90
    cfg.distill.max_iterations = 5
    cfg.distill.lr = 0.0  # the student cannot change, so its metrics stay equal to the experts'
    data = collect_offline(experts(), cfg, seed=0, total_steps=300)
    student, _ = pretrain_student(data, cfg, seed=0)
    suite = evaluation_suite(cfg, TRAINING_CAPABILITIES, 0)
    same = run_benchmark(student, suite, cfg, 1)
    _, reports, agg = iterate(student, experts(), cfg, 0, data, out_dir=tmp_path, suite=suite, expert_metrics=same)
    assert len(reports) == 2 and reports[-1].converged
    for rep in reports:
        assert all(g == pytest.approx(0.1, abs=0) for g in rep.gaps.values())
        assert all(abs(p - 1 / 3) < 1e-9 for p in rep.proportions.values())
    assert len(agg) == len(data) + sum(sum(r.new_steps.values()) for r in reports)
    assert read_reports(tmp_path / "iterations.jsonl") == reports


def test_uniform_ablation_ignores_gaps():
    cfg = open_field_config()
    cfg.distill.iter_steps = 60
    data = collect_offline(experts(), cfg, seed=1, total_steps=150)
    student, _ = pretrain_student(data, cfg, seed=1)
    _, reports, _ = iterate(student, experts(), cfg, 1, data, balanced=False, max_iterations=1)
    assert reports[0].proportions == {c: 1 / 3 for c in CAPS}
