"""Acceptance suite: every criterion at its stated tolerance, one printed
pass/fail line each.

The closed-loop criteria share one run matrix (all bundled scenarios at
seeds 1..3, plus forced grand/singles runs of case1_a), so the whole
module reruns the simulator only once per (scenario, seed, mode).  Expect
several minutes of wall time.
"""

import math
import time
from itertools import combinations

import numpy as np
import pytest

from coopmerge.coalition import shapley_allocation
from coopmerge.costs import (
    CostWeights,
    LaneModel,
    MotionLimits,
    safety_cost,
)
from coopmerge.dynamics import (
    ControlInput,
    VehicleParams,
    VehicleState,
    discretize,
    linearize,
)
from coopmerge.errors import SimulationAbort
from coopmerge.prediction import (
    Horizon,
    build_augmented,
    build_prediction_operator,
    predict,
    rollout,
)
from coopmerge.scenario import load_bundled
from coopmerge.simulation import run_closed_loop

BUNDLED = ("case1_a", "case1_b", "case2_a", "case2_b", "case2_c")
SEEDS = (1, 2, 3)


def report(criterion: str, ok: bool, detail: str = ""):
    tag = "PASS" if ok else "FAIL"
    print(f"[{tag}] {criterion}" + (f" - {detail}" if detail else ""))
    assert ok, f"{criterion}: {detail}"


@pytest.fixture(scope="module")
def auto_runs():
    """Closed-loop traces for every bundled scenario and seed (auto mode)."""
    out = {}
    for name in BUNDLED:
        for seed in SEEDS:
            s = load_bundled(name).with_overrides(seed=seed)
            try:
                out[(name, seed)] = run_closed_loop(s) + (None,)
            except SimulationAbort as exc:
                out[(name, seed)] = (exc.trace, None, str(exc))
    return out


@pytest.fixture(scope="module")
def forced_runs():
    """case1_a under forced grand and forced single-player structures."""
    out = {}
    for seed in SEEDS:
        for mode in ("grand", "singles"):
            s = load_bundled("case1_a").with_overrides(seed=seed, mode=mode)
            out[(mode, seed)] = run_closed_loop(s)
    return out


def random_linearization_point(rng):
    state = VehicleState(
        vx=rng.uniform(5.0, 30.0),
        vy=rng.uniform(-2.0, 2.0),
        r=rng.uniform(-0.3, 0.3),
        phi=rng.uniform(-0.5, 0.5),
        X=rng.uniform(0.0, 100.0),
        Y=rng.uniform(-6.0, 6.0),
    )
    u = ControlInput(rng.uniform(-4.0, 4.0), rng.uniform(-0.3, 0.3))
    return state, u


class TestCriterion1Discretization:
    def test_matches_substep_integration(self):
        """(Ad, Bd) of 100 random points vs a 1000-substep RK4 oracle."""
        p = VehicleParams()
        rng = np.random.default_rng(101)
        t0 = time.perf_counter()
        worst = 0.0
        for _ in range(100):
            state, u = random_linearization_point(rng)
            A, B = linearize(state, u, p)
            Ad, Bd = discretize(A, B, 0.1)
            x = rng.uniform(-1.0, 1.0, 6)
            uv = rng.uniform(-1.0, 1.0, 2)
            y = x.copy()
            h = 0.1 / 1000
            for _ in range(1000):
                k1 = A @ y + B @ uv
                k2 = A @ (y + 0.5 * h * k1) + B @ uv
                k3 = A @ (y + 0.5 * h * k2) + B @ uv
                k4 = A @ (y + h * k3) + B @ uv
                y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            worst = max(worst, float(np.max(np.abs(Ad @ x + Bd @ uv - y))))
        elapsed = time.perf_counter() - t0
        report(
            "criterion 1 (discretization oracle)",
            worst < 1e-8 and elapsed < 5.0,
            f"max elementwise err {worst:.2e}, runtime {elapsed:.2f}s",
        )


class TestCriterion2PredictionStacking:
    def test_stacked_equals_recursive(self):
        """Stacked horizon map vs recursive rollout, 100 instances, Np=5 Nc=2."""
        p = VehicleParams()
        h = Horizon(5, 2)
        rng = np.random.default_rng(202)
        t0 = time.perf_counter()
        worst = 0.0
        for _ in range(100):
            state, u = random_linearization_point(rng)
            A, B = linearize(state, u, p)
            Ad, Bd = discretize(A, B, 0.1)
            atil, btil, ctil = build_augmented(Ad, Bd)
            op = build_prediction_operator(atil, btil, ctil, h)
            theta = rng.normal(size=8)
            du = rng.uniform(-0.1, 0.1, size=(2, 2))
            stacked = predict(op, theta, du)
            recursive = rollout(atil, btil, ctil, theta, du, 5)
            worst = max(worst, float(np.max(np.abs(stacked - recursive))))
        elapsed = time.perf_counter() - t0
        report(
            "criterion 2 (prediction stacking oracle)",
            worst < 1e-10 and elapsed < 5.0,
            f"max err {worst:.2e}, runtime {elapsed:.2f}s",
        )


class TestCriterion3Jacobians:
    def test_analytic_matches_finite_differences(self):
        from tests.test_dynamics import fd_jacobians

        p = VehicleParams()
        rng = np.random.default_rng(303)
        worst = 0.0
        for _ in range(50):
            state, u = random_linearization_point(rng)
            A, B = linearize(state, u, p)
            A_fd, B_fd = fd_jacobians(state, u, p)
            worst = max(
                worst,
                float(np.max(np.abs(A - A_fd) / (1.0 + np.abs(A_fd)))),
                float(np.max(np.abs(B - B_fd) / (1.0 + np.abs(B_fd)))),
            )
        report(
            "criterion 3 (jacobian finite-difference check)",
            worst < 1e-5,
            f"worst relative error {worst:.2e}",
        )


class TestCriterion4Shapley:
    def test_shapley_suite(self):
        worked = {
            frozenset(["a"]): 10.0,
            frozenset(["b"]): 12.0,
            frozenset(["c"]): 14.0,
            frozenset(["a", "b"]): 20.0,
            frozenset(["a", "c"]): 22.0,
            frozenset(["b", "c"]): 24.0,
            frozenset(["a", "b", "c"]): 30.0,
        }
        q = shapley_allocation(worked, ["a", "b", "c"])
        worked_ok = (
            abs(q["a"] - 8.0) < 1e-12
            and abs(q["b"] - 10.0) < 1e-12
            and abs(q["c"] - 12.0) < 1e-12
        )

        rng = np.random.default_rng(404)
        eff_ok = sym_ok = dummy_ok = True
        for _ in range(50):
            keys = ["p", "q", "d"]
            single = rng.uniform(1.0, 40.0)
            gain = rng.uniform(0.0, single)
            dummy = rng.uniform(1.0, 40.0)
            values = {
                frozenset(["p"]): single,
                frozenset(["q"]): single,
                frozenset(["d"]): dummy,
                frozenset(["p", "q"]): 2 * single - gain,
                frozenset(["p", "d"]): single + dummy,
                frozenset(["q", "d"]): single + dummy,
                frozenset(["p", "q", "d"]): 2 * single - gain + dummy,
            }
            alloc = shapley_allocation(values, keys)
            eff_ok &= abs(sum(alloc.values()) - values[frozenset(keys)]) < 1e-9
            sym_ok &= abs(alloc["p"] - alloc["q"]) < 1e-9
            dummy_ok &= abs(alloc["d"] - dummy) < 1e-9
        report(
            "criterion 4 (shapley: worked game, efficiency, symmetry, dummy)",
            worked_ok and eff_ok and sym_ok and dummy_ok,
            f"worked={q}",
        )


class TestCriterion5CostIdentities:
    def test_activation_pattern(self):
        rng = np.random.default_rng(505)
        ok = True
        for _ in range(200):
            j_log, j_lat, j_lk, j_lc = rng.uniform(0.001, 10.0, size=4)
            keep = safety_cost(0, j_log, j_lat, j_lk, j_lc)
            change = safety_cost(-1, j_log, j_lat, j_lk, j_lc)
            ok &= keep == j_log + j_lk + j_lc  # lateral term exactly absent
            ok &= change == j_lat + j_lc  # longitudinal/lane-keeping absent
        report("criterion 5 (safety-cost activation identities)", ok)


def window_with_subs(summary, required_subs):
    """Timeline steps whose sub-coalition structure contains the given
    member tuples (the merge-decision window of the case-2 setups)."""
    steps = []
    for e in summary.coalition_timeline:
        subs = {tuple(sc) for g in e["partition"] for sc in g}
        if all(tuple(r) in subs for r in required_subs):
            steps.append(e)
    return steps


class TestCriterion6TableThreeRelations:
    def test_scenario_a_grand_dominates(self, forced_runs):
        details = []
        ok = True
        for seed in SEEDS:
            _, grand = forced_runs[("grand", seed)]
            _, singles = forced_runs[("singles", seed)]
            total_ok = grand.totals["rms_lambda_sum"] <= singles.totals["rms_lambda_sum"]
            per_ok = all(
                grand.per_vehicle[v]["rms_lambda"] <= singles.per_vehicle[v]["rms_lambda"]
                for v in ("V1", "V2", "V3")
            )
            ok &= total_ok and per_ok
            details.append(
                f"seed {seed}: grand sum {grand.totals['rms_lambda_sum']:.2f} vs "
                f"singles {singles.totals['rms_lambda_sum']:.2f}, per-vehicle {per_ok}"
            )
        report("criterion 6a (case1_a grand dominates single-player)", ok, "; ".join(details))

    def test_scenario_b_aggressive_merger_excluded(self, auto_runs):
        details = []
        ok = True
        for seed in SEEDS:
            trace, summary, abort = auto_runs[("case1_b", seed)]
            if summary is None:
                ok = False
                details.append(f"seed {seed}: aborted ({abort})")
                continue
            hits = 0
            for e in summary.coalition_timeline:
                sh, st = e.get("shapley", {}), e.get("standalone", {})
                if "V1" in sh and sh["V1"] > st["V1"] and "V1" in e["defectors"]:
                    groups = [
                        {m for sc in g for m in sc} for g in e["partition"]
                    ]
                    alone = any(g == {"V1"} for g in groups)
                    if alone:
                        hits += 1
            ok &= hits >= 1
            details.append(f"seed {seed}: V1 excluded with Q>J at {hits} steps")
        report(
            "criterion 6b (case1_b allocation exceeds standalone; V1 excluded)",
            ok,
            "; ".join(details),
        )


class TestCriterion7CaseTwoPartitions:
    def test_scenario_a_grand_with_subs(self, auto_runs):
        details, ok = [], True
        for seed in SEEDS:
            _, summary, abort = auto_runs[("case2_a", seed)]
            if summary is None:
                ok = False
                details.append(f"seed {seed}: aborted ({abort})")
                continue
            window = window_with_subs(summary, [("V1", "V4"), ("V3", "V5")])
            grand_steps = [e for e in window if len(e["partition"]) == 1]
            ok_seed = len(window) > 0 and len(grand_steps) >= len(window) / 2
            ok &= ok_seed
            details.append(f"seed {seed}: grand in {len(grand_steps)}/{len(window)} window steps")
        report(
            "criterion 7a (case2_a grand coalition with sub-coalitions)", ok, "; ".join(details)
        )

    def test_scenario_b_aggressive_pair_breaks_away(self, auto_runs):
        details, ok = [], True
        for seed in SEEDS:
            _, summary, abort = auto_runs[("case2_b", seed)]
            if summary is None:
                ok = False
                details.append(f"seed {seed}: aborted ({abort})")
                continue
            window = window_with_subs(summary, [("V1", "V4"), ("V3", "V5")])
            split_steps = []
            for e in window:
                groups = [{m for sc in g for m in sc} for g in e["partition"]]
                if {"V3", "V5"} in groups and any({"V1", "V4"} <= g and "V2" in g for g in groups):
                    split_steps.append(e)
            ok_seed = len(window) > 0 and len(split_steps) >= len(window) / 2
            ok &= ok_seed
            details.append(f"seed {seed}: split in {len(split_steps)}/{len(window)} window steps")
        report(
            "criterion 7b (case2_b {V3,V5} apart, {V1,V4}+V2 together)", ok, "; ".join(details)
        )

    def test_scenario_c_full_split_and_conservative_v2(self, auto_runs):
        details, ok = [], True
        for seed in SEEDS:
            trace, summary, abort = auto_runs[("case2_c", seed)]
            if summary is None:
                ok = False
                details.append(f"seed {seed}: aborted ({abort})")
                continue
            window = window_with_subs(summary, [("V1", "V4"), ("V3", "V5")])
            split_steps = [e for e in window if len(e["partition"]) == 3]
            v2_rows = trace.rows_for("V2")
            never_changes = all(r.beta == 0 for r in v2_rows)
            decelerates = min(r.vx for r in v2_rows) < v2_rows[0].vx - 0.5
            ok_seed = (
                len(window) > 0
                and len(split_steps) >= len(window) / 2
                and never_changes
                and decelerates
            )
            ok &= ok_seed
            details.append(
                f"seed {seed}: split {len(split_steps)}/{len(window)}, "
                f"V2 no-change={never_changes}, decel={decelerates}"
            )
        report(
            "criterion 7c (case2_c full split; conservative V2 slows, keeps lane)",
            ok,
            "; ".join(details),
        )


class TestCriterion8Safety:
    def test_no_negative_gaps_and_action_bounds(self, auto_runs):
        lim = MotionLimits()
        vp = VehicleParams()
        details, ok = [], True
        for (name, seed), (trace, summary, abort) in sorted(auto_runs.items()):
            if summary is None:
                ok = False
                details.append(f"{name}/{seed}: aborted ({abort})")
                continue
            s = load_bundled(name)
            by_t = {}
            for r in trace.rows:
                by_t.setdefault(r.t, []).append(r)
            min_gap = math.inf
            for rows in by_t.values():
                for i, a in enumerate(rows):
                    for b in rows[i + 1:]:
                        gap = max(
                            abs(a.X - b.X) - vp.length,
                            abs(a.Y - b.Y) - s.collision_width,
                        )
                        min_gap = min(min_gap, gap)
            bounds_ok = True
            for vid in {r.vehicle_id for r in trace.rows}:
                rows = trace.rows_for(vid)
                prev_ax, prev_df = 0.0, 0.0
                for r in rows:
                    bounds_ok &= abs(r.ax) <= lim.ax_max + 1e-9
                    bounds_ok &= abs(r.delta_f) <= lim.delta_f_max + 1e-9
                    bounds_ok &= abs(r.ax - prev_ax) <= lim.dax_max + 1e-9
                    bounds_ok &= abs(r.delta_f - prev_df) <= lim.ddelta_f_max + 1e-9
                    bounds_ok &= r.beta * (r.beta + 1) == 0
                    prev_ax, prev_df = r.ax, r.delta_f
            ok &= min_gap >= 0.0 and bounds_ok
            if min_gap < 0.0 or not bounds_ok:
                details.append(f"{name}/{seed}: min gap {min_gap:.3f}, bounds {bounds_ok}")
        report(
            "criterion 8 (no negative gaps; applied actions within bounds)",
            ok,
            "; ".join(details) or "all runs clean",
        )


class TestCriterion9Determinism:
    def test_byte_identical_traces(self):
        details, ok = [], True
        for name in BUNDLED:
            s = load_bundled(name).with_overrides(duration=2.0)
            t1, _ = run_closed_loop(s)
            t2, _ = run_closed_loop(s)
            same = t1.to_csv_string() == t2.to_csv_string()
            ok &= same
            if name == "case1_a":
                from dataclasses import replace

                s_par = replace(s, solver=replace(s.solver, workers=4))
                t3, _ = run_closed_loop(s_par)
                par_same = t1.to_csv_string() == t3.to_csv_string()
                ok &= par_same
                details.append(f"{name}: serial repeat {same}, workers=4 {par_same}")
        report("criterion 9 (byte-identical traces, incl. parallel)", ok, "; ".join(details))


class TestCriterion10ComputeTime:
    def test_mean_step_time(self, auto_runs):
        details, ok = [], True
        for (name, seed), (_, summary, _) in sorted(auto_runs.items()):
            if summary is None:
                continue
            mean_t = summary.solver["mean_step_time_s"]
            ok &= mean_t <= 0.5
            details.append(f"{name}/{seed}: {mean_t:.3f}s")
        report("criterion 10 (mean per-step solve time <= 0.5 s)", ok, "; ".join(details))
