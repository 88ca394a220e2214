"""Coalition solver: characteristic values, lane-choice enumeration,
seeded-search determinism, bound projection, and the compiled objective
against its numpy reference."""

import numpy as np
import pytest

from coopmerge.costs import (
    MODERATE,
    CostWeights,
    LaneModel,
    MotionLimits,
    NormalizationRanges,
    PotentialFieldParams,
)
from coopmerge.dynamics import ControlInput, VehicleParams, VehicleState, linearize_and_discretize
from coopmerge.errors import Infeasible
from coopmerge.optimizer import (
    CharacteristicParams,
    DecisionAction,
    MemberSpec,
    SolveContext,
    SolverConfig,
    VehicleSnapshot,
    _CoalitionObjective,
    characteristic_value,
    enumerate_beta,
    fallback_action,
    receding_horizon_apply,
    solve_coalition,
)
from coopmerge.prediction import Horizon, build_augmented, build_prediction_operator

LANES = LaneModel()
HORIZON = Horizon(5, 2)
DT = 0.1
VP = VehicleParams()


def make_snapshot(vid, lane, x, vx, profile=MODERATE, is_player=True, y=None):
    y = LANES.center_y(lane) if y is None else y
    return VehicleSnapshot(
        vehicle_id=vid,
        state=VehicleState(vx, 0.0, 0.0, 0.0, x, y),
        control=ControlInput(0.0, 0.0),
        lane=lane,
        profile=profile if is_player else None,
        is_player=is_player,
    )


def make_context(snaps, wall=200.0, **overrides):
    operators = {}
    for vid, s in snaps.items():
        if s.is_player:
            model = linearize_and_discretize(s.state, s.control, VP, DT)
            operators[vid] = build_prediction_operator(
                *build_augmented(model.Ad, model.Bd), HORIZON
            )
    kwargs = dict(
        vehicles=snaps,
        lane_model=LANES,
        horizon=HORIZON,
        dt=DT,
        weights=CostWeights(),
        pf=PotentialFieldParams(),
        norm=NormalizationRanges(),
        limits=MotionLimits(),
        cparams=CharacteristicParams(),
        vparams=VP,
        operators=operators,
        ramp_wall_x=wall,
    )
    kwargs.update(overrides)
    return SolveContext(**kwargs)


def case1_context():
    snaps = {
        "V1": make_snapshot("V1", 3, 12.0, 18.0),
        "V2": make_snapshot("V2", 2, 10.0, 19.0),
        "V3": make_snapshot("V3", 1, 8.0, 20.0),
        "LV1": make_snapshot("LV1", 3, 62.0, 26.0, is_player=False),
        "LV2": make_snapshot("LV2", 2, 70.0, 26.0, is_player=False),
        "LV3": make_snapshot("LV3", 1, 68.0, 26.0, is_player=False),
    }
    return make_context(snaps)


class TestCharacteristicValue:
    def test_all_zero(self):
        cp = CharacteristicParams()
        actions = [DecisionAction(0.0, 0.0, 0)] * 2
        assert characteristic_value(np.zeros(5), actions, cp) == 0.0

    def test_single_step_squared(self):
        cp = CharacteristicParams(q=1.0, r_diag=(0.0, 0.0, 0.0))
        assert characteristic_value(np.array([2.0]), [], cp) == pytest.approx(4.0)

    def test_monotone_in_cost_and_effort(self):
        cp = CharacteristicParams(q=1.0, r_diag=(1.0, 1.0, 0.5))
        base = characteristic_value(np.array([1.0, 2.0]), [DecisionAction(0.05, 0.001, 0)], cp)
        bigger_cost = characteristic_value(
            np.array([1.0, 3.0]), [DecisionAction(0.05, 0.001, 0)], cp
        )
        bigger_effort = characteristic_value(
            np.array([1.0, 2.0]), [DecisionAction(0.1, 0.001, -1)], cp
        )
        assert bigger_cost > base
        assert bigger_effort > base


class TestEnumerateBeta:
    def test_two_authorized_players(self):
        ctx = case1_context()
        members = [MemberSpec("V1"), MemberSpec("V2"), MemberSpec("V3")]
        assignments = enumerate_beta(members, ctx)
        assert len(assignments) == 4
        assert all(a["V3"] == 0 for a in assignments)
        assert {(a["V1"], a["V2"]) for a in assignments} == {(0, 0), (0, -1), (-1, 0), (-1, -1)}

    def test_leftmost_lane_has_no_choice(self):
        ctx = case1_context()
        assert enumerate_beta([MemberSpec("V3")], ctx) == [{"V3": 0}]

    def test_target_lane_of_merger(self):
        ctx = case1_context()
        snap = ctx.vehicles["V1"]
        assert snap.lane + (-1) == 2

    def test_active_change_suspends_choice(self):
        snaps = {"V2": make_snapshot("V2", 2, 10.0, 19.0)}
        snaps["V2"] = VehicleSnapshot(
            "V2", snaps["V2"].state, snaps["V2"].control, 2, MODERATE, change_active=True
        )
        ctx = make_context(snaps)
        assert enumerate_beta([MemberSpec("V2")], ctx) == [{"V2": 0}]


class TestKernelAgainstReference:
    def test_objective_matches_numpy(self):
        ctx = case1_context()
        members = [MemberSpec("V1"), MemberSpec("V2"), MemberSpec("V3")]
        for betas in ({"V1": 0, "V2": 0, "V3": 0}, {"V1": -1, "V2": 0, "V3": 0},
                      {"V1": -1, "V2": -1, "V3": 0}):
            obj = _CoalitionObjective(ctx, members, betas, 1e4)
            rng = np.random.default_rng(42)
            du = rng.uniform(obj.lower, obj.upper, size=(64, obj.dim))
            fast, lam_f, exc_f, _ = obj.evaluate(du)
            ref, lam_r, exc_r, _ = obj.evaluate_reference(du)
            assert np.allclose(fast, ref, rtol=1e-9, atol=1e-9)
            assert np.allclose(exc_f, exc_r, rtol=1e-9, atol=1e-12)


class TestSolveCoalition:
    def test_equilibrium_stays_put(self):
        # alone at the attainable speed, centered: doing nothing is optimal
        snaps = {"V2": make_snapshot("V2", 2, 10.0, 30.0)}
        ctx = make_context(snaps)
        res = solve_coalition(ctx, [MemberSpec("V2")], SolverConfig(), (0,))
        assert res.feasible
        assert res.betas == {"V2": 0}
        assert res.total == pytest.approx(0.0, abs=1e-12)
        for a in res.sequences["V2"]:
            assert a.da_x == 0.0 and a.ddelta_f == 0.0

    def test_bit_identical_given_seed(self):
        ctx = case1_context()
        members = [MemberSpec("V1"), MemberSpec("V2"), MemberSpec("V3")]
        a = solve_coalition(ctx, members, SolverConfig(), (1, 4, 7))
        b = solve_coalition(ctx, members, SolverConfig(), (1, 4, 7))
        assert np.array_equal(a.du_flat, b.du_flat)
        assert a.total == b.total and a.betas == b.betas
        assert a.lambdas == b.lambdas

    def test_thread_count_does_not_change_result(self):
        ctx = case1_context()
        members = [MemberSpec("V1"), MemberSpec("V2"), MemberSpec("V3")]
        serial = solve_coalition(ctx, members, SolverConfig(workers=1), (9, 9, 9))
        parallel = solve_coalition(ctx, members, SolverConfig(workers=4), (9, 9, 9))
        assert np.array_equal(serial.du_flat, parallel.du_flat)
        assert serial.objective == parallel.objective

    def test_increment_bounds_projected(self):
        ctx = case1_context()
        lim = MotionLimits()
        res = solve_coalition(
            ctx, [MemberSpec("V1"), MemberSpec("V2")], SolverConfig(), (2, 0, 3)
        )
        for seq in res.sequences.values():
            for a in seq:
                assert abs(a.da_x) <= lim.dax_max
                assert abs(a.ddelta_f) <= lim.ddelta_f_max

    def test_more_iterations_never_worse(self):
        ctx = case1_context()
        members = [MemberSpec("V1"), MemberSpec("V2"), MemberSpec("V3")]
        short = solve_coalition(ctx, members, SolverConfig(iterations=30), (5, 1, 7))
        long = solve_coalition(ctx, members, SolverConfig(iterations=60), (5, 1, 7))
        assert long.objective <= short.objective + 1e-12

    def test_boxed_in_is_infeasible(self):
        # leftmost lane, lead inside the minimum gap, no escape channel
        snaps = {
            "V3": make_snapshot("V3", 1, 0.0, 20.0),
            "LV3": make_snapshot("LV3", 1, 6.0, 20.0, is_player=False),
        }
        ctx = make_context(snaps)
        with pytest.raises(Infeasible):
            solve_coalition(ctx, [MemberSpec("V3")], SolverConfig(), (0,))
        res = solve_coalition(
            ctx, [MemberSpec("V3")], SolverConfig(), (0,), raise_on_infeasible=False
        )
        assert not res.feasible
        assert res.objective > res.total

    def test_feasible_solution_passes_exact_check(self):
        ctx = case1_context()
        res = solve_coalition(ctx, [MemberSpec("V2")], SolverConfig(), (3, 2, 2))
        assert res.feasible
        obj = _CoalitionObjective(ctx, [MemberSpec("V2")], res.betas, 1e4)
        _, _, exc, _ = obj.evaluate_reference(res.du_flat[None, :])
        assert exc[0] <= 1e-6


class TestRecedingHorizon:
    def test_first_action_extracted(self):
        seq = [DecisionAction(0.1, 0.0, 0), DecisionAction(-0.05, 0.001, 0)]
        result_like = type("R", (), {"sequences": {"V2": seq}})()
        assert receding_horizon_apply(result_like) == {"V2": seq[0]}

    def test_fallback_is_jerk_limited_braking(self):
        lim = MotionLimits()
        state = VehicleState(20.0, 0.0, 0.0, 0.02, 50.0, 0.0)
        act = fallback_action(state, ControlInput(1.0, 0.02), 0.0, lim)
        assert act.da_x == -lim.dax_max
        assert act.beta == 0
        assert act.ddelta_f == -lim.ddelta_f_max  # steering back toward center
        act2 = fallback_action(state, ControlInput(-lim.ax_max, 0.0), 0.0, lim)
        assert act2.da_x == 0.0  # already at the deceleration bound
        drifted = VehicleState(20.0, 0.0, 0.0, 0.01, 50.0, 0.5)
        act3 = fallback_action(drifted, ControlInput(0.0, 0.0), 0.0, lim)
        assert act3.ddelta_f < 0.0  # counter-steer against the drift
