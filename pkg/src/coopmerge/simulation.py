"""Closed-loop simulation: re-linearize, form coalitions, solve, apply,
integrate; plus trace/summary export.

Each decision step re-linearizes every player's model at its measured
state, re-runs sub-coalition formation and the grand-coalition split test,
solves the surviving coalitions, applies the first actions (followers
replay their leader with a gap-dependent delay), and integrates the
nonlinear plants.  Lead vehicles roll at constant speed.  The trace is a
pure function of the scenario and seed: identical runs produce identical
bytes regardless of solver parallelism.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .coalition import (
    CoalitionPartition,
    FormationResult,
    Player,
    SubCoalition,
    coalition_formation,
    form_sub_coalitions,
    replay_delay_steps,
)
from .costs import (
    LaneModel,
    gap_speed_cost,
    potential_field_value,
    safety_cost,
)
from .dynamics import ControlInput, VehicleState, linearize_and_discretize, step_plant
from .errors import SimulationAbort
from .optimizer import (
    HOLD_ACTION,
    DecisionAction,
    MemberSpec,
    SolveContext,
    SolveResult,
    VehicleSnapshot,
    fallback_action,
    needs_steering,
    receding_horizon_apply,
    solve_coalition,
    steer_to_lane,
)
from .prediction import build_augmented, build_prediction_operator
from .scenario import Scenario

TRACE_COLUMNS = (
    "t",
    "vehicle_id",
    "X",
    "Y",
    "vx",
    "vy",
    "phi",
    "r",
    "ax",
    "delta_f",
    "beta",
    "lane",
    "coalition_id",
    "J_s",
    "J_c",
    "J_e",
    "J_total",
)


@dataclass
class TraceRow:
    t: float
    vehicle_id: str
    X: float
    Y: float
    vx: float
    vy: float
    phi: float
    r: float
    ax: float
    delta_f: float
    beta: int
    lane: int
    coalition_id: str
    J_s: float
    J_c: float
    J_e: float
    J_total: float

    def as_csv(self) -> str:
        return ",".join(
            [
                repr(self.t),
                self.vehicle_id,
                repr(self.X),
                repr(self.Y),
                repr(self.vx),
                repr(self.vy),
                repr(self.phi),
                repr(self.r),
                repr(self.ax),
                repr(self.delta_f),
                str(self.beta),
                str(self.lane),
                self.coalition_id,
                repr(self.J_s),
                repr(self.J_c),
                repr(self.J_e),
                repr(self.J_total),
            ]
        )


@dataclass
class Trace:
    rows: list[TraceRow] = field(default_factory=list)

    def to_csv_string(self) -> str:
        lines = [",".join(TRACE_COLUMNS)]
        lines.extend(row.as_csv() for row in self.rows)
        return "\n".join(lines) + "\n"

    def vehicles(self) -> list[str]:
        return sorted({r.vehicle_id for r in self.rows})

    def rows_for(self, vehicle_id: str) -> list[TraceRow]:
        return [r for r in self.rows if r.vehicle_id == vehicle_id]


@dataclass
class RunSummary:
    scenario: str
    seed: int
    mode: str
    steps: int
    dt: float
    aborted: bool
    abort_reason: str | None
    per_vehicle: dict
    totals: dict
    coalition_timeline: list
    solver: dict
    config: dict

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "mode": self.mode,
            "steps": self.steps,
            "dt": self.dt,
            "aborted": self.aborted,
            "abort_reason": self.abort_reason,
            "per_vehicle": self.per_vehicle,
            "totals": self.totals,
            "coalition_timeline": self.coalition_timeline,
            "solver": self.solver,
            "config": self.config,
        }


def export_trace(trace: Trace, path: str | Path) -> None:
    Path(path).write_text(trace.to_csv_string())


def export_summary(summary: RunSummary, path: str | Path) -> None:
    Path(path).write_text(json.dumps(summary.to_dict(), sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# runtime records
# ---------------------------------------------------------------------------


@dataclass
class _VehicleRun:
    vehicle_id: str
    role: str  # "player" | "lead"
    profile: object
    state: VehicleState
    control: ControlInput
    lane: int
    lane_floor: int = 1
    change_active: bool = False
    lane_changes: int = 0
    merge_completed_at: float | None = None
    prev_ax: float = 0.0
    prev_ay: float = 0.0
    prev_vy: float = 0.0


def _player_role(lane: int, lane_count: int) -> str:
    if lane >= lane_count:
        return "merger"
    if lane == 1:
        return "passive-adjacent"
    return "main-lane-adjacent"


def _wall_envelope_speed(gap: float, decel: float) -> float:
    """Speed from which the ramp end can still be reached at a comfortable
    stop: the wall behaves like a lead vehicle slowing to zero."""
    return math.sqrt(2.0 * decel * max(gap, 0.0))


def _bind_roles(run: _VehicleRun, beta: int, others: list[_VehicleRun], s: Scenario):
    """Current-step lead/neighbor binding for the realized-cost report;
    both come back as (X, Y, phi, vx) or None."""
    eff_lane = run.lane + beta
    lead_run, best_dx = None, math.inf
    for o in others:
        if o.lane != eff_lane:
            continue
        dx = o.state.X - run.state.X
        if 0 < dx < best_dx:
            best_dx, lead_run = dx, o
    lead = None
    lead_key = None
    if lead_run is not None:
        st = lead_run.state
        lead = (st.X, st.Y, st.phi, st.vx)
        lead_key = lead_run.vehicle_id

    nv_run, best = None, math.inf
    for o in others:
        if o.lane != eff_lane or o.vehicle_id == lead_key:
            continue
        d = math.hypot(o.state.X - run.state.X, o.state.Y - run.state.Y)
        if d < best:
            best, nv_run = d, o
    nv = None
    if nv_run is not None:
        st = nv_run.state
        nv = (st.X, st.Y, st.phi, st.vx)
    return lead, nv


def _realized_costs(run: _VehicleRun, beta: int, others: list[_VehicleRun], s: Scenario,
                    ax_new: float, first_step: bool):
    """Per-step cost report written into the trace (players only)."""
    w, pf, norm = s.weights, s.pf, s.norm
    lead, nv = _bind_roles(run, beta, others, s)
    if beta == 0 and not run.change_active:
        nv = None  # neighbors matter only during lateral maneuvers
    st = run.state
    eff_lane = run.lane + beta

    j_log = 0.0
    v_lead_eff = None
    if lead is not None:
        lx, ly, _, lv = lead
        ds = math.hypot(lx - st.X, ly - st.Y) - w.l_v
        j_log = float(gap_speed_cost(lv - st.vx, ds, w.v_log, w.s_log, w.epsilon))
        v_lead_eff = lv
    if eff_lane == s.lane_model.lane_count:
        wall_gap = s.lane_model.merge_zone[1] - st.X - w.l_v
        env = _wall_envelope_speed(wall_gap, s.wall_decel)
        j_log += float(gap_speed_cost(env - st.vx, wall_gap, w.v_log, w.s_log, w.epsilon))
    j_lat = 0.0
    if nv is not None:
        ds = math.hypot(nv[0] - st.X, nv[1] - st.Y) - w.l_v
        j_lat = float(gap_speed_cost(st.vx - nv[3], ds, w.v_lat, w.s_lat, w.epsilon))
    dy = st.Y - s.lane_model.center_y(eff_lane)
    j_lk = w.y_lk * dy * dy + w.phi_lk * st.phi * st.phi
    j_lc = 0.0
    for src in (lead, nv):
        if src is None:
            continue
        j_lc += float(potential_field_value(st.X, st.Y, src[0], src[1], src[2], src[3], pf))
    j_s = safety_cost(beta, j_log, j_lat, j_lk, j_lc)

    if first_step:
        jx = jy = 0.0
        ay = 0.0
    else:
        jx = (ax_new - run.prev_ax) / s.dt
        vydot = (st.vy - run.prev_vy) / s.dt
        ay = vydot + st.vx * st.r
        jy = (ay - run.prev_ay) / s.dt
    j_c = w.jx * jx * jx + w.jy * jy * jy

    v_lane = s.lane_model.v_max(eff_lane)
    v_hat = v_lane if v_lead_eff is None else min(v_lane, v_lead_eff)
    rate = s.limits.dax_max / s.dt
    settle = st.vx + math.copysign(ax_new * ax_new / (2.0 * rate), ax_new)
    j_e = w.efficiency * (settle - v_hat) ** 2

    profile = run.profile
    jsn, jcn, jen = j_s / norm.safety, j_c / norm.comfort, j_e / norm.efficiency
    total = profile.omega_s * jsn + profile.omega_c * jcn + profile.omega_e * jen
    return float(jsn), float(jcn), float(jen), float(total), float(ay)


# ---------------------------------------------------------------------------
# closed loop
# ---------------------------------------------------------------------------


def _collision_gap(a: _VehicleRun, b: _VehicleRun, length: float, width: float) -> float:
    """Separation proxy: negative only when the bodies overlap in both the
    longitudinal and the lateral direction."""
    return max(abs(a.state.X - b.state.X) - length, abs(a.state.Y - b.state.Y) - width)


def run_closed_loop(s: Scenario, mode: str | None = None) -> tuple[Trace, RunSummary]:
    """Simulate the scenario; returns the per-step trace and the summary.

    mode overrides the scenario's coalition mode ("auto" forms coalitions
    by the split algorithm each step; "grand" and "singles" force the two
    extreme structures for comparisons).  Raises SimulationAbort (carrying
    the partial trace) if any inter-vehicle gap goes negative.
    """
    mode = mode or s.coalition_mode
    n_steps = int(round(s.duration / s.dt))
    runs: dict[str, _VehicleRun] = {}
    for spec in s.vehicles:
        runs[spec.vehicle_id] = _VehicleRun(
            vehicle_id=spec.vehicle_id,
            role=spec.role,
            profile=spec.profile,
            state=VehicleState(spec.vx, 0.0, 0.0, 0.0, spec.x, spec.y),
            control=ControlInput(0.0, 0.0),
            lane=spec.lane,
            lane_floor=max(1, spec.lane - 1),
        )
    player_ids = sorted(v.vehicle_id for v in s.players())
    player_index = {vid: i for i, vid in enumerate(player_ids)}
    all_ids = sorted(runs)

    trace = Trace()
    timeline: list[dict] = []
    applied_history: dict[str, list[DecisionAction]] = {vid: [] for vid in player_ids}
    prev_sequences: dict[frozenset, dict] = {}
    lam_per_step: dict[str, list[float]] = {vid: [] for vid in player_ids}
    step_times: list[float] = []
    total_evaluations = 0
    aborted, abort_reason = False, None

    for k in range(n_steps):
        t = k * s.dt
        t0 = time.perf_counter()

        # (1) re-linearize and discretize every player at its current state
        snapshots: dict[str, VehicleSnapshot] = {}
        operators = {}
        for vid in all_ids:
            r = runs[vid]
            snapshots[vid] = VehicleSnapshot(
                vehicle_id=vid,
                state=r.state,
                control=r.control,
                lane=r.lane,
                profile=r.profile if r.role == "player" else None,
                change_active=r.change_active,
                is_player=r.role == "player",
                lane_floor=r.lane_floor,
            )
        for vid in player_ids:
            r = runs[vid]
            model = linearize_and_discretize(r.state, r.control, s.vparams, s.dt)
            operators[vid] = build_prediction_operator(*build_augmented(model.Ad, model.Bd), s.horizon)

        urgency = {}
        zone_end = s.lane_model.merge_zone[1]
        for vid in player_ids:
            r = runs[vid]
            if r.lane == s.lane_model.lane_count and r.state.X > zone_end:
                urgency[vid] = 1.0 + s.urgency_gain * (r.state.X - zone_end)

        ctx = SolveContext(
            vehicles=snapshots,
            lane_model=s.lane_model,
            horizon=s.horizon,
            dt=s.dt,
            weights=s.weights,
            pf=s.pf,
            norm=s.norm,
            limits=s.limits,
            cparams=s.cparams,
            vparams=s.vparams,
            operators=operators,
            ramp_wall_x=zone_end,
            wall_decel=s.wall_decel,
            urgency=urgency,
        )

        # (2) sub-coalition formation on the current lane occupancy; a
        # vehicle mid-lane-change is not lane-aligned and plays alone
        steady_ids = [vid for vid in player_ids if not runs[vid].change_active]
        players = [
            Player(vid, runs[vid].lane, runs[vid].profile,
                   _player_role(runs[vid].lane, s.lane_model.lane_count))
            for vid in steady_ids
        ]
        positions = {vid: (runs[vid].state.X, runs[vid].state.Y) for vid in steady_ids}
        subs = form_sub_coalitions(players, positions, s.gap_threshold)
        subs += [
            SubCoalition((vid,), runs[vid].lane)
            for vid in player_ids
            if runs[vid].change_active
        ]
        subs = sorted(subs, key=lambda sc: sc.key)

        solve_cache: dict[frozenset, SolveResult] = {}

        def solve_group(group: tuple[SubCoalition, ...]) -> SolveResult:
            key = frozenset(sc.key for sc in group)
            if key in solve_cache:
                return solve_cache[key]
            members = [MemberSpec(sc.leader, tuple(sc.members[1:])) for sc in group]
            warm = []
            prev = prev_sequences.get(key)
            if prev is not None:
                vec: list[float] = []
                usable = True
                for m in members:
                    seq = prev.get(m.vehicle_id)
                    if seq is None:
                        usable = False
                        break
                    vec.extend([a.da_x for a in seq[1:]] + [0.0])
                    if needs_steering(snapshots[m.vehicle_id], s.lane_model):
                        vec.extend([a.ddelta_f for a in seq[1:]] + [0.0])
                if usable:
                    warm.append(np.array(vec))
            if len(members) > 1:
                vec, usable = [], True
                for m in members:
                    res = solve_cache.get(frozenset([m.vehicle_id]))
                    if res is None:
                        usable = False
                        break
                    seq = res.sequences[m.vehicle_id]
                    vec.extend(a.da_x for a in seq)
                    if needs_steering(snapshots[m.vehicle_id], s.lane_model):
                        vec.extend(a.ddelta_f for a in seq)
                if usable:
                    warm.append(np.array(vec))
            mask = sum(1 << player_index[sc.key] for sc in group)
            result = solve_coalition(
                ctx,
                members,
                s.solver,
                seed_material=(s.seed, k, mask),
                warm_starts=warm,
                raise_on_infeasible=False,
            )
            solve_cache[key] = result
            return result

        # (3) coalition structure for this step
        formation: FormationResult | None = None
        if mode == "auto" and len(subs) > 1:
            formation = coalition_formation(
                subs, lambda g: solve_group(g).objective, defect_tol=s.defect_tol
            )
            partition = formation.partition
        elif mode == "singles":
            groups = tuple((sc,) for sc in subs)
            tag = "single-player" if all(len(sc.members) == 1 for sc in subs) else "multi-player"
            partition = CoalitionPartition(groups, tag)
        else:  # grand, or auto with one sub-coalition
            tag = "grand-with-sub" if any(len(sc.members) > 1 for sc in subs) else "grand"
            partition = CoalitionPartition((tuple(subs),), tag)

        # (4) decisions: leaders from the solves, followers by delayed replay
        actions: dict[str, DecisionAction] = {}
        coalition_of: dict[str, str] = {}
        for gi, group in enumerate(partition.coalitions):
            cid = f"c{gi}"
            result = solve_group(group)
            for sc in group:
                for m in sc.members:
                    coalition_of[m] = cid
            if result.feasible:
                first = receding_horizon_apply(result)
                for sc in group:
                    actions[sc.leader] = first[sc.leader]
                for vid in result.lambdas:
                    lam_per_step[vid].append(result.lambdas[vid])
            else:
                # least-violation plan: the penalized best effort usually
                # resolves the conflict better than blind braking
                first = receding_horizon_apply(result)
                for sc in group:
                    act = first.get(sc.leader)
                    if act is None:
                        act = fallback_action(
                            runs[sc.leader].state,
                            runs[sc.leader].control,
                            s.lane_model.center_y(runs[sc.leader].lane),
                            s.limits,
                        )
                    actions[sc.leader] = act
                    lam_per_step[sc.leader].append(result.lambdas.get(sc.leader, result.total))
            for sc in group:
                for follower in sc.members[1:]:
                    lam_per_step[follower].append(lam_per_step[sc.leader][-1])

        for vid in player_ids:
            if vid in actions:
                applied_history[vid].append(actions[vid])
        for group in partition.coalitions:
            for sc in group:
                leader_hist = applied_history[sc.leader]
                for follower in sc.members[1:]:
                    r = runs[follower]
                    gap = math.hypot(
                        runs[sc.leader].state.X - r.state.X,
                        runs[sc.leader].state.Y - r.state.Y,
                    )
                    tau = replay_delay_steps(gap, max(r.state.vx, 1e-6), s.dt)
                    idx = len(leader_hist) - 1 - tau
                    act = leader_hist[idx] if idx >= 0 else HOLD_ACTION
                    beta = act.beta
                    if beta == -1 and (
                        r.change_active
                        or not s.lane_model.lane_exists(r.lane - 1)
                        or r.lane - 1 < r.lane_floor
                    ):
                        beta = 0  # replayed change the follower cannot execute
                    # the follower copies speed and lane decisions but steers
                    # its own lane reference (a leader's raw steering history
                    # replays its maneuver from the wrong pose)
                    target_lane = r.lane + beta if beta == -1 else r.lane
                    dd = steer_to_lane(
                        r.state, r.control, s.lane_model.center_y(target_lane), s.limits
                    )
                    # replay is open loop; guard the gap to the leader
                    lead_state = runs[sc.leader].state
                    debt = max(0.0, r.control.ax) ** 2 * s.dt / (2.0 * s.limits.dax_max)
                    closing = max(0.0, r.state.vx + debt - lead_state.vx)
                    follow_gap = gap - s.weights.l_v
                    required = s.limits.min_gap + closing * closing / 2.0
                    da = act.da_x
                    if follow_gap < required:
                        da = max(-s.limits.dax_max, -s.limits.ax_max - r.control.ax)
                    act = DecisionAction(da, dd, beta)
                    actions[follower] = act
                    applied_history[follower].append(act)

        step_times.append(time.perf_counter() - t0)
        total_evaluations += sum(rr.evaluations for rr in solve_cache.values())
        prev_sequences.update(
            {key: dict(res.sequences) for key, res in solve_cache.items()}
        )
        timeline.append(
            {
                "step": k,
                "t": round(t, 9),
                "type": partition.type_tag,
                "partition": [
                    [list(sc.members) for sc in group] for group in partition.coalitions
                ],
                "defectors": list(formation.defectors) if formation else [],
                "shapley": {kk: formation.shapley[kk] for kk in sorted(formation.shapley)}
                if formation
                else {},
                "standalone": {kk: formation.standalone[kk] for kk in sorted(formation.standalone)}
                if formation
                else {},
            }
        )

        # (5) trace rows, then apply actions and integrate the plants
        ordered = [runs[vid] for vid in all_ids]
        for vid in all_ids:
            r = runs[vid]
            if r.role == "player":
                act = actions[vid]
                da = float(np.clip(act.da_x, -s.limits.dax_max, s.limits.dax_max))
                dd = float(np.clip(act.ddelta_f, -s.limits.ddelta_f_max, s.limits.ddelta_f_max))
                ax_new = float(np.clip(r.control.ax + da, -s.limits.ax_max, s.limits.ax_max))
                df_new = float(
                    np.clip(r.control.delta_f + dd, -s.limits.delta_f_max, s.limits.delta_f_max)
                )
                beta = act.beta
                others = [o for o in ordered if o.vehicle_id != vid]
                js, jc, je, jt, ay = _realized_costs(r, beta, others, s, ax_new, k == 0)
                trace.rows.append(
                    TraceRow(
                        t=round(t, 9),
                        vehicle_id=vid,
                        X=float(r.state.X),
                        Y=float(r.state.Y),
                        vx=float(r.state.vx),
                        vy=float(r.state.vy),
                        phi=float(r.state.phi),
                        r=float(r.state.r),
                        ax=ax_new,
                        delta_f=df_new,
                        beta=beta,
                        lane=r.lane,
                        coalition_id=coalition_of[vid],
                        J_s=js,
                        J_c=jc,
                        J_e=je,
                        J_total=jt,
                    )
                )
                r.prev_ax, r.prev_ay, r.prev_vy = ax_new, ay, r.state.vy
                r.control = ControlInput(ax_new, df_new)
                if beta == -1 and not r.change_active and s.lane_model.lane_exists(r.lane - 1):
                    r.lane = r.lane + beta
                    r.change_active = True
                    r.lane_changes += 1
            else:
                trace.rows.append(
                    TraceRow(
                        t=round(t, 9),
                        vehicle_id=vid,
                        X=float(r.state.X),
                        Y=float(r.state.Y),
                        vx=float(r.state.vx),
                        vy=float(r.state.vy),
                        phi=float(r.state.phi),
                        r=float(r.state.r),
                        ax=0.0,
                        delta_f=0.0,
                        beta=0,
                        lane=r.lane,
                        coalition_id="lead",
                        J_s=0.0,
                        J_c=0.0,
                        J_e=0.0,
                        J_total=0.0,
                    )
                )
                r.control = ControlInput(0.0, 0.0)

        for vid in all_ids:
            r = runs[vid]
            r.state = step_plant(r.state, r.control, s.vparams, s.dt)
            if r.change_active:
                if (
                    abs(r.state.Y - s.lane_model.center_y(r.lane)) <= s.limits.dy_max
                    and abs(r.state.phi) <= s.limits.dphi_max
                ):
                    r.change_active = False
                    r.merge_completed_at = round((k + 1) * s.dt, 9)

        # (6) collision check on the new states
        for i, a_id in enumerate(all_ids):
            for b_id in all_ids[i + 1 :]:
                gap = _collision_gap(runs[a_id], runs[b_id], s.vparams.length, s.collision_width)
                if gap < 0:
                    aborted = True
                    abort_reason = (
                        f"collision between {a_id} and {b_id} at t={round((k + 1) * s.dt, 9)} "
                        f"(gap {gap:.3f} m)"
                    )
                    break
            if aborted:
                break
        if aborted:
            break

    per_vehicle = {}
    for vid in all_ids:
        r = runs[vid]
        rows = trace.rows_for(vid)
        costs = np.array([row.J_total for row in rows]) if rows else np.zeros(1)
        lams = np.array(lam_per_step.get(vid, [])) if lam_per_step.get(vid) else np.zeros(1)
        per_vehicle[vid] = {
            "role": r.role,
            "rms_cost": float(np.sqrt(np.mean(costs**2))),
            "rms_lambda": float(np.sqrt(np.mean(lams**2))) if r.role == "player" else 0.0,
            "mean_vx": float(np.mean([row.vx for row in rows])) if rows else 0.0,
            "final_lane": r.lane,
            "lane_changes": r.lane_changes,
            "merge_completed_at": r.merge_completed_at,
        }
    player_rms = [per_vehicle[vid]["rms_lambda"] for vid in player_ids]
    totals = {
        "rms_lambda_sum": float(sum(player_rms)),
        "rms_cost_sum": float(sum(per_vehicle[vid]["rms_cost"] for vid in player_ids)),
    }
    solver_stats = {
        "mean_step_time_s": float(np.mean(step_times)) if step_times else 0.0,
        "max_step_time_s": float(np.max(step_times)) if step_times else 0.0,
        "total_evaluations": int(total_evaluations),
        "steps_timed": len(step_times),
    }
    summary = RunSummary(
        scenario=s.name,
        seed=s.seed,
        mode=mode,
        steps=len(step_times),
        dt=s.dt,
        aborted=aborted,
        abort_reason=abort_reason,
        per_vehicle=per_vehicle,
        totals=totals,
        coalition_timeline=timeline,
        solver=solver_stats,
        config=s.config_echo(),
    )
    if aborted:
        raise SimulationAbort(abort_reason, trace=trace)
    return trace, summary
