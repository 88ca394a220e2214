"""Receding-horizon solver for one coalition's decision problem.

Discrete lane-change choices are enumerated; the continuous control
increments are found by a seeded differential-evolution search whose
objective sums the members' characteristic values plus a static penalty on
constraint violations.  Increment box bounds are enforced by projection;
everything else by penalty with an exact feasibility check on the winner.

All evaluation is vectorized over the population, and every random draw
comes from a generator seeded by the caller, so results are reproducible
bit for bit and independent of how assignment searches are scheduled.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from typing import Mapping, Sequence

import numpy as np

from .costs import (
    BOUND_TOL,
    CostWeights,
    DrivingProfile,
    LaneModel,
    MotionLimits,
    NormalizationRanges,
    PotentialFieldParams,
    gap_speed_cost,
    potential_field_value,
)
from ._kernels import member_cost_kernel
from .dynamics import ControlInput, VehicleParams, VehicleState
from .errors import Infeasible
from .prediction import Horizon, PredictionOperator, predict_batch

FEASIBILITY_TOL = 1e-6
SHAPE_WEIGHT = 3.0  # soft weight of the maneuver-shaping terms


@dataclass(frozen=True)
class DecisionAction:
    """One step of a decision sequence: control increments plus the
    lane-change choice (keep or left change)."""

    da_x: float
    ddelta_f: float
    beta: int

    def __post_init__(self):
        if self.beta * (self.beta + 1) != 0:
            raise ValueError(f"beta must satisfy beta(beta+1)=0, got {self.beta}")


HOLD_ACTION = DecisionAction(0.0, 0.0, 0)


@dataclass(frozen=True)
class CharacteristicParams:
    """Q scales the squared per-step cost, R the squared decision effort."""

    q: float = 1.0
    r_diag: tuple[float, float, float] = (1.0, 1.0, 0.0)


@dataclass(frozen=True)
class SolverConfig:
    population: int = 32
    iterations: int = 60
    mutation: float = 0.7
    crossover: float = 0.9
    penalty: float = 1e4
    workers: int = 1
    lane_change_margin: float = 0.1  # relative gain a change must show


@dataclass(frozen=True)
class VehicleSnapshot:
    """World state of one vehicle at the current decision step.

    lane_floor is the leftmost lane this player may occupy: one left of its
    home lane, so a merger enters the main road and a main-lane vehicle can
    give way, but nobody wanders further left."""

    vehicle_id: str
    state: VehicleState
    control: ControlInput
    lane: int
    profile: DrivingProfile | None = None  # None for lead vehicles
    change_active: bool = False
    is_player: bool = True
    lane_floor: int = 1


@dataclass(frozen=True)
class MemberSpec:
    """A decision-making member of the solved coalition (a sub-coalition
    leader); its followers replay the decisions outside the solve."""

    vehicle_id: str
    followers: tuple[str, ...] = ()


@dataclass(frozen=True)
class SolveContext:
    """Everything a coalition solve needs about the world and the config."""

    vehicles: Mapping[str, VehicleSnapshot]
    lane_model: LaneModel
    horizon: Horizon
    dt: float
    weights: CostWeights
    pf: PotentialFieldParams
    norm: NormalizationRanges
    limits: MotionLimits
    cparams: CharacteristicParams
    vparams: VehicleParams
    operators: Mapping[str, PredictionOperator]
    ramp_wall_x: float | None = None
    wall_decel: float = 1.0
    urgency: Mapping[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class SolveResult:
    """Optimized decision sequences for one coalition.

    total is the coalition objective (sum of member lambdas); objective
    additionally carries the penalty term and equals total when feasible.
    """

    sequences: dict[str, list[DecisionAction]]
    lambdas: dict[str, float]
    total: float
    feasible: bool
    evaluations: int
    objective: float
    betas: dict[str, int]
    du_flat: np.ndarray


def characteristic_value(
    step_costs: np.ndarray, actions: Sequence[DecisionAction], cp: CharacteristicParams
) -> float:
    """Sum of Q-weighted squared per-step costs plus R-weighted squared
    decision effort over the control horizon."""
    costs = np.asarray(step_costs, dtype=float)
    lam = cp.q * float(np.sum(costs**2))
    r = np.asarray(cp.r_diag, dtype=float)
    for a in actions:
        u_hat = np.array([a.da_x, a.ddelta_f, float(a.beta)])
        lam += float(u_hat @ (r * u_hat))
    return lam


def needs_steering(snap: VehicleSnapshot, lane_model: LaneModel) -> bool:
    """Leftmost-lane players that never left the center line are pure
    longitudinal deciders; everyone else keeps the steering channel."""
    if snap.lane > 1 or snap.change_active:
        return True
    s = snap.state
    centered = (
        abs(s.Y - lane_model.center_y(snap.lane)) < 1e-9
        and abs(s.vy) < 1e-12
        and abs(s.phi) < 1e-12
        and abs(snap.control.delta_f) < 1e-12
    )
    return not centered


def has_beta_authority(snap: VehicleSnapshot, lane_model: LaneModel) -> bool:
    """A left change needs an existing target lane above the player's lane
    floor and no change already in progress; a right change is excluded by
    beta(beta+1)=0."""
    return (
        lane_model.lane_exists(snap.lane - 1)
        and snap.lane - 1 >= snap.lane_floor
        and not snap.change_active
    )


def enumerate_beta(members: Sequence[MemberSpec], ctx: SolveContext) -> list[dict[str, int]]:
    """All admissible lane-choice assignments over the coalition members."""
    choices: list[list[int]] = []
    for m in members:
        snap = ctx.vehicles[m.vehicle_id]
        choices.append([0, -1] if has_beta_authority(snap, ctx.lane_model) else [0])
    return [
        {m.vehicle_id: b for m, b in zip(members, combo)} for combo in product(*choices)
    ]


def steer_to_lane(
    state: VehicleState,
    control: ControlInput,
    center_y: float,
    limits: MotionLimits,
) -> float:
    """Rate-limited stabilizing steering increment toward a lane center."""
    dy = state.Y - center_y
    target = -1.5 * state.phi - 0.05 * dy / max(state.vx, 5.0)
    target = float(np.clip(target, -limits.delta_f_max, limits.delta_f_max))
    return float(np.clip(target - control.delta_f, -limits.ddelta_f_max, limits.ddelta_f_max))


def fallback_action(
    state: VehicleState,
    control: ControlInput,
    center_y: float,
    limits: MotionLimits,
) -> DecisionAction:
    """Maximum comfortable braking with stabilizing lane keeping: ramp the
    acceleration down at the increment bound and steer the heading and
    lateral offset back toward the lane center."""
    da = max(-limits.dax_max, -limits.ax_max - control.ax)
    dd = steer_to_lane(state, control, center_y, limits)
    return DecisionAction(da_x=da, ddelta_f=dd, beta=0)


# ---------------------------------------------------------------------------
# batched objective for one (coalition, beta-assignment)
# ---------------------------------------------------------------------------


class _CoalitionObjective:
    def __init__(
        self,
        ctx: SolveContext,
        members: Sequence[MemberSpec],
        betas: Mapping[str, int],
        penalty: float,
    ):
        self.ctx = ctx
        self.members = list(members)
        self.betas = dict(betas)
        self.penalty = penalty
        h = ctx.horizon
        self.np_steps, self.nc = h.np_steps, h.nc_steps

        member_ids = [m.vehicle_id for m in members]
        self.steering = {
            vid: needs_steering(ctx.vehicles[vid], ctx.lane_model) for vid in member_ids
        }
        # flat layout: per member, Nc ax-increments then (if steering) Nc
        # steering increments
        self.slices: dict[str, tuple[slice, slice | None]] = {}
        lo, upper = 0, []
        for vid in member_ids:
            ax_sl = slice(lo, lo + self.nc)
            lo += self.nc
            upper += [ctx.limits.dax_max] * self.nc
            st_sl = None
            if self.steering[vid]:
                st_sl = slice(lo, lo + self.nc)
                lo += self.nc
                upper += [ctx.limits.ddelta_f_max] * self.nc
            self.slices[vid] = (ax_sl, st_sl)
        self.dim = lo
        self.upper = np.array(upper)
        self.lower = -self.upper

        # slot layout for the shared world arrays: fixed vehicles first,
        # then one slot per member; fixed traffic is projected at constant
        # velocity (the lane-keeping fiction for non-members)
        steps = np.arange(1, self.np_steps + 1) * ctx.dt
        rows = []
        for vid, snap in ctx.vehicles.items():
            if vid in member_ids:
                continue
            s = snap.state
            vx_g = s.vx * np.cos(s.phi) - s.vy * np.sin(s.phi)
            vy_g = s.vx * np.sin(s.phi) + s.vy * np.cos(s.phi)
            rows.append((s.X + vx_g * steps, s.Y + vy_g * steps, s.vx, s.phi, snap.lane, s.vx))
        self.n_fixed = len(rows)
        n_slots = self.n_fixed + len(member_ids)
        self.fixed_x = np.array([r[0] for r in rows]).reshape(self.n_fixed, self.np_steps)
        self.fixed_y = np.array([r[1] for r in rows]).reshape(self.n_fixed, self.np_steps)
        self.fixed_v = np.array([r[2] for r in rows], dtype=float)
        self.fixed_phi = np.array([r[3] for r in rows], dtype=float)
        self.fixed_veff = np.array([r[5] for r in rows], dtype=float)

        self.member_eff_lane = {
            vid: ctx.vehicles[vid].lane + self.betas[vid] for vid in member_ids
        }
        self.slot_of = {vid: self.n_fixed + i for i, vid in enumerate(member_ids)}
        self.slot_lane = np.concatenate(
            [
                np.array([r[4] for r in rows], dtype=int) if rows else np.zeros(0, dtype=int),
                np.array([self.member_eff_lane[v] for v in member_ids], dtype=int),
            ]
        )
        self.n_slots = n_slots
        self._theta = {
            vid: np.concatenate(
                [ctx.vehicles[vid].state.as_array(), ctx.vehicles[vid].control.as_array()]
            )
            for vid in member_ids
        }
        self._r_diag = np.asarray(ctx.cparams.r_diag, dtype=float)
        self._buffers: dict[int, tuple] = {}
        self._world_buf: dict[int, np.ndarray] = {}

        # static kernel arguments per member
        all_idx = np.arange(n_slots)
        self._sub_slots = {}
        self._kernel_args = {}
        w, pf, norm, lim, cp = ctx.weights, ctx.pf, ctx.norm, ctx.limits, ctx.cparams
        for vid in member_ids:
            eff = self.member_eff_lane[vid]
            mask = self.slot_lane == eff
            mask[self.slot_of[vid]] = False
            self._sub_slots[vid] = all_idx[mask].astype(np.int64)
            snap = ctx.vehicles[vid]
            beta = self.betas[vid]
            profile = snap.profile
            on_ramp = eff == ctx.lane_model.lane_count and ctx.ramp_wall_x is not None
            wall_x = float(ctx.ramp_wall_x) if on_ramp else float("nan")
            self._kernel_args[vid] = (
                wall_x,
                snap.control.ax,
                snap.control.delta_f,
                snap.state.X,
                snap.state.Y,
                snap.state.phi,
                beta,
                float(ctx.lane_model.v_max(eff)),
                float(ctx.lane_model.center_y(eff)),
                w.v_log,
                w.s_log,
                w.v_lat,
                w.s_lat,
                w.y_lk,
                w.phi_lk,
                w.jx,
                w.jy,
                w.efficiency,
                w.epsilon,
                w.l_v,
                pf.hbar,
                2.0 * pf.sigma_x**2,
                2.0 * pf.sigma_y**2,
                pf.rho,
                pf.varsigma,
                profile.omega_s,
                profile.omega_c,
                profile.omega_e * float(ctx.urgency.get(vid, 1.0)),
                norm.safety,
                norm.comfort,
                norm.efficiency,
                cp.q,
                self._r_diag[0],
                self._r_diag[1],
                self._r_diag[2],
                ctx.dt,
                ctx.wall_decel,
                lim.ax_max,
                lim.delta_f_max,
                lim.dax_max,
                lim.ddelta_f_max,
                lim.jx_max,
                lim.jy_max,
                lim.ay_max,
                1.0 / lim.r_min,
                lim.min_gap,
                lim.dy_max,
                lim.dphi_max,
                beta == 0 and not snap.change_active,
                beta == -1 or snap.change_active,
                0.75 * lim.ax_max,
                lim.dax_max / ctx.dt,
                1.0,
                ctx.lane_model.center_y(ctx.lane_model.lane_count)
                - 0.5 * ctx.lane_model.lane_width,
                ctx.lane_model.center_y(1) + 0.5 * ctx.lane_model.lane_width,
                1.0,
            )

    def increments(self, du_flat: np.ndarray, vid: str) -> np.ndarray:
        """Member's (pop, Nc, 2) increment block from the flat vectors."""
        pop = du_flat.shape[0]
        ax_sl, st_sl = self.slices[vid]
        du = np.zeros((pop, self.nc, 2))
        du[:, :, 0] = du_flat[:, ax_sl]
        if st_sl is not None:
            du[:, :, 1] = du_flat[:, st_sl]
        return du

    def _world(self, pop: int):
        """Reusable (pop, slots, Np) world arrays with fixed rows filled."""
        key = pop
        if key not in self._buffers:
            shape = (pop, self.n_slots, self.np_steps)
            self._buffers[key] = tuple(np.empty(shape) for _ in range(5))
        ox, oy, ov, ophi, oveff = self._buffers[key]
        nf = self.n_fixed
        ox[:, :nf] = self.fixed_x
        oy[:, :nf] = self.fixed_y
        ov[:, :nf] = self.fixed_v[:, None]
        ophi[:, :nf] = self.fixed_phi[:, None]
        oveff[:, :nf] = self.fixed_veff[:, None]
        return ox, oy, ov, ophi, oveff

    def _world5(self, pop: int) -> np.ndarray:
        """Reusable (pop, slots, Np, 5) field array, fixed rows filled."""
        if pop not in self._world_buf:
            self._world_buf[pop] = np.empty((pop, self.n_slots, self.np_steps, 5))
        w = self._world_buf[pop]
        nf = self.n_fixed
        w[:, :nf, :, 0] = self.fixed_x
        w[:, :nf, :, 1] = self.fixed_y
        w[:, :nf, :, 2] = self.fixed_v[:, None]
        w[:, :nf, :, 3] = self.fixed_phi[:, None]
        w[:, :nf, :, 4] = self.fixed_veff[:, None]
        return w

    def evaluate(self, du_flat: np.ndarray):
        """Returns (objective, lambda_total, excess, per-member lambdas)."""
        ctx = self.ctx
        du_flat = np.atleast_2d(du_flat)
        pop = du_flat.shape[0]

        world = self._world5(pop)
        trajs: dict[str, np.ndarray] = {}
        u_abs: dict[str, np.ndarray] = {}
        dus: dict[str, np.ndarray] = {}
        for m in self.members:
            vid = m.vehicle_id
            du = self.increments(du_flat, vid)
            dus[vid] = du
            traj = predict_batch(ctx.operators[vid], self._theta[vid], du.reshape(pop, -1))
            trajs[vid] = traj
            du_full = np.zeros((pop, self.np_steps, 2))
            du_full[:, : self.nc] = du
            u_abs[vid] = ctx.vehicles[vid].control.as_array() + np.cumsum(du_full, axis=1)
            slot = self.slot_of[vid]
            world[:, slot, :, 0] = traj[:, :, 4]
            world[:, slot, :, 1] = traj[:, :, 5]
            world[:, slot, :, 2] = traj[:, :, 0]
            world[:, slot, :, 3] = traj[:, :, 3]
            world[:, slot, :, 4] = traj[:, :, 0]

        lam_total = np.zeros(pop)
        excess = np.zeros(pop)
        shaping = np.zeros(pop)
        lam_members: dict[str, np.ndarray] = {}
        for m in self.members:
            vid = m.vehicle_id
            lam = np.empty(pop)
            exc = np.empty(pop)
            shp = np.empty(pop)
            member_cost_kernel(
                trajs[vid],
                dus[vid],
                u_abs[vid],
                world,
                self._sub_slots[vid],
                *self._kernel_args[vid],
                shp,
                lam,
                exc,
            )
            lam_members[vid] = lam
            lam_total += lam
            excess += exc
            shaping += shp
        return (
            lam_total + self.penalty * excess + SHAPE_WEIGHT * shaping,
            lam_total,
            excess,
            lam_members,
        )

    def evaluate_reference(self, du_flat: np.ndarray):
        """Pure-numpy evaluation used to cross-check the compiled kernel."""
        ctx = self.ctx
        du_flat = np.atleast_2d(du_flat)
        pop = du_flat.shape[0]

        ox, oy, ov, ophi, oveff = self._world(pop)
        trajs: dict[str, np.ndarray] = {}
        u_abs: dict[str, np.ndarray] = {}
        dus: dict[str, np.ndarray] = {}
        for m in self.members:
            vid = m.vehicle_id
            du = self.increments(du_flat, vid)
            dus[vid] = du
            traj = predict_batch(ctx.operators[vid], self._theta[vid], du.reshape(pop, -1))
            trajs[vid] = traj
            du_full = np.zeros((pop, self.np_steps, 2))
            du_full[:, : self.nc] = du
            u_abs[vid] = ctx.vehicles[vid].control.as_array() + np.cumsum(du_full, axis=1)
            slot = self.slot_of[vid]
            ox[:, slot] = traj[:, :, 4]
            oy[:, slot] = traj[:, :, 5]
            ov[:, slot] = traj[:, :, 0]
            ophi[:, slot] = traj[:, :, 3]
            oveff[:, slot] = traj[:, :, 0]

        lam_total = np.zeros(pop)
        excess = np.zeros(pop)
        shaping = np.zeros(pop)
        lam_members: dict[str, np.ndarray] = {}
        for m in self.members:
            vid = m.vehicle_id
            lam, exc, shp = self._member_cost(vid, trajs[vid], dus[vid], u_abs[vid],
                                              ox, oy, ov, ophi, oveff)
            lam_members[vid] = lam
            lam_total += lam
            excess += exc
            shaping += shp
        return (
            lam_total + self.penalty * excess + SHAPE_WEIGHT * shaping,
            lam_total,
            excess,
            lam_members,
        )

    def _member_cost(self, vid, traj, du, u_abs, ox, oy, ov, ophi, oveff):
        """Fused characteristic value and constraint excess per candidate."""
        ctx = self.ctx
        w, pf, norm, lim = ctx.weights, ctx.pf, ctx.norm, ctx.limits
        beta = self.betas[vid]
        snap = ctx.vehicles[vid]
        pop = traj.shape[0]
        dt = ctx.dt
        eff_lane = self.member_eff_lane[vid]
        v_lane = ctx.lane_model.v_max(eff_lane)
        center = ctx.lane_model.center_y(eff_lane)

        host_v = traj[:, :, 0]
        host_phi = traj[:, :, 3]
        host_x = traj[:, :, 4]
        host_y = traj[:, :, 5]

        lane_ok = self.slot_lane == eff_lane
        lane_ok = lane_ok.copy()
        lane_ok[self.slot_of[vid]] = False

        if lane_ok.any():
            dx = ox[:, lane_ok] - host_x[:, None, :]
            dy_o = oy[:, lane_ok] - host_y[:, None, :]
            dist = np.hypot(dx, dy_o)

            dx_lead = np.where(dx > 0, dx, np.inf)
            lead_idx = np.argmin(dx_lead, axis=1)[:, None, :]
            has_lead = np.take_along_axis(dx_lead, lead_idx, axis=1)[:, 0, :] < np.inf

            sub = (ox[:, lane_ok], oy[:, lane_ok], ov[:, lane_ok],
                   ophi[:, lane_ok], oveff[:, lane_ok])

            def pick(arr, idx):
                return np.take_along_axis(arr, idx, axis=1)[:, 0, :]

            lead_x, lead_y = pick(sub[0], lead_idx), pick(sub[1], lead_idx)
            lead_v, lead_phi = pick(sub[2], lead_idx), pick(sub[3], lead_idx)
            lead_veff, lead_dist = pick(sub[4], lead_idx), pick(dist, lead_idx)
            lead_gap = np.where(has_lead, lead_dist - w.l_v, np.inf)

            dist_nv = dist.copy()
            np.put_along_axis(dist_nv, lead_idx, np.inf, axis=1)
            nv_idx = np.argmin(dist_nv, axis=1)[:, None, :]
            nv_active = beta == -1 or snap.change_active
            has_nv = (
                np.take_along_axis(dist_nv, nv_idx, axis=1)[:, 0, :] < np.inf
                if nv_active
                else np.zeros((pop, self.np_steps), dtype=bool)
            )
            nv_x, nv_y = pick(sub[0], nv_idx), pick(sub[1], nv_idx)
            nv_v, nv_phi, nv_dist = pick(sub[2], nv_idx), pick(sub[3], nv_idx), pick(dist, nv_idx)

            j_log = np.where(
                has_lead,
                gap_speed_cost(lead_v - host_v, lead_dist - w.l_v, w.v_log, w.s_log, w.epsilon),
                0.0,
            )
            j_lat = np.where(
                has_nv,
                gap_speed_cost(host_v - nv_v, nv_dist - w.l_v, w.v_lat, w.s_lat, w.epsilon),
                0.0,
            )
            nv_gap = np.where(has_nv, nv_dist - w.l_v, np.inf)
            gam_lead = np.where(
                has_lead,
                potential_field_value(host_x, host_y, lead_x, lead_y, lead_phi, lead_v, pf),
                0.0,
            )
            gam_nv = np.where(
                has_nv,
                potential_field_value(host_x, host_y, nv_x, nv_y, nv_phi, nv_v, pf),
                0.0,
            )
            j_lc = gam_lead + gam_nv
            v_hat = np.fmin(v_lane, np.where(has_lead, lead_veff, np.nan))
            v_hat = np.where(np.isnan(v_hat), v_lane, v_hat)
        else:
            zeros = np.zeros((pop, self.np_steps))
            j_log = j_lat = j_lc = zeros
            lead_gap = np.full((pop, self.np_steps), np.inf)
            nv_gap = np.full((pop, self.np_steps), np.inf)
            v_hat = np.full((pop, self.np_steps), v_lane)

        # ramp end: a standing lead whose speed is the comfortable stopping
        # envelope, acting alongside any moving lead
        wall_gap = None
        if eff_lane == ctx.lane_model.lane_count and ctx.ramp_wall_x is not None:
            wall_gap = ctx.ramp_wall_x - host_x - w.l_v
            env = np.sqrt(2.0 * ctx.wall_decel * np.maximum(wall_gap, 0.0))
            j_log = j_log + gap_speed_cost(env - host_v, wall_gap, w.v_log, w.s_log, w.epsilon)
            env_stop = np.sqrt(2.0 * (0.75 * ctx.limits.ax_max) * np.maximum(wall_gap, 0.0))
            unwind = 0.5 * np.maximum(u_abs[:, :, 0], 0.0) ** 2 / (
                ctx.limits.dax_max / ctx.dt
            )

        dy = host_y - center
        j_lk = w.y_lk * dy**2 + w.phi_lk * host_phi**2

        keep = (beta * beta - 1) ** 2
        change = beta * beta
        j_s = keep * j_log + change * j_lat + keep * j_lk + j_lc

        # comfort: longitudinal jerk from the increments, lateral jerk from
        # second differences of the predicted lateral positions
        jx = np.zeros((pop, self.np_steps))
        jx[:, : self.nc] = du[:, :, 0] / dt
        y_ext = np.concatenate([np.full((pop, 1), snap.state.Y), host_y], axis=1)
        ydd = (y_ext[:, 2:] - 2 * y_ext[:, 1:-1] + y_ext[:, :-2]) / dt**2
        jy = np.zeros((pop, self.np_steps))
        if ydd.shape[1] >= 2:
            jy[:, 1 : ydd.shape[1]] = np.diff(ydd, axis=1) / dt
        j_c = w.jx * jx**2 + w.jy * jy**2

        rate = ctx.limits.dax_max / ctx.dt
        settle = host_v + np.sign(u_abs[:, :, 0]) * u_abs[:, :, 0] ** 2 / (2.0 * rate)
        j_e = w.efficiency * (settle - v_hat) ** 2

        urgency = float(ctx.urgency.get(vid, 1.0))
        profile = snap.profile
        j_total = (
            profile.omega_s * (j_s / norm.safety)
            + profile.omega_c * (j_c / norm.comfort)
            + profile.omega_e * urgency * (j_e / norm.efficiency)
        )
        lam = ctx.cparams.q * np.sum(j_total**2, axis=1)
        r = self._r_diag
        effort = du[:, :, 0] ** 2 * r[0] + du[:, :, 1] ** 2 * r[1] + float(beta) ** 2 * r[2]
        lam = lam + np.sum(effort, axis=1)

        # constraint excess (mirrors check_constraints on this trajectory)
        excess = np.zeros(pop)
        shaping = np.zeros(pop)

        def add(vals, bound):
            over = vals - bound
            np.add(excess, np.sum(np.where(over > BOUND_TOL, over, 0.0), axis=1), out=excess)

        def add_shape(vals, bound):
            over = vals - bound
            np.add(shaping, np.sum(np.where(over > BOUND_TOL, over, 0.0), axis=1), out=shaping)

        add(np.abs(host_v), v_lane)
        add(np.abs(u_abs[:, :, 0]), lim.ax_max)
        add(np.abs(u_abs[:, :, 1]), lim.delta_f_max)

        ax_ext = np.concatenate([np.full((pop, 1), snap.control.ax), u_abs[:, :, 0]], axis=1)
        d_ext = np.concatenate([np.full((pop, 1), snap.control.delta_f), u_abs[:, :, 1]], axis=1)
        dax = np.abs(np.diff(ax_ext, axis=1))
        add(dax, lim.dax_max)
        add(np.abs(np.diff(d_ext, axis=1)), lim.ddelta_f_max)
        add(dax / dt, lim.jx_max)

        x_ext = np.concatenate([np.full((pop, 1), snap.state.X), host_x], axis=1)
        xd = np.diff(x_ext, axis=1) / dt
        yd = np.diff(y_ext, axis=1) / dt
        xdd = (x_ext[:, 2:] - 2 * x_ext[:, 1:-1] + x_ext[:, :-2]) / dt**2
        add(np.abs(ydd), lim.ay_max)
        if ydd.shape[1] >= 2:
            add(np.abs(np.diff(ydd, axis=1) / dt), lim.jy_max)
        spd = xd[:, : xdd.shape[1]] ** 2 + yd[:, : ydd.shape[1]] ** 2
        kappa = np.abs(xd[:, : xdd.shape[1]] * ydd - xdd * yd[:, : ydd.shape[1]]) / np.maximum(
            spd, 1e-12
        ) ** 1.5
        add(kappa, 1.0 / lim.r_min)

        finite_gap = np.where(np.isfinite(lead_gap), lead_gap, lim.min_gap)
        add(lim.min_gap - finite_gap, 0.0)
        unwind_r = lim.dax_max / ctx.dt
        debt_all = 0.5 * np.maximum(u_abs[:, :, 0], 0.0) ** 2 / unwind_r
        if lane_ok.any():
            margin = np.maximum(finite_gap - lim.min_gap, 0.0)
            allow = np.where(
                np.isfinite(lead_gap), lead_v + np.sqrt(2.0 * 1.0 * margin), np.inf
            )
            add(np.where(np.isfinite(lead_gap), host_v + debt_all - allow, 0.0), 0.0)
        if wall_gap is not None:
            add(lim.min_gap - wall_gap, 0.0)
            add(host_v + unwind - env_stop, 0.0)  # settled stoppability
        if (beta == -1 or snap.change_active) and lane_ok.any():
            finite_nv = np.where(np.isfinite(nv_gap), nv_gap, np.inf)
            add(np.where(np.isfinite(finite_nv), lim.min_gap - finite_nv, 0.0), 0.0)
            margin = np.maximum(finite_nv - lim.min_gap, 0.0)
            closing = np.where(nv_x - host_x > 0, host_v - nv_v, nv_v - host_v)
            allow = np.sqrt(2.0 * 1.0 * margin)
            add(np.where(np.isfinite(finite_nv), closing - allow, 0.0), 0.0)

        if beta == 0 and not snap.change_active:
            # no-worsening with forced recovery once outside the band
            cur_dy = abs(snap.state.Y - center)
            steps = np.arange(1, self.np_steps + 1)
            dy_lim = np.maximum(
                lim.dy_max, np.where(steps >= 3, cur_dy - 0.1 * ctx.dt * (steps - 2), cur_dy)
            )
            dphi_lim = max(lim.dphi_max, abs(snap.state.phi))
            add(np.abs(y_ext[:, 1:] - center) - dy_lim[None, :], 0.0)
            add(np.abs(host_phi), dphi_lim)
        else:
            # corridor hard with slack, overshoot and approach speed soft
            cur_dy = max(lim.dy_max, abs(snap.state.Y - center))
            add(np.abs(y_ext[:, 1:] - center), cur_dy + 0.3)
            add_shape(np.abs(y_ext[:, 1:] - center), cur_dy)
            d = host_y - center
            wlat = host_v * np.sin(host_phi) + traj[:, :, 1] * np.cos(host_phi)
            cap = np.sqrt(2.0 * 1.0 * (np.abs(d) + lim.dy_max))
            approaching = wlat * d < 0
            add_shape(np.where(approaching, np.abs(wlat) - cap, 0.0), 0.0)

        road_lo = ctx.lane_model.center_y(ctx.lane_model.lane_count) - 0.5 * ctx.lane_model.lane_width
        road_hi = ctx.lane_model.center_y(1) + 0.5 * ctx.lane_model.lane_width
        add(road_lo - host_y, 0.0)
        add(host_y - road_hi, 0.0)
        return lam, excess, shaping


# ---------------------------------------------------------------------------
# differential evolution
# ---------------------------------------------------------------------------


def _de_search(
    objective: _CoalitionObjective,
    cfg: SolverConfig,
    rng: np.random.Generator,
    warm_starts: Sequence[np.ndarray],
):
    """rand/1/bin differential evolution with box projection.

    The best-so-far objective is non-increasing over iterations, so a
    larger iteration budget can never return a worse value.  Returns the
    best vector, its diagnostics and the evaluation count."""
    dim = objective.dim
    npop = max(cfg.population, 5)
    lower, upper = objective.lower, objective.upper

    pop = rng.uniform(lower, upper, size=(npop, dim)) if dim else np.zeros((npop, 0))
    pop[0] = 0.0
    for i, w in enumerate(warm_starts[: npop - 1], start=1):
        arr = np.zeros(dim)
        w = np.asarray(w, dtype=float).ravel()
        arr[: min(dim, w.size)] = w[: min(dim, w.size)]
        pop[i] = np.clip(arr, lower, upper)

    obj, lam, exc, _ = objective.evaluate(pop)
    evals = npop

    for _ in range(cfg.iterations):
        # three distinct partners per row, self excluded, via rank sampling
        base = rng.random((npop, npop - 1)).argsort(axis=1)[:, :3]
        r = base + (base >= np.arange(npop)[:, None])
        mutant = pop[r[:, 0]] + cfg.mutation * (pop[r[:, 1]] - pop[r[:, 2]])
        np.clip(mutant, lower, upper, out=mutant)
        cross = rng.uniform(size=(npop, dim)) < cfg.crossover
        if dim:
            cross[np.arange(npop), rng.integers(0, dim, size=npop)] = True
        trial = np.where(cross, mutant, pop)
        t_obj, t_lam, t_exc, _ = objective.evaluate(trial)
        evals += npop
        better = t_obj <= obj
        pop[better] = trial[better]
        obj[better] = t_obj[better]
        lam[better] = t_lam[better]
        exc[better] = t_exc[better]

    best = int(np.argmin(obj))
    return pop[best], float(obj[best]), float(lam[best]), float(exc[best]), evals


def _solve_assignment(
    ctx: SolveContext,
    members: Sequence[MemberSpec],
    betas: Mapping[str, int],
    cfg: SolverConfig,
    seed_seq: np.random.SeedSequence,
    warm_starts: Sequence[np.ndarray],
):
    objective = _CoalitionObjective(ctx, members, betas, cfg.penalty)
    rng = np.random.default_rng(seed_seq)
    best, obj, lam, exc, evals = _de_search(objective, cfg, rng, warm_starts)
    _, _, _, lam_members = objective.evaluate(best[None, :])
    return objective, best, obj, lam, exc, evals, {k: float(v[0]) for k, v in lam_members.items()}


def solve_coalition(
    ctx: SolveContext,
    members: Sequence[MemberSpec],
    cfg: SolverConfig,
    seed_material: Sequence[int],
    warm_starts: Sequence[np.ndarray] = (),
    raise_on_infeasible: bool = True,
) -> SolveResult:
    """Optimize one coalition's decision sequences.

    Every admissible lane-choice assignment runs its own seeded continuous
    search; the feasible assignment with the lowest objective wins, ties
    broken by assignment index so the reduction is deterministic no matter
    how the searches are scheduled.  Raises Infeasible when no assignment
    satisfies the constraints, unless the caller asks for the penalized
    best-effort result instead (formation treats that as a very costly
    coalition)."""
    members = list(members)
    assignments = enumerate_beta(members, ctx)
    root = np.random.SeedSequence(list(seed_material))
    children = root.spawn(len(assignments))

    def run(idx: int):
        return _solve_assignment(ctx, members, assignments[idx], cfg, children[idx], warm_starts)

    if cfg.workers > 1 and len(assignments) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            outputs = list(pool.map(run, range(len(assignments))))
    else:
        outputs = [run(i) for i in range(len(assignments))]

    evaluations = sum(o[5] for o in outputs)
    best_idx, best_key = None, None
    for idx, (_, _, obj, _, exc, _, _) in enumerate(outputs):
        # a lane change must beat keeping lane by a margin (commitment bias)
        n_changes = sum(1 for b in assignments[idx].values() if b == -1)
        score = obj * (1.0 + cfg.lane_change_margin * n_changes)
        key = (0 if exc <= FEASIBILITY_TOL else 1, score, idx)
        if best_key is None or key < best_key:
            best_key, best_idx = key, idx

    objective, du, obj, lam, exc, _, lam_members = outputs[best_idx]
    feasible = exc <= FEASIBILITY_TOL
    if not feasible and raise_on_infeasible:
        raise Infeasible(
            f"no feasible assignment for coalition {[m.vehicle_id for m in members]} "
            f"(best excess {exc:.3g})"
        )

    betas = assignments[best_idx]
    sequences: dict[str, list[DecisionAction]] = {}
    for m in members:
        du_m = objective.increments(du[None, :], m.vehicle_id)[0]
        sequences[m.vehicle_id] = [
            DecisionAction(float(du_m[q, 0]), float(du_m[q, 1]), betas[m.vehicle_id])
            for q in range(ctx.horizon.nc_steps)
        ]
    return SolveResult(
        sequences=sequences,
        lambdas=lam_members,
        total=float(sum(lam_members.values())),
        feasible=feasible,
        evaluations=evaluations,
        objective=obj,
        betas=dict(betas),
        du_flat=du.copy(),
    )


def receding_horizon_apply(result: SolveResult) -> dict[str, DecisionAction]:
    """First action of every member's sequence; the rest is discarded."""
    return {vid: seq[0] for vid, seq in result.sequences.items()}
