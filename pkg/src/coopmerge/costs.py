"""Per-vehicle decision costs (safety, comfort, efficiency), driving-style
weighting, and the constraint set evaluated on sampled trajectories.

Cost kernels broadcast over numpy arrays so the optimizer can score whole
populations at once; the scalar entry points below mirror that behaviour
one vehicle at a time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import ControlInput
from .errors import MissingNeighbor, TooShort

BOUND_TOL = 1e-9  # Table II bounds are inclusive to this tolerance


@dataclass(frozen=True)
class DrivingProfile:
    """Top-level weights over safety, comfort and efficiency."""

    omega_s: float
    omega_c: float
    omega_e: float
    name: str

    def __post_init__(self):
        if min(self.omega_s, self.omega_c, self.omega_e) < 0:
            raise ValueError("profile weights must be nonnegative")


AGGRESSIVE = DrivingProfile(0.1, 0.1, 0.8, "aggressive")
MODERATE = DrivingProfile(0.5, 0.3, 0.2, "moderate")
CONSERVATIVE = DrivingProfile(0.7, 0.2, 0.1, "conservative")
PROFILES = {p.name: p for p in (AGGRESSIVE, MODERATE, CONSERVATIVE)}


@dataclass(frozen=True)
class LaneModel:
    """Three-lane merge geometry; lanes numbered 1..3 left to right.

    Lane 3 is the on-ramp, valid for X inside merge_zone; lane centers run
    +width, 0, -width so that a left change (beta=-1) moves toward +Y.
    """

    lane_count: int = 3
    lane_width: float = 4.0
    speed_limits: tuple[float, ...] = (30.0, 30.0, 30.0)
    merge_zone: tuple[float, float] = (0.0, 200.0)

    def lane_exists(self, sigma: int) -> bool:
        return 1 <= sigma <= self.lane_count

    def center_y(self, sigma: int) -> float:
        if not self.lane_exists(sigma):
            raise MissingNeighbor(f"lane {sigma} does not exist")
        return (2 - sigma) * self.lane_width

    def v_max(self, sigma: int) -> float:
        if not self.lane_exists(sigma):
            raise MissingNeighbor(f"lane {sigma} does not exist")
        return self.speed_limits[sigma - 1]

    def lane_from_y(self, y: float) -> int:
        centers = [self.center_y(s) for s in range(1, self.lane_count + 1)]
        return int(np.argmin([abs(y - c) for c in centers])) + 1


@dataclass(frozen=True)
class CostWeights:
    """Inner weighting coefficients of the sub-cost terms.

    The source material publishes none of these values; defaults below are
    the bundled configuration and every one is scenario-overridable.
    """

    v_log: float = 0.2
    s_log: float = 50.0
    v_lat: float = 0.2
    s_lat: float = 50.0
    y_lk: float = 1.0
    phi_lk: float = 5.0
    jx: float = 0.5
    jy: float = 0.5
    efficiency: float = 1.0
    epsilon: float = 1e-3
    l_v: float = 5.0  # vehicle-length safety coefficient, m

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


@dataclass(frozen=True)
class PotentialFieldParams:
    """Shape of the risk field carried by lead/neighbor vehicles."""

    hbar: float = 1.0  # amplitude
    sigma_x: float = 10.0  # longitudinal convergence
    sigma_y: float = 2.0  # lateral convergence
    rho: float = 1.0  # exponent shape
    varsigma: float = 0.05  # velocity coupling

    def __post_init__(self):
        if self.sigma_x <= 0 or self.sigma_y <= 0:
            raise ValueError("convergence coefficients must be positive")


@dataclass(frozen=True)
class NormalizationRanges:
    """Fixed per-term reference ranges dividing the sub-costs before the
    profile weights apply; fixed ranges keep runs comparable and
    deterministic across horizon lengths.

    Defaults put the three terms on a common scale for the bundled
    merging scenarios: safety ~= 1 when closing at 3 m/s a car length
    apart, efficiency ~= 1 at 8 m/s below target, comfort well under
    either so that bounded-jerk acceleration stays worthwhile."""

    safety: float = 2.0
    comfort: float = 10.0
    efficiency: float = 5.0


@dataclass(frozen=True)
class MotionLimits:
    """Bounds of the constraint set (values from the algorithm parameter
    table; the literal following-gap cap is replaced by a minimum-gap
    bound, see min_gap)."""

    min_gap: float = 2.0  # m, replaces the literal |gap| <= 0.8 reading
    dy_max: float = 0.2  # m, lane-tracking error
    dphi_max: float = math.radians(2.0)
    jx_max: float = 2.0  # m/s^3
    jy_max: float = 2.0
    ax_max: float = 4.0  # m/s^2
    ay_max: float = 4.0
    v_max: float = 30.0  # m/s
    r_min: float = 8.0  # m, minimum turning radius
    delta_f_max: float = math.radians(30.0)
    ddelta_f_max: float = math.radians(0.3)
    dax_max: float = 0.1  # m/s^2 per step


@dataclass(frozen=True)
class CostBreakdown:
    """Weighted total and its normalized sub-costs."""

    J_s: float
    J_c: float
    J_e: float
    J_total: float
    components: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ConstraintReport:
    """All bound violations on a trajectory: (constraint id, step, excess)."""

    violations: tuple

    @property
    def feasible(self) -> bool:
        return len(self.violations) == 0

    def total_excess(self) -> float:
        return float(sum(v[2] for v in self.violations))


# ---------------------------------------------------------------------------
# cost kernels (broadcast over arrays)
# ---------------------------------------------------------------------------


def switch_eta(dv):
    """Velocity-risk switch: 1 for dv<0, 0 for dv>0, 0.5 at dv=0."""
    return 0.5 - 0.5 * np.sign(dv)


def gap_speed_cost(dv, ds, w_v, w_s, eps):
    """Shared form of the longitudinal and lateral safety terms."""
    return w_v * switch_eta(dv) * np.square(dv) + w_s / (np.square(ds) + eps)


def longitudinal_safety_cost(
    host_xy_v: tuple[float, float, float],
    lead_xy_v: tuple[float, float, float] | None,
    w: CostWeights,
) -> float:
    """Risk against the lead vehicle: dv = v_lead - v_host, gap is the
    Euclidean distance less the vehicle-length coefficient.  No lead means
    no longitudinal risk."""
    if lead_xy_v is None:
        return 0.0
    hx, hy, hv = host_xy_v
    lx, ly, lv = lead_xy_v
    dv = lv - hv
    ds = math.hypot(lx - hx, ly - hy) - w.l_v
    return float(gap_speed_cost(dv, ds, w.v_log, w.s_log, w.epsilon))


def lateral_safety_cost(
    host_xy_v: tuple[float, float, float],
    neighbor_xy_v: tuple[float, float, float] | None,
    w: CostWeights,
) -> float:
    """Risk against the target-lane neighbor: dv = v_host - v_neighbor, so
    the velocity term engages when the neighbor is the faster one."""
    if neighbor_xy_v is None:
        return 0.0
    hx, hy, hv = host_xy_v
    nx, ny, nv = neighbor_xy_v
    dv = hv - nv
    ds = math.hypot(hx - nx, hy - ny) - w.l_v
    return float(gap_speed_cost(dv, ds, w.v_lat, w.s_lat, w.epsilon))


def lane_keeping_cost(dy: float, dphi: float, w: CostWeights) -> float:
    """Quadratic penalty on lateral offset and heading error from the
    reference lane center line."""
    return w.y_lk * dy * dy + w.phi_lk * dphi * dphi


def potential_field_value(
    point_x,
    point_y,
    src_x,
    src_y,
    src_phi,
    src_vx,
    pf: PotentialFieldParams,
):
    """Risk field of one source vehicle evaluated at a point (broadcasts).

    The point is rotated into the source frame; the field decays with the
    scaled squared offsets and is skewed along the travel direction by the
    source speed (amplified ahead of the source, damped behind)."""
    c, s = np.cos(src_phi), np.sin(src_phi)
    dx = point_x - src_x
    dy = point_y - src_y
    xh = c * dx + s * dy
    yh = -s * dx + c * dy
    qx = np.square(xh) / (2.0 * pf.sigma_x**2)
    q = qx + np.square(yh) / (2.0 * pf.sigma_y**2)
    k = np.where(xh < 0, -1.0, 1.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        ups = np.where(q > 0, k * qx / np.sqrt(np.maximum(q, 1e-300)), 0.0)
    psi = -np.power(q, pf.rho) + pf.varsigma * src_vx * ups
    return pf.hbar * np.exp(psi)


def lane_change_safety_cost(
    host_xy: tuple[float, float],
    lead: tuple[float, float, float, float] | None,
    neighbor: tuple[float, float, float, float] | None,
    pf: PotentialFieldParams,
) -> float:
    """Sum of the lead and neighbor risk fields at the host position;
    sources are (X, Y, phi, vx), absent sources contribute zero."""
    total = 0.0
    for src in (lead, neighbor):
        if src is None:
            continue
        total += float(
            potential_field_value(host_xy[0], host_xy[1], src[0], src[1], src[2], src[3], pf)
        )
    return total


def safety_cost(beta: int, j_log: float, j_lat: float, j_lk: float, j_lc: float) -> float:
    """Combine the safety sub-terms under the lane-change switch.

    beta=0 keeps the longitudinal and lane-keeping terms; beta=-1 swaps in
    the lateral term; the field term is always active."""
    if beta not in (-1, 0):
        raise ValueError(f"beta must be -1 or 0, got {beta}")
    keep = (beta * beta - 1) ** 2
    change = beta * beta
    return keep * j_log + change * j_lat + keep * j_lk + j_lc


def comfort_cost(jx, jy, w: CostWeights):
    """Quadratic jerk penalty; jerks come from backward differences of the
    accelerations over the sampling time."""
    return w.jx * np.square(jx) + w.jy * np.square(jy)


def efficiency_cost(vx, v_lead, v_max_lane: float, w: CostWeights):
    """Squared deviation from the attainable speed min(lane limit, lead
    speed); with no lead the lane limit alone applies."""
    v_hat = v_max_lane if v_lead is None else np.minimum(v_max_lane, v_lead)
    return w.efficiency * np.square(vx - v_hat)


def total_cost(
    profile: DrivingProfile,
    j_s: float,
    j_c: float,
    j_e: float,
    norm: NormalizationRanges = NormalizationRanges(),
    components: dict | None = None,
) -> CostBreakdown:
    """Profile-weighted sum of the normalized sub-costs."""
    jsn = j_s / norm.safety
    jcn = j_c / norm.comfort
    jen = j_e / norm.efficiency
    total = profile.omega_s * jsn + profile.omega_c * jcn + profile.omega_e * jen
    return CostBreakdown(
        J_s=jsn, J_c=jcn, J_e=jen, J_total=float(total), components=components or {}
    )


# ---------------------------------------------------------------------------
# constraint evaluation
# ---------------------------------------------------------------------------


def derivative_estimates(x: np.ndarray, y: np.ndarray, dt: float):
    """First and second finite differences of sampled positions.

    Velocities cover samples 0..N-2, accelerations 0..N-3, matching the
    forward-difference stencils used for the curvature bound."""
    xd = np.diff(x) / dt
    yd = np.diff(y) / dt
    xdd = (x[2:] - 2.0 * x[1:-1] + x[:-2]) / dt**2
    ydd = (y[2:] - 2.0 * y[1:-1] + y[:-2]) / dt**2
    return xd, yd, xdd, ydd


def curvature_estimates(x: np.ndarray, y: np.ndarray, dt: float) -> np.ndarray:
    """Discrete path curvature |x'y'' - x''y'| / (x'^2 + y'^2)^(3/2)."""
    xd, yd, xdd, ydd = derivative_estimates(x, y, dt)
    xd, yd = xd[: len(xdd)], yd[: len(ydd)]
    speed_sq = xd**2 + yd**2
    with np.errstate(divide="ignore", invalid="ignore"):
        kappa = np.abs(xd * ydd - xdd * yd) / np.maximum(speed_sq, 1e-12) ** 1.5
    return kappa


def check_constraints(
    trajectory: np.ndarray,
    controls: np.ndarray,
    dt: float,
    limits: MotionLimits,
    lane: LaneModel | None = None,
    ref_lane: int | None = None,
    lead_gaps: np.ndarray | None = None,
    prev_control: ControlInput | None = None,
    track_bounds_active: bool = True,
) -> ConstraintReport:
    """Evaluate every decision-making bound along a sampled trajectory.

    trajectory is (N, 6) states at dt spacing (row 0 the current state);
    controls is (N-1, 2) absolute (ax, delta_f) applied between samples.
    lead_gaps, when given, holds the per-sample gap to the lead (Euclidean
    distance minus the vehicle-length coefficient).  Tracking-error bounds
    are suspended while a lane change is in progress.  Bounds are inclusive
    within BOUND_TOL; each violation records its excess magnitude.
    """
    traj = np.asarray(trajectory, dtype=float)
    ctrl = np.asarray(controls, dtype=float).reshape(-1, 2)
    if traj.shape[0] < 3:
        raise TooShort(f"need at least 3 trajectory points, got {traj.shape[0]}")

    violations: list[tuple[str, int, float]] = []

    def check(name: str, values: np.ndarray, bound: float, offset: int = 0):
        values = np.atleast_1d(values)
        over = values - bound
        for idx in np.nonzero(over > BOUND_TOL)[0]:
            violations.append((name, int(idx) + offset, float(over[idx])))

    v_bound = lane.v_max(ref_lane) if (lane is not None and ref_lane is not None) else limits.v_max
    check("speed", np.abs(traj[:, 0]), v_bound)

    ax = ctrl[:, 0]
    delta = ctrl[:, 1]
    check("accel_x", np.abs(ax), limits.ax_max)
    check("steer", np.abs(delta), limits.delta_f_max)

    if prev_control is not None:
        ax_ext = np.concatenate([[prev_control.ax], ax])
        delta_ext = np.concatenate([[prev_control.delta_f], delta])
    else:
        ax_ext, delta_ext = ax, delta
    check("accel_rate", np.abs(np.diff(ax_ext)), limits.dax_max)
    check("steer_rate", np.abs(np.diff(delta_ext)), limits.ddelta_f_max)
    jx = np.diff(ax_ext) / dt
    check("jerk_x", np.abs(jx), limits.jx_max)

    x, y = traj[:, 4], traj[:, 5]
    if traj.shape[0] >= 3:
        _, _, _, ydd = derivative_estimates(x, y, dt)
        check("accel_y", np.abs(ydd), limits.ay_max)
        if len(ydd) >= 2:
            jy = np.diff(ydd) / dt
            check("jerk_y", np.abs(jy), limits.jy_max, offset=1)
        kappa = curvature_estimates(x, y, dt)
        check("curvature", kappa, 1.0 / limits.r_min)

    if lead_gaps is not None:
        gaps = np.asarray(lead_gaps, dtype=float)
        under = limits.min_gap - gaps
        for idx in np.nonzero(under > BOUND_TOL)[0]:
            violations.append(("min_gap", int(idx), float(under[idx])))

    if track_bounds_active and lane is not None and ref_lane is not None:
        dy = np.abs(y - lane.center_y(ref_lane))
        check("lane_y", dy, limits.dy_max)
        check("lane_phi", np.abs(traj[:, 3]), limits.dphi_max)

    return ConstraintReport(violations=tuple(violations))
