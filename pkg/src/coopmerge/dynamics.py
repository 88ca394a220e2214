"""Single-track vehicle model: nonlinear derivative, analytic linearization,
zero-order-hold discretization, and an RK4 plant integrator.

State order is [vx, vy, r, phi, X, Y]; control order is [ax, delta_f].
Longitudinal tire forces are folded into the commanded acceleration ax, so
the first control channel enters the vx equation directly.  All functions
are pure: identical inputs give bitwise identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .errors import NonfiniteInput, VelocityFloor

VX_FLOOR = 1.0  # m/s, guards the 1/vx term in the slip angles

STATE_DIM = 6
CONTROL_DIM = 2


@dataclass(frozen=True)
class VehicleState:
    """Planar rigid-body state of one vehicle."""

    vx: float  # longitudinal velocity, m/s
    vy: float  # lateral velocity, m/s
    r: float  # yaw rate, rad/s
    phi: float  # yaw angle, rad
    X: float  # global longitudinal position, m
    Y: float  # global lateral position, m

    def as_array(self) -> np.ndarray:
        return np.array([self.vx, self.vy, self.r, self.phi, self.X, self.Y])

    @staticmethod
    def from_array(x: np.ndarray) -> "VehicleState":
        vx, vy, r, phi, X, Y = (float(v) for v in x)
        return VehicleState(vx, vy, r, phi, X, Y)


@dataclass(frozen=True)
class ControlInput:
    """Commanded longitudinal acceleration and front steering angle."""

    ax: float  # m/s^2
    delta_f: float  # rad

    def as_array(self) -> np.ndarray:
        return np.array([self.ax, self.delta_f])


@dataclass(frozen=True)
class VehicleParams:
    """Single-track model parameters (defaults are config-overridable)."""

    m: float = 1500.0  # kg
    Iz: float = 2500.0  # kg m^2
    lf: float = 1.2  # m, CG to front axle
    lr: float = 1.6  # m, CG to rear axle
    Cf: float = 70000.0  # N/rad
    Cr: float = 70000.0  # N/rad
    length: float = 5.0  # m

    def __post_init__(self):
        if min(self.m, self.Iz, self.lf, self.lr, self.Cf, self.Cr, self.length) <= 0:
            raise ValueError("vehicle parameters must be positive")


@dataclass(frozen=True)
class LinearModel:
    """Continuous (A, B) and zero-order-hold discrete (Ad, Bd) matrices."""

    A: np.ndarray
    B: np.ndarray
    Ad: np.ndarray
    Bd: np.ndarray
    dt: float


def _validate(state: VehicleState, u: ControlInput, vx_floor: float) -> None:
    values = (state.vx, state.vy, state.r, state.phi, state.X, state.Y, u.ax, u.delta_f)
    if not all(np.isfinite(values)):
        raise NonfiniteInput(f"non-finite state/control: {values}")
    if state.vx < vx_floor:
        raise VelocityFloor(f"vx={state.vx} below floor {vx_floor}")


def continuous_derivative(
    state: VehicleState,
    u: ControlInput,
    p: VehicleParams,
    vx_floor: float = VX_FLOOR,
) -> np.ndarray:
    """Nonlinear state derivative of the single-track model.

    Lateral tire forces are linear in the slip angles; the longitudinal
    channel is the commanded acceleration.  Requires vx >= vx_floor.
    """
    _validate(state, u, vx_floor)
    vx, vy, r, phi = state.vx, state.vy, state.r, state.phi
    ax, delta = u.ax, u.delta_f
    cd = np.cos(delta)

    alpha_f = -delta + (vy + p.lf * r) / vx
    alpha_r = (vy - p.lr * r) / vx
    fyf = -p.Cf * alpha_f
    fyr = -p.Cr * alpha_r

    return np.array(
        [
            vy * r + ax,
            -vx * r + (fyf * cd + fyr) / p.m,
            (p.lf * fyf * cd - p.lr * fyr) / p.Iz,
            r,
            vx * np.cos(phi) - vy * np.sin(phi),
            vx * np.sin(phi) + vy * np.cos(phi),
        ]
    )


def linearize(
    state: VehicleState,
    u: ControlInput,
    p: VehicleParams,
    vx_floor: float = VX_FLOOR,
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic Jacobians (A, B) of the derivative at the operating point."""
    _validate(state, u, vx_floor)
    vx, vy, r, phi = state.vx, state.vy, state.r, state.phi
    delta = u.delta_f
    cd, sd = np.cos(delta), np.sin(delta)
    cphi, sphi = np.cos(phi), np.sin(phi)

    alpha_f = -delta + (vy + p.lf * r) / vx
    fyf = -p.Cf * alpha_f

    # slip-angle partials: d(alpha_f)/dvx = -(vy + lf r)/vx^2, etc.
    daf_dvx = -(vy + p.lf * r) / vx**2
    dar_dvx = -(vy - p.lr * r) / vx**2

    A = np.zeros((STATE_DIM, STATE_DIM))
    # vx-dot = vy*r + ax
    A[0, 1] = r
    A[0, 2] = vy
    # vy-dot = -vx*r + (Fyf cos(d) + Fyr)/m
    A[1, 0] = -r + (p.Cf * cd * (-daf_dvx) + p.Cr * (-dar_dvx)) / p.m
    A[1, 1] = -(p.Cf * cd + p.Cr) / (p.m * vx)
    A[1, 2] = -vx + (-p.Cf * p.lf * cd + p.Cr * p.lr) / (p.m * vx)
    # r-dot = (lf Fyf cos(d) - lr Fyr)/Iz
    A[2, 0] = (-p.lf * cd * p.Cf * daf_dvx + p.lr * p.Cr * dar_dvx) / p.Iz
    A[2, 1] = (-p.lf * p.Cf * cd + p.lr * p.Cr) / (p.Iz * vx)
    A[2, 2] = -(p.Cf * p.lf**2 * cd + p.Cr * p.lr**2) / (p.Iz * vx)
    # phi-dot = r
    A[3, 2] = 1.0
    # X-dot, Y-dot
    A[4, 0] = cphi
    A[4, 1] = -sphi
    A[4, 3] = -vx * sphi - vy * cphi
    A[5, 0] = sphi
    A[5, 1] = cphi
    A[5, 3] = vx * cphi - vy * sphi

    B = np.zeros((STATE_DIM, CONTROL_DIM))
    B[0, 0] = 1.0
    # d/d(delta): Fyf = -Cf(-delta + ...) so dFyf/ddelta = Cf
    B[1, 1] = (p.Cf * cd - fyf * sd) / p.m
    B[2, 1] = p.lf * (p.Cf * cd - fyf * sd) / p.Iz
    return A, B


def discretize(A: np.ndarray, B: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact zero-order-hold discretization.

    Ad = exp(A dt); Bd = integral of exp(A tau) B over [0, dt], both
    obtained from one exponential of the augmented block matrix.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    n, m = B.shape
    aug = np.zeros((n + m, n + m))
    aug[:n, :n] = A
    aug[:n, n:] = B
    phi = expm(aug * dt)
    return phi[:n, :n], phi[:n, n:]


def linearize_and_discretize(
    state: VehicleState,
    u: ControlInput,
    p: VehicleParams,
    dt: float,
    vx_floor: float = VX_FLOOR,
) -> LinearModel:
    A, B = linearize(state, u, p, vx_floor)
    Ad, Bd = discretize(A, B, dt)
    return LinearModel(A=A, B=B, Ad=Ad, Bd=Bd, dt=dt)


def step_plant(
    state: VehicleState,
    u: ControlInput,
    p: VehicleParams,
    dt: float,
    vx_floor: float = VX_FLOOR,
    clamp: bool = True,
) -> VehicleState:
    """Advance the nonlinear model by RK4 over dt.

    The lateral dynamics stiffen as 1/vx, so the step is internally split
    into enough substeps to stay inside the RK4 stability region at low
    speed (a single step at ordinary road speeds).  With clamp=True
    (default) vx is held at the floor instead of raising; dt=0 returns the
    state unchanged.
    """
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    if dt == 0:
        return state

    def f(x: np.ndarray) -> np.ndarray:
        s = VehicleState.from_array(x)
        if clamp and s.vx < vx_floor:
            s = VehicleState(vx_floor, s.vy, s.r, s.phi, s.X, s.Y)
        return continuous_derivative(s, u, p, vx_floor)

    # dominant lateral eigenvalue ~ (Cf+Cr)/(m*vx); keep |lambda|*h < ~1.5
    lam = (p.Cf + p.Cr) / (p.m * max(min(state.vx, 40.0), vx_floor))
    n_sub = max(1, int(np.ceil(dt * lam / 1.5)))
    h = dt / n_sub
    x1 = state.as_array()
    for _ in range(n_sub):
        k1 = f(x1)
        k2 = f(x1 + 0.5 * h * k1)
        k3 = f(x1 + 0.5 * h * k2)
        k4 = f(x1 + h * k3)
        x1 = x1 + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if clamp and x1[0] < vx_floor:
            x1[0] = vx_floor
    return VehicleState.from_array(x1)
