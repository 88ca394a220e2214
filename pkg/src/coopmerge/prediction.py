"""Augmented-state horizon prediction.

The discrete model is lifted with the previous control so that control
increments become the input: theta = [x; u_prev] (8-vector).  Stacking the
lifted model over the prediction horizon gives one affine map from the
increment sequence to the predicted output trajectory.  The model matrices
are frozen over the horizon; re-linearization happens once per decision
step, never inside it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import CONTROL_DIM, STATE_DIM, ControlInput, VehicleState
from .errors import DimensionMismatch

AUG_DIM = STATE_DIM + CONTROL_DIM


@dataclass(frozen=True)
class Horizon:
    """Prediction horizon Np and control horizon Nc, Np > Nc >= 1."""

    np_steps: int = 5
    nc_steps: int = 2

    def __post_init__(self):
        if not (self.np_steps > self.nc_steps >= 1):
            raise ValueError(f"need Np > Nc >= 1, got Np={self.np_steps} Nc={self.nc_steps}")


@dataclass(frozen=True)
class PredictionOperator:
    """Stacked horizon map: Y = Cbar @ theta + Dbar @ du_flat.

    Cbar is (6*Np, 8); Dbar is (6*Np, 2*Nc) block lower-triangular with
    block (i, j) = C A^(i-j) B for i >= j (1-indexed blocks).
    """

    Cbar: np.ndarray
    Dbar: np.ndarray
    horizon: Horizon


def augment(state: VehicleState, prev_u: ControlInput) -> np.ndarray:
    """Concatenate state and previous control into the lifted 8-vector."""
    return np.concatenate([state.as_array(), prev_u.as_array()])


def split(theta: np.ndarray) -> tuple[VehicleState, ControlInput]:
    """Inverse of augment."""
    if theta.shape != (AUG_DIM,):
        raise DimensionMismatch(f"expected ({AUG_DIM},), got {theta.shape}")
    return VehicleState.from_array(theta[:STATE_DIM]), ControlInput(
        float(theta[STATE_DIM]), float(theta[STATE_DIM + 1])
    )


def build_augmented(Ad: np.ndarray, Bd: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lifted one-step matrices (Atilde, Btilde, Ctilde) from (Ad, Bd)."""
    if Ad.shape != (STATE_DIM, STATE_DIM) or Bd.shape != (STATE_DIM, CONTROL_DIM):
        raise DimensionMismatch(f"bad shapes Ad{Ad.shape} Bd{Bd.shape}")
    atil = np.zeros((AUG_DIM, AUG_DIM))
    atil[:STATE_DIM, :STATE_DIM] = Ad
    atil[:STATE_DIM, STATE_DIM:] = Bd
    atil[STATE_DIM:, STATE_DIM:] = np.eye(CONTROL_DIM)
    btil = np.vstack([Bd, np.eye(CONTROL_DIM)])
    ctil = np.hstack([np.eye(STATE_DIM), np.zeros((STATE_DIM, CONTROL_DIM))])
    return atil, btil, ctil


def build_prediction_operator(
    atil: np.ndarray, btil: np.ndarray, ctil: np.ndarray, h: Horizon
) -> PredictionOperator:
    """Stack the lifted model over the horizon (frozen matrices)."""
    npred, nc = h.np_steps, h.nc_steps
    # powers[p] = Atilde^p
    powers = [np.eye(AUG_DIM)]
    for _ in range(npred):
        powers.append(powers[-1] @ atil)

    cbar = np.vstack([ctil @ powers[p] for p in range(1, npred + 1)])
    dbar = np.zeros((STATE_DIM * npred, CONTROL_DIM * nc))
    for i in range(1, npred + 1):
        for j in range(1, min(i, nc) + 1):
            block = ctil @ powers[i - j] @ btil
            dbar[
                (i - 1) * STATE_DIM : i * STATE_DIM,
                (j - 1) * CONTROL_DIM : j * CONTROL_DIM,
            ] = block
    return PredictionOperator(Cbar=cbar, Dbar=dbar, horizon=h)


def predict(op: PredictionOperator, theta: np.ndarray, du_seq: np.ndarray) -> np.ndarray:
    """Predicted outputs for steps 1..Np, shape (Np, 6).

    du_seq holds the Nc control increments, shape (Nc, 2); increments past
    the control horizon are zero (controls held).
    """
    h = op.horizon
    du = np.asarray(du_seq, dtype=float)
    if theta.shape != (AUG_DIM,):
        raise DimensionMismatch(f"theta must be ({AUG_DIM},), got {theta.shape}")
    if du.shape != (h.nc_steps, CONTROL_DIM):
        raise DimensionMismatch(
            f"du_seq must be ({h.nc_steps}, {CONTROL_DIM}), got {du.shape}"
        )
    y = op.Cbar @ theta + op.Dbar @ du.ravel()
    return y.reshape(h.np_steps, STATE_DIM)


def predict_batch(op: PredictionOperator, theta: np.ndarray, du_batch: np.ndarray) -> np.ndarray:
    """Vectorized predict over a population of increment sequences.

    du_batch has shape (pop, Nc*2); returns (pop, Np, 6).
    """
    y = theta @ op.Cbar.T + du_batch @ op.Dbar.T
    return y.reshape(du_batch.shape[0], op.horizon.np_steps, STATE_DIM)


def rollout(
    atil: np.ndarray,
    btil: np.ndarray,
    ctil: np.ndarray,
    theta: np.ndarray,
    du_seq: np.ndarray,
    np_steps: int,
) -> np.ndarray:
    """Step-by-step application of the lifted recursion; oracle for predict."""
    du = np.asarray(du_seq, dtype=float)
    outputs = np.zeros((np_steps, STATE_DIM))
    cur = theta.copy()
    for p in range(np_steps):
        step_du = du[p] if p < du.shape[0] else np.zeros(CONTROL_DIM)
        cur = atil @ cur + btil @ step_du
        outputs[p] = ctil @ cur
    return outputs
