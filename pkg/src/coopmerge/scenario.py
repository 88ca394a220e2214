"""Scenario files: JSON schema validation, semantic checks, and resolution
into a fully-defaulted runtime configuration.

The schema ships with the package (scenarios/scenario.schema.json) next to
the bundled merging setups.  Every tunable of the simulator appears here so
a run can echo its complete configuration.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from importlib import resources
from pathlib import Path

import jsonschema

from .costs import (
    PROFILES,
    CostWeights,
    DrivingProfile,
    LaneModel,
    MotionLimits,
    NormalizationRanges,
    PotentialFieldParams,
)
from .dynamics import VX_FLOOR, VehicleParams
from .errors import SchemaError, SemanticError
from .optimizer import CharacteristicParams, SolverConfig
from .prediction import Horizon

COALITION_MODES = ("auto", "grand", "singles")


@dataclass(frozen=True)
class VehicleSpec:
    """One roster entry: players join the game, leads are scripted
    constant-velocity traffic."""

    vehicle_id: str
    lane: int
    x: float
    y: float
    vx: float
    role: str  # "player" | "lead"
    profile: DrivingProfile


@dataclass(frozen=True)
class Scenario:
    """Fully resolved run configuration."""

    name: str
    description: str
    dt: float
    duration: float
    seed: int
    horizon: Horizon
    lane_model: LaneModel
    vehicles: tuple[VehicleSpec, ...]
    gap_threshold: float
    coalition_mode: str
    defect_tol: float
    solver: SolverConfig
    weights: CostWeights
    pf: PotentialFieldParams
    norm: NormalizationRanges
    cparams: CharacteristicParams
    limits: MotionLimits
    vparams: VehicleParams
    collision_width: float
    urgency_gain: float
    wall_decel: float

    def players(self) -> tuple[VehicleSpec, ...]:
        return tuple(v for v in self.vehicles if v.role == "player")

    def leads(self) -> tuple[VehicleSpec, ...]:
        return tuple(v for v in self.vehicles if v.role == "lead")

    def with_overrides(self, seed: int | None = None, duration: float | None = None,
                       mode: str | None = None) -> "Scenario":
        out = self
        if seed is not None:
            out = replace(out, seed=int(seed))
        if duration is not None:
            out = replace(out, duration=float(duration))
        if mode is not None:
            if mode not in COALITION_MODES:
                raise ValueError(f"unknown coalition mode {mode!r}")
            out = replace(out, coalition_mode=mode)
        return out

    def config_echo(self) -> dict:
        """Every resolved setting, for the run summary."""
        return {
            "name": self.name,
            "description": self.description,
            "dt": self.dt,
            "duration": self.duration,
            "seed": self.seed,
            "horizon": {"np": self.horizon.np_steps, "nc": self.horizon.nc_steps},
            "lanes": {
                "lane_count": self.lane_model.lane_count,
                "lane_width": self.lane_model.lane_width,
                "speed_limits": list(self.lane_model.speed_limits),
                "merge_zone": list(self.lane_model.merge_zone),
            },
            "vehicles": [
                {
                    "id": v.vehicle_id,
                    "lane": v.lane,
                    "x": v.x,
                    "y": v.y,
                    "vx": v.vx,
                    "role": v.role,
                    "profile": v.profile.name,
                }
                for v in self.vehicles
            ],
            "coalition": {
                "gap_threshold": self.gap_threshold,
                "mode": self.coalition_mode,
                "defect_tol": self.defect_tol,
            },
            "solver": asdict(self.solver),
            "weights": asdict(self.weights),
            "potential_field": asdict(self.pf),
            "normalization": asdict(self.norm),
            "characteristic": {"q": self.cparams.q, "r_diag": list(self.cparams.r_diag)},
            "limits": asdict(self.limits),
            "vehicle_params": asdict(self.vparams),
            "collision_width": self.collision_width,
            "urgency_gain": self.urgency_gain,
            "wall_decel": self.wall_decel,
        }


def _schema() -> dict:
    with resources.files("coopmerge.scenarios").joinpath("scenario.schema.json").open() as fh:
        return json.load(fh)


def bundled_scenario_path(name: str) -> Path:
    """Filesystem path of a bundled scenario (case1_a .. case2_c)."""
    p = resources.files("coopmerge.scenarios").joinpath(f"{name}.json")
    if not p.is_file():
        raise FileNotFoundError(f"no bundled scenario named {name!r}")
    return Path(str(p))


def validate_scenario_dict(raw: dict) -> None:
    """Schema-check a raw scenario document; SchemaError names the field."""
    validator = jsonschema.Draft202012Validator(_schema())
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = "$" + "".join(
            f"[{p}]" if isinstance(p, int) else f".{p}" for p in err.absolute_path
        )
        raise SchemaError(f"{path}: {err.message}")


def _build(raw: dict) -> Scenario:
    lanes_raw = raw.get("lanes", {})
    lane_model = LaneModel(
        lane_count=lanes_raw.get("lane_count", 3),
        lane_width=lanes_raw.get("lane_width", 4.0),
        speed_limits=tuple(lanes_raw.get("speed_limits", [30.0, 30.0, 30.0])),
        merge_zone=tuple(lanes_raw.get("merge_zone", [0.0, 200.0])),
    )
    if len(lane_model.speed_limits) != lane_model.lane_count:
        raise SemanticError(
            f"speed_limits has {len(lane_model.speed_limits)} entries "
            f"for {lane_model.lane_count} lanes"
        )

    vehicles = []
    for v in raw["vehicles"]:
        lane = v["lane"]
        if not lane_model.lane_exists(lane):
            raise SemanticError(f"vehicle {v['id']}: unknown lane {lane}")
        profile = PROFILES[v.get("profile", "moderate")]
        vehicles.append(
            VehicleSpec(
                vehicle_id=v["id"],
                lane=lane,
                x=float(v["x"]),
                y=float(v.get("y", lane_model.center_y(lane))),
                vx=float(v["vx"]),
                role=v.get("role", "player"),
                profile=profile,
            )
        )

    ids = [v.vehicle_id for v in vehicles]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise SemanticError(f"duplicate vehicle ids: {dupes}")

    weights = CostWeights(**raw.get("weights", {}))
    limits = MotionLimits(**raw.get("limits", {}))

    # initial roster must not physically overlap (convoy spacing below the
    # planning minimum gap is legitimate, e.g. a tight sub-coalition pair)
    vparams = VehicleParams(**raw.get("vehicle_params", {}))
    same_lane = {}
    for v in vehicles:
        same_lane.setdefault(v.lane, []).append(v)
    for lane, vs in same_lane.items():
        vs = sorted(vs, key=lambda v: v.x)
        for a, b in zip(vs, vs[1:]):
            if abs(b.x - a.x) < vparams.length:
                raise SemanticError(
                    f"vehicles {a.vehicle_id} and {b.vehicle_id} overlap on lane {lane} "
                    f"(spacing {abs(b.x - a.x):.2f} m < body length {vparams.length} m)"
                )
    for v in vehicles:
        if v.vx < VX_FLOOR:
            raise SemanticError(f"vehicle {v.vehicle_id}: vx {v.vx} below floor {VX_FLOOR}")

    horizon_raw = raw.get("horizon", {})
    coalition_raw = raw.get("coalition", {})
    char_raw = raw.get("characteristic", {})
    mode = coalition_raw.get("mode", "auto")
    if mode not in COALITION_MODES:
        raise SemanticError(f"unknown coalition mode {mode!r}")

    return Scenario(
        name=raw["name"],
        description=raw.get("description", ""),
        dt=float(raw.get("dt", 0.1)),
        duration=float(raw.get("duration", 10.0)),
        seed=int(raw.get("seed", 1)),
        horizon=Horizon(horizon_raw.get("np", 5), horizon_raw.get("nc", 2)),
        lane_model=lane_model,
        vehicles=tuple(vehicles),
        gap_threshold=float(coalition_raw.get("gap_threshold", 15.0)),
        coalition_mode=mode,
        defect_tol=float(coalition_raw.get("defect_tol", 0.02)),
        solver=SolverConfig(**raw.get("solver", {})),
        weights=weights,
        pf=PotentialFieldParams(**raw.get("potential_field", {})),
        norm=NormalizationRanges(**raw.get("normalization", {})),
        cparams=CharacteristicParams(
            q=char_raw.get("q", 1.0),
            r_diag=tuple(char_raw.get("r_diag", [1.0, 1.0, 0.0])),
        ),
        limits=limits,
        vparams=vparams,
        collision_width=float(raw.get("collision_width", 1.85)),
        urgency_gain=float(raw.get("urgency_gain", 0.05)),
        wall_decel=float(raw.get("wall_decel", 1.0)),
    )


def load_scenario(path: str | Path) -> Scenario:
    """Load, schema-validate and semantically check a scenario file."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON: {exc}") from exc
    validate_scenario_dict(raw)
    return _build(raw)


def load_bundled(name: str) -> Scenario:
    return load_scenario(bundled_scenario_path(name))
