"""Coalitional-game cooperative decision making for automated vehicles at
a three-lane merging zone.

The library layers a linearized motion-prediction model, multi-objective
decision costs, coalition formation with Shapley cost allocation, and a
seeded population-based solver into a deterministic closed-loop simulator.
"""

from .coalition import (
    CoalitionPartition,
    FormationResult,
    Player,
    SubCoalition,
    coalition_formation,
    form_sub_coalitions,
    rationality_check,
    replay_with_delay,
    shapley_allocation,
)
from .costs import (
    AGGRESSIVE,
    CONSERVATIVE,
    MODERATE,
    PROFILES,
    ConstraintReport,
    CostBreakdown,
    CostWeights,
    DrivingProfile,
    LaneModel,
    MotionLimits,
    NormalizationRanges,
    PotentialFieldParams,
    check_constraints,
    comfort_cost,
    efficiency_cost,
    lane_change_safety_cost,
    lane_keeping_cost,
    lateral_safety_cost,
    longitudinal_safety_cost,
    potential_field_value,
    safety_cost,
    switch_eta,
    total_cost,
)
from .dynamics import (
    ControlInput,
    LinearModel,
    VehicleParams,
    VehicleState,
    continuous_derivative,
    discretize,
    linearize,
    linearize_and_discretize,
    step_plant,
)
from .optimizer import (
    CharacteristicParams,
    DecisionAction,
    MemberSpec,
    SolveContext,
    SolveResult,
    SolverConfig,
    VehicleSnapshot,
    characteristic_value,
    enumerate_beta,
    receding_horizon_apply,
    solve_coalition,
)
from .prediction import (
    Horizon,
    PredictionOperator,
    augment,
    build_augmented,
    build_prediction_operator,
    predict,
    split,
)
from .scenario import Scenario, VehicleSpec, load_bundled, load_scenario
from .simulation import (
    RunSummary,
    Trace,
    export_summary,
    export_trace,
    run_closed_loop,
)

__version__ = "0.1.0"
