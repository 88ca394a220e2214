"""Coalition formalism: sub-coalition chaining per lane, Shapley cost
allocation, individual-rationality splits of the grand coalition, and the
delayed replay of a leader's decisions by its followers.

Sub-coalitions are the atomic players of the allocation game; the members
of a sub-coalition share their leader's decisions (time-shifted).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations, permutations
from typing import Callable, Literal, Mapping, Sequence

from .costs import DrivingProfile
from .errors import EvaluatorFailure, MissingSubset
from .optimizer import HOLD_ACTION, DecisionAction

Role = Literal["merger", "main-lane-adjacent", "passive-adjacent", "lead-vehicle"]


@dataclass(frozen=True)
class Player:
    """One game participant; lead vehicles are never players."""

    vehicle_id: str
    lane: int
    profile: DrivingProfile
    role: Role


@dataclass(frozen=True)
class SubCoalition:
    """Closely spaced same-lane, same-profile vehicles acting as one player.

    Members are ordered front to back; the first member leads and the rest
    replay its decisions with a gap-dependent delay."""

    members: tuple[str, ...]
    lane: int

    @property
    def leader(self) -> str:
        return self.members[0]

    @property
    def key(self) -> str:
        return self.members[0]


@dataclass(frozen=True)
class CoalitionPartition:
    """Disjoint grouping of every sub-coalition, with its taxonomy tag."""

    coalitions: tuple[tuple[SubCoalition, ...], ...]
    type_tag: str

    def group_of(self, vehicle_id: str) -> int:
        for gi, group in enumerate(self.coalitions):
            for sub in group:
                if vehicle_id in sub.members:
                    return gi
        raise KeyError(vehicle_id)

    def vehicle_ids(self) -> tuple[str, ...]:
        out = []
        for group in self.coalitions:
            for sub in group:
                out.extend(sub.members)
        return tuple(out)


@dataclass(frozen=True)
class FormationResult:
    """Outcome of one grand-coalition split/stay decision."""

    partition: CoalitionPartition
    standalone: dict
    shapley: dict
    defectors: tuple[str, ...]
    characteristic: dict = field(default_factory=dict)


def form_sub_coalitions(
    players: Sequence[Player],
    positions: Mapping[str, tuple[float, float]],
    gap_threshold: float,
) -> list[SubCoalition]:
    """Greedy one-pass chaining per lane, front to back.

    A vehicle joins the chain ahead of it when the center-to-center gap is
    below the threshold and the driving profiles match; otherwise it starts
    a new chain.  The result partitions each lane's players in longitudinal
    order."""
    subs: list[SubCoalition] = []
    lanes = sorted({p.lane for p in players})
    for lane in lanes:
        lane_players = sorted(
            (p for p in players if p.lane == lane),
            key=lambda p: -positions[p.vehicle_id][0],
        )
        chain: list[Player] = []
        for p in lane_players:
            if chain:
                prev = chain[-1]
                px, py = positions[prev.vehicle_id]
                cx, cy = positions[p.vehicle_id]
                gap = math.hypot(px - cx, py - cy)
                if gap < gap_threshold and prev.profile == p.profile:
                    chain.append(p)
                    continue
                subs.append(SubCoalition(tuple(m.vehicle_id for m in chain), lane))
                chain = [p]
            else:
                chain = [p]
        if chain:
            subs.append(SubCoalition(tuple(m.vehicle_id for m in chain), lane))
    return subs


def shapley_allocation(
    values: Mapping[frozenset, float], player_keys: Sequence[str]
) -> dict[str, float]:
    """Exact Shapley cost allocation by permutation enumeration.

    values must cover every nonempty subset of player_keys; the returned
    allocations sum to the grand value (player counts here are small, so
    full enumeration is exact and cheap)."""
    keys = list(player_keys)
    for r in range(1, len(keys) + 1):
        for combo in combinations(keys, r):
            if frozenset(combo) not in values:
                raise MissingSubset(f"characteristic map lacks {sorted(combo)}")
    totals = {k: 0.0 for k in keys}
    orderings = list(permutations(keys))
    for order in orderings:
        seen: set[str] = set()
        prev_value = 0.0
        for k in order:
            seen.add(k)
            cur = values[frozenset(seen)]
            totals[k] += cur - prev_value
            prev_value = cur
    n_orders = len(orderings)
    return {k: totals[k] / n_orders for k in keys}


def rationality_check(
    allocation: float, standalone: float, tol: float = 0.0
) -> Literal["stay", "break_away"]:
    """Individual rationality: defect only when the allocated share strictly
    exceeds the standalone cost; ties stay.

    tol is a relative margin treating allocations within solver resolution
    of the standalone cost as ties, so numerical jitter in near-additive
    games does not masquerade as a defection."""
    return "break_away" if allocation > standalone * (1.0 + tol) + tol else "stay"


def _type_tag(groups: Sequence[Sequence[SubCoalition]], n_subs: int) -> str:
    if len(groups) == 1 and len(groups[0]) == n_subs:
        if any(len(s.members) > 1 for s in groups[0]):
            return "grand-with-sub"
        return "grand"
    if all(len(g) == 1 for g in groups):
        return "single-player"
    return "multi-player"


def coalition_formation(
    subs: Sequence[SubCoalition],
    evaluator: Callable[[tuple[SubCoalition, ...]], float],
    defect_tol: float = 0.0,
) -> FormationResult:
    """Decide the coalition structure starting from the grand coalition.

    The evaluator solves a coalition's joint decision problem and returns
    its optimized cost.  Every nonempty subset is evaluated (size order,
    then lexicographic, so evaluation order is reproducible); the grand
    value is allocated over sub-coalitions by Shapley, each sub-coalition
    defects if its share strictly exceeds its standalone cost, and the
    split follows the one-defector/two-plus-defector case table.  A merged
    coalition surviving the split is kept only if its cost does not exceed
    the sum of its parts."""
    subs = sorted(subs, key=lambda s: s.key)
    by_key = {s.key: s for s in subs}
    keys = [s.key for s in subs]

    values: dict[frozenset, float] = {}
    for r in range(1, len(keys) + 1):
        for combo in combinations(keys, r):
            group = tuple(by_key[k] for k in combo)
            try:
                values[frozenset(combo)] = float(evaluator(group))
            except Exception as exc:  # noqa: BLE001 - re-tagged with the subset
                raise EvaluatorFailure(combo, exc) from exc

    standalone = {k: values[frozenset([k])] for k in keys}

    if len(keys) == 1:
        groups: list[tuple[SubCoalition, ...]] = [tuple(subs)]
        return FormationResult(
            partition=CoalitionPartition(tuple(groups), _type_tag(groups, len(subs))),
            standalone=standalone,
            shapley=dict(standalone),
            defectors=(),
            characteristic=dict(values),
        )

    shapley = shapley_allocation(values, keys)
    defectors = tuple(
        k for k in keys
        if rationality_check(shapley[k], standalone[k], defect_tol) == "break_away"
    )

    if len(defectors) == 0:
        groups = [tuple(subs)]
    elif len(defectors) == 1:
        rest = tuple(s for s in subs if s.key != defectors[0])
        groups = [(by_key[defectors[0]],), rest]
    else:
        groups = [(s,) for s in subs]

    # merged coalitions must not cost more than their parts, else split further
    verified: list[tuple[SubCoalition, ...]] = []
    for group in groups:
        if len(group) > 1:
            merged = values[frozenset(s.key for s in group)]
            parts = sum(standalone[s.key] for s in group)
            if merged > parts * (1.0 + defect_tol) + defect_tol:
                verified.extend((s,) for s in group)
                continue
        verified.append(group)

    partition = CoalitionPartition(tuple(verified), _type_tag(verified, len(subs)))
    return FormationResult(
        partition=partition,
        standalone=standalone,
        shapley=shapley,
        defectors=defectors,
        characteristic=dict(values),
    )


def replay_delay_steps(gap: float, v_follower: float, dt: float) -> int:
    """Delay in steps between a leader's decision and its follower's copy."""
    if v_follower <= 0 or dt <= 0:
        raise ValueError("v_follower and dt must be positive")
    return int(round(gap / (v_follower * dt)))


def replay_with_delay(
    leader_decisions: Sequence[DecisionAction],
    gap: float,
    v_follower: float,
    dt: float,
) -> list[DecisionAction]:
    """Follower's decision sequence: the leader's, shifted by the travel
    delay; steps before the leader's history exist hold the current
    control."""
    tau = replay_delay_steps(gap, v_follower, dt)
    out: list[DecisionAction] = []
    for k in range(len(leader_decisions)):
        j = k - tau
        out.append(leader_decisions[j] if j >= 0 else HOLD_ACTION)
    return out
