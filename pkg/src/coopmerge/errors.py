"""Exception hierarchy for the coopmerge package."""


class CoopMergeError(Exception):
    """Base class for all package errors."""


class NonfiniteInput(CoopMergeError):
    """A state or control contained NaN or infinity."""


class VelocityFloor(CoopMergeError):
    """Longitudinal velocity below the slip-angle singularity guard."""


class DimensionMismatch(CoopMergeError):
    """An array argument has the wrong shape for the operator."""


class MissingNeighbor(CoopMergeError):
    """The requested adjacent lane does not exist."""


class MissingSubset(CoopMergeError):
    """A characteristic map lacks a coalition value needed for allocation."""


class EvaluatorFailure(CoopMergeError):
    """A coalition evaluation failed; carries the offending member set."""

    def __init__(self, members, cause):
        super().__init__(f"evaluation failed for coalition {sorted(members)}: {cause}")
        self.members = frozenset(members)
        self.cause = cause


class Infeasible(CoopMergeError):
    """No lane-change assignment admits a constraint-satisfying sequence."""


class TooShort(CoopMergeError):
    """Trajectory has too few samples for finite-difference checks."""


class SchemaError(CoopMergeError):
    """Scenario file violates the published schema; message names the field."""


class SemanticError(CoopMergeError):
    """Scenario file is schema-valid but physically inconsistent."""


class SimulationAbort(CoopMergeError):
    """Closed-loop run stopped on a collision; carries the partial trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
