"""Exception hierarchy shared across the package."""


class DQPlanError(Exception):
    """Base class for all package errors."""


# level codec
class LevelFormatError(DQPlanError, ValueError):
    pass


class NonRectangular(LevelFormatError):
    pass


class UnknownCharacter(LevelFormatError):
    def __init__(self, row, col, char):
        super().__init__(f"unknown character {char!r} at row {row}, col {col}")
        self.row = row
        self.col = col
        self.char = char


class AvatarCountNotOne(LevelFormatError):
    pass


class ExitCountNotOne(LevelFormatError):
    pass


class SubgoalOutOfBounds(DQPlanError, ValueError):
    pass


# game engine
class IllegalAction(DQPlanError):
    pass


class GameOver(DQPlanError):
    pass


# planner
class PlanningFailure(DQPlanError):
    """Raised when a search ends without a plan. Carries the search stats."""

    def __init__(self, message, stats=None):
        super().__init__(message)
        self.stats = stats


class Unreachable(PlanningFailure):
    pass


class BudgetExceeded(PlanningFailure):
    pass


class EHCStuck(PlanningFailure):
    pass


# neural
class ShapeMismatch(DQPlanError, ValueError):
    pass


class NonFiniteLoss(DQPlanError, FloatingPointError):
    pass


class NonFiniteUpdate(DQPlanError, FloatingPointError):
    pass


class IoFailure(DQPlanError, OSError):
    pass


class SpecMismatch(DQPlanError, ValueError):
    pass


class ChecksumMismatch(DQPlanError, ValueError):
    pass


# learner / harness
class NoCandidateSubgoals(DQPlanError):
    pass


class AllCandidatesExcluded(DQPlanError):
    pass


class GenerationExhausted(DQPlanError):
    pass
