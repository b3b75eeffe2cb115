"""Exception hierarchy shared by the planners and the simulator."""


class ElasKitError(Exception):
    """Base class for every error raised by elaskit."""


# cluster model
class UnknownDevice(ElasKitError):
    pass


class DuplicateDeviceId(ElasKitError):
    pass


class EventOnDeadDevice(ElasKitError):
    pass


class EmptyStage(ElasKitError):
    """All members of a stage are gone; the graph planner has to repopulate it."""

    def __init__(self, stage):
        super().__init__(f"stage {stage} has no live members")
        self.stage = stage


# cost model
class ProfileOutOfRange(ElasKitError):
    pass


# dataflow
class NoSurvivors(ElasKitError):
    pass


class DimensionMismatch(ElasKitError):
    pass


# graph planner
class Infeasible(ElasKitError):
    """No contiguous partition fits the memory caps."""

    def __init__(self, message, stage=None, deficit_bytes=None):
        super().__init__(message)
        self.stage = stage
        self.deficit_bytes = deficit_bytes


class IncompatibleL(ElasKitError):
    pass


# rng
class MissingBackup(ElasKitError):
    pass


# parameter fabric
class CoverageMismatch(ElasKitError):
    pass


class StaleSnapshot(ElasKitError):
    pass


# communicator
class DisconnectedGroup(ElasKitError):
    pass


# migration
class InsufficientTargetMemory(ElasKitError):
    pass


class MismatchedDpDegree(ElasKitError):
    pass


# simulator
class SimOom(ElasKitError):
    pass


class NoRecoveryInRun(ElasKitError):
    pass


class ConfigError(ElasKitError):
    """Bad config or trace input; carries an optional 1-based line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
