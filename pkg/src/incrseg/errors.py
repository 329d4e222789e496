"""Exception hierarchy. Each error carries a stable ``code`` string used by the CLI."""


class IncrsegError(Exception):
    """Base class for all library errors."""

    code = "ERROR"


class ScheduleMismatchError(IncrsegError):
    code = "SCHEDULE_MISMATCH"


class DuplicateClassError(IncrsegError):
    code = "DUPLICATE_CLASS"


class SpecInfeasibleError(IncrsegError):
    code = "SPEC_INFEASIBLE"


class PairMismatchError(IncrsegError):
    code = "PAIR_MISMATCH"


class DataIOError(IncrsegError):
    code = "IO_ERROR"


class InvalidMaskError(IncrsegError):
    code = "INVALID_MASK"


class ShapeError(IncrsegError):
    code = "SHAPE_ERROR"


class NotSimplexError(IncrsegError):
    code = "NOT_SIMPLEX"


class TopologyError(IncrsegError):
    code = "TOPOLOGY_ERROR"


class ContractError(IncrsegError):
    code = "CONTRACT_ERROR"


class LabelRangeError(IncrsegError):
    code = "LABEL_RANGE"


class NumericError(IncrsegError):
    code = "NUMERIC_ERROR"


class ConfigError(IncrsegError):
    code = "CONFIG_ERROR"


class ResumeMismatchError(IncrsegError):
    code = "RESUME_MISMATCH"
