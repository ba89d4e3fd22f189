"""Exception taxonomy shared by all modules.

Each class maps to one machine-readable error category; the CLI translates
categories to exit codes (see dualgossip.cli).
"""


class DualGossipError(Exception):
    """Base class for all library errors."""

    category = "error"


class InvalidConfigError(DualGossipError):
    """A configuration value violates a documented invariant."""

    category = "invalid-config"


class InvalidInputError(DualGossipError):
    """A runtime argument violates an operation precondition."""

    category = "invalid-input"


class ShapeError(DualGossipError):
    """Array dimensions do not agree."""

    category = "shape-error"


class InvalidTopologyError(DualGossipError):
    """A graph does not satisfy the requirements of the requested operation."""

    category = "invalid-topology"


class ConstructionFailure(DualGossipError):
    """A randomized construction exhausted its retry budget."""

    category = "construction-failure"


class NumericalFailure(DualGossipError):
    """An iterative numerical routine failed to converge."""

    category = "numerical-failure"

    def __init__(self, message, iterations=None):
        super().__init__(message)
        self.iterations = iterations


class DivergenceError(DualGossipError):
    """Training produced a non-finite loss or gradient."""

    category = "divergence-error"

    def __init__(self, message, agent=None, round_index=None):
        super().__init__(message)
        self.agent = agent
        self.round_index = round_index


class DataIOError(DualGossipError):
    """A data file is missing or unreadable."""

    category = "io-error"


class ParseError(DualGossipError):
    """A data file is malformed."""

    category = "parse-error"

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line
