"""Exception hierarchy shared across the package.

Three top-level categories map to CLI exit codes: ConfigInvalid (2),
NumericalDivergence (3), MonitorBreach (4). Everything else derives from
one of those or from plain GraphADPError.
"""


class GraphADPError(Exception):
    """Base class for all package errors."""


class ConfigInvalid(GraphADPError):
    """Config file or programmatic setup rejected before a run starts."""

    exit_code = 2


class NumericalDivergence(GraphADPError):
    """A simulated quantity left the trusted numeric range."""

    exit_code = 3

    def __init__(self, message, partial_trace=None):
        super().__init__(message)
        self.partial_trace = partial_trace


class MonitorBreach(GraphADPError):
    """A runtime invariant monitor failed during a run."""

    exit_code = 4

    def __init__(self, message, partial_trace=None):
        super().__init__(message)
        self.partial_trace = partial_trace


# construction / validation errors (config category)

class SelfLoop(ConfigInvalid):
    """An agent was given an edge to itself."""


class NonPositiveWeight(ConfigInvalid):
    """Edge weights must be strictly positive."""


class IndexOutOfRange(ConfigInvalid):
    """An agent index fell outside the valid range."""


class NoSpanningTree(ConfigInvalid):
    """Requested a quantity that is only defined when the pinned
    reference reaches every agent."""


class DuplicateMonomial(ConfigInvalid):
    """The same quadratic monomial was listed twice in a basis."""


class UnknownParticipant(ConfigInvalid):
    """A basis monomial references an agent outside the owner's
    neighborhood."""


class DimensionMismatch(ConfigInvalid):
    """An array argument has the wrong shape."""


class MissingNeighborValue(GraphADPError):
    """A per-agent computation was handed data that omits a required
    neighbor."""


# runtime errors

class NonFinite(NumericalDivergence):
    """NaN or Inf encountered in a simulated quantity."""


class GammaNotPD(MonitorBreach):
    """The least-squares gain matrix lost positive definiteness."""


class AlreadyOutsideBall(MonitorBreach):
    """Projection was asked to act on a point outside its ball, which
    indicates corrupted state upstream."""


class AccessViolation(MonitorBreach):
    """An agent read a message-board field it is not entitled to."""

    def __init__(self, reader, owner, field):
        super().__init__(
            f"agent {reader} may not read field '{field}' of agent {owner}")
        self.reader = reader
        self.owner = owner
        self.field = field
