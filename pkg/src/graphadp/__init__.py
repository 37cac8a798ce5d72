"""Decentralized approximate-optimal consensus control on directed graphs.

A team of control-affine agents on a directed communication graph, pinned
to a virtual reference, learns near-optimal local controllers online. Each
agent runs three coupled approximators: a neural identifier for its own
drift dynamics, a critic for its local value function, and an actor for
its policy, all adapted continuously while the simulation integrates the
closed loop.
"""

from .errors import (
    AccessViolation,
    ConfigInvalid,
    GraphADPError,
    MonitorBreach,
    NumericalDivergence,
)
from .graph_topology import Topology, build_topology
from .agent_dynamics import (
    LinearScalarDynamics,
    TwoStateOscillator,
    local_error,
    all_local_errors,
    make_model,
)
from .identifier import (
    IdentifierGains,
    IdentifierState,
    identifier_derivatives,
    init_identifier,
)
from .value_approx import (
    CostSpec,
    CriticGains,
    QuadraticBasis,
    actor_update,
    bellman_residual,
    build_basis,
    control_policy,
    critic_update,
    forgetting_growth,
    information_update,
    normalized_regressor,
    policy_gradient_matrix,
    projection,
)
from .sim_engine import (
    AgentSetup,
    MessageBoard,
    ProbingSpec,
    SimSetup,
    SimTrace,
    Simulation,
    audit_access,
    probing_signal,
    run_simulation,
)
from .cli_io import build_setup, load_config, scalar_reference_config

__version__ = "0.1.0"

__all__ = [
    "AccessViolation",
    "AgentSetup",
    "ConfigInvalid",
    "CostSpec",
    "CriticGains",
    "GraphADPError",
    "IdentifierGains",
    "IdentifierState",
    "LinearScalarDynamics",
    "MessageBoard",
    "MonitorBreach",
    "NumericalDivergence",
    "ProbingSpec",
    "QuadraticBasis",
    "SimSetup",
    "SimTrace",
    "Simulation",
    "Topology",
    "TwoStateOscillator",
    "actor_update",
    "all_local_errors",
    "audit_access",
    "bellman_residual",
    "build_basis",
    "build_setup",
    "build_topology",
    "control_policy",
    "critic_update",
    "forgetting_growth",
    "identifier_derivatives",
    "information_update",
    "init_identifier",
    "load_config",
    "local_error",
    "make_model",
    "normalized_regressor",
    "policy_gradient_matrix",
    "probing_signal",
    "projection",
    "run_simulation",
    "scalar_reference_config",
]
