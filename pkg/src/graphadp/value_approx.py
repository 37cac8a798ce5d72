"""Value-function and policy approximation for one agent.

Each agent carries a critic (weights over a quadratic monomial basis in the
neighborhood tracking errors, adapted by normalized least squares with a
forgetting factor) and an actor (a second weight vector tracking the critic
under a norm-ball projection). The control law, the learning signal
(Bellman residual) and both weight update laws live here as pure functions;
the simulation engine wires them together and the tests exercise them in
isolation.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement
from typing import Mapping

import numpy as np

from .errors import (
    DimensionMismatch,
    DuplicateMonomial,
    IndexOutOfRange,
    MissingNeighborValue,
    UnknownParticipant,
    AlreadyOutsideBall,
    ConfigInvalid,
)

# width of the outer shell (fraction of the ball radius) over which the
# projection ramps the outward radial component down to zero
PROJ_MARGIN = 0.01


def smootherstep(t):
    """C2 ramp: 0 for t <= 0, 1 for t >= 1, monotone in between."""
    t = np.clip(t, 0.0, 1.0)
    return t * t * t * (t * (6.0 * t - 15.0) + 10.0)


# ---------------------------------------------------------------------------
# basis

class QuadraticBasis:
    """Quadratic monomial features over a participant error vector.

    The participant error vector stacks the tracking errors of the owning
    agent and its neighbors (ascending agent order, ``state_dim`` entries
    each). Every feature is a product of two of its coordinates, so the
    feature map vanishes at the origin together with its gradient, which
    matches a value function that is zero with zero slope at consensus.

    ``monomials`` holds (p, q) coordinate-index pairs into that local
    vector; feature k evaluates to ``eps[p_k] * eps[q_k]``.
    """

    def __init__(self, participants, state_dim, monomials):
        self.participants = tuple(int(a) for a in participants)
        self.state_dim = int(state_dim)
        self.monomials = tuple((int(p), int(q)) for p, q in monomials)
        self.size = len(self.monomials)
        width = len(self.participants) * self.state_dim

        seen = set()
        for p, q in self.monomials:
            if not (0 <= p < width and 0 <= q < width):
                raise IndexOutOfRange(
                    f"monomial ({p}, {q}) outside coordinate range "
                    f"0..{width - 1}")
            key = (min(p, q), max(p, q))
            if key in seen:
                raise DuplicateMonomial(f"monomial {key} listed twice")
            seen.add(key)

        self._p_idx = np.array([p for p, _ in self.monomials], dtype=int)
        self._q_idx = np.array([q for _, q in self.monomials], dtype=int)
        self._width = width

    def value(self, eps):
        """Feature vector at the local error vector ``eps``."""
        eps = self._as_local(eps)
        return eps[self._p_idx] * eps[self._q_idx]

    def jacobian(self, eps):
        """(size, width) Jacobian of the feature vector w.r.t. ``eps``."""
        eps = self._as_local(eps)
        jac = np.zeros((self.size, self._width))
        rows = np.arange(self.size)
        np.add.at(jac, (rows, self._p_idx), eps[self._q_idx])
        np.add.at(jac, (rows, self._q_idx), eps[self._p_idx])
        return jac

    def jacobian_blocks(self, eps):
        """Jacobian split per participant: {agent: (size, state_dim)}."""
        jac = self.jacobian(eps)
        n = self.state_dim
        return {a: jac[:, k * n:(k + 1) * n]
                for k, a in enumerate(self.participants)}

    def full_selectors(self, n_agents):
        """One-hot factor matrices in global stacked-error coordinates.

        Returns (P, Q), each (size, n_agents * state_dim), such that with a
        global stacked error vector E: value = (P @ E) * (Q @ E) and
        jacobian = P * (Q @ E)[:, None] + Q * (P @ E)[:, None]. Used by the
        batched engine path.
        """
        n = self.state_dim
        local_to_global = np.concatenate(
            [np.arange(a * n, a * n + n) for a in self.participants])
        P = np.zeros((self.size, n_agents * n))
        Q = np.zeros((self.size, n_agents * n))
        rows = np.arange(self.size)
        P[rows, local_to_global[self._p_idx]] = 1.0
        Q[rows, local_to_global[self._q_idx]] = 1.0
        return P, Q

    def _as_local(self, eps):
        eps = np.asarray(eps, dtype=float)
        if eps.shape != (self._width,):
            raise DimensionMismatch(
                f"local error vector must have shape ({self._width},), "
                f"got {eps.shape}")
        return eps

    def __repr__(self):
        return (f"QuadraticBasis(participants={self.participants}, "
                f"size={self.size})")


def build_basis(owner, neighbors, state_dim, spec="all_quadratic"):
    """Build a QuadraticBasis for an agent from a monomial spec.

    ``spec`` is either the string \"all_quadratic\" (every distinct
    quadratic monomial over the participant coordinates, in
    combinations-with-replacement order) or a list of pairs
    ``[[agent, coord], [agent, coord]]`` with 0-based agents and
    coordinates.
    """
    participants = tuple(sorted({int(owner)} | {int(j) for j in neighbors}))
    n = int(state_dim)
    width = len(participants) * n
    pos = {a: k for k, a in enumerate(participants)}

    if isinstance(spec, str):
        if spec != "all_quadratic":
            raise ConfigInvalid(f"unknown basis spec '{spec}'")
        monomials = list(combinations_with_replacement(range(width), 2))
    else:
        monomials = []
        for pair in spec:
            if len(pair) != 2:
                raise ConfigInvalid(f"monomial {pair} must name two factors")
            flat = []
            for agent, coord in pair:
                agent, coord = int(agent), int(coord)
                if agent not in pos:
                    raise UnknownParticipant(
                        f"agent {agent} is not in the neighborhood of "
                        f"agent {owner} (participants {participants})")
                if not 0 <= coord < n:
                    raise IndexOutOfRange(
                        f"coordinate {coord} outside 0..{n - 1}")
                flat.append(pos[agent] * n + coord)
            monomials.append(tuple(flat))

    return QuadraticBasis(participants, n, monomials)


# ---------------------------------------------------------------------------
# cost

class CostSpec:
    """Per-agent quadratic running-cost weights.

    ``state_weight`` penalizes the agent's own tracking error,
    ``input_weight`` its control effort, and ``neighbor_weights[j]`` the
    tracking error of neighbor j (scaled by the edge weight a_ij inside the
    cost sum). All matrices must be symmetric positive definite.
    """

    def __init__(self, state_weight, input_weight, neighbor_weights=None):
        self.state_weight = _spd("state_weight", state_weight)
        self.input_weight = _spd("input_weight", input_weight)
        self.neighbor_weights = {
            int(j): _spd(f"neighbor_weights[{j}]", Q)
            for j, Q in (neighbor_weights or {}).items()}

    def __repr__(self):
        return (f"CostSpec(n={self.state_weight.shape[0]}, "
                f"m={self.input_weight.shape[0]}, "
                f"neighbors={sorted(self.neighbor_weights)})")


def _spd(name, mat):
    mat = np.array(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got {mat.shape}")
    if not np.allclose(mat, mat.T, atol=1e-12, rtol=0.0):
        raise ConfigInvalid(f"{name} is not symmetric")
    try:
        np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        raise ConfigInvalid(f"{name} is not positive definite") from None
    mat.setflags(write=False)
    return mat


# ---------------------------------------------------------------------------
# policy side

def policy_gradient_matrix(topology, i, jacobian_blocks):
    """Assemble the (state_dim, size) matrix mapping critic weights to the
    value-function gradient direction that the control law acts along.

    The own-error block enters with coefficient (pinning + in-degree) of
    agent i; each neighbor j's block enters with minus the weight of the
    reverse edge i -> j (how strongly j listens to i), because moving agent
    i shifts both its own error and the errors of agents that track it.
    """
    own = _block(jacobian_blocks, i, i)
    out = (topology.pinning[i] + topology.in_degree[i]) * own.T
    for j in topology.neighbors(i):
        out = out - topology.adjacency[j, i] * _block(jacobian_blocks, j, i).T
    return out


def control_policy(input_weight, effectiveness, grad_matrix, actor_weights):
    """Control law: u = -1/2 R^{-1} g(x)^T G W_a."""
    rhs = effectiveness.T @ (grad_matrix @ np.asarray(actor_weights,
                                                     dtype=float))
    return -0.5 * np.linalg.solve(input_weight, rhs)


def weighted_jacobian_sum(jacobian_blocks, participants, vectors):
    """sum_j (dsigma/de_j) @ v_j over the given participants.

    With ``vectors[j]`` the disagreement of the drift estimates at agent j,
    this is the regressor the critic learns against.
    """
    out = None
    for j in participants:
        term = _block(jacobian_blocks, j, None) @ _vector(vectors, j)
        out = term if out is None else out + term
    return out


def bellman_residual(cost, topology, i, errors, u, critic_weights, omega):
    """Scalar learning signal for agent i's critic.

    Instantaneous cost (own error, control effort, edge-weighted neighbor
    errors) plus the critic's directional derivative estimate. Uses only
    quantities agent i may read.
    """
    e_i = _vector(errors, i)
    delta = float(e_i @ cost.state_weight @ e_i)
    u = np.asarray(u, dtype=float)
    delta += float(u @ cost.input_weight @ u)
    for j in topology.neighbors(i):
        try:
            Q = cost.neighbor_weights[j]
        except KeyError:
            raise MissingNeighborValue(
                f"agent {i} has no cost weight for neighbor {j}") from None
        e_j = _vector(errors, j)
        delta += topology.adjacency[i, j] * float(e_j @ Q @ e_j)
    delta += float(np.asarray(critic_weights, dtype=float) @ omega)
    return delta


def _block(blocks, j, reader):
    try:
        return blocks[j]
    except KeyError:
        raise MissingNeighborValue(
            f"missing Jacobian block for agent {j}"
            + (f" (reader {reader})" if reader is not None else "")) from None


def _vector(values, j):
    try:
        v = values[j]
    except KeyError:
        raise MissingNeighborValue(f"missing value for agent {j}") from None
    return np.asarray(v, dtype=float)


# ---------------------------------------------------------------------------
# critic

@dataclass(frozen=True)
class CriticGains:
    """Learning-rate block for one critic.

    ``gain_cap`` bounds the least-squares gain: the forgetting growth term
    saturates logistically so that every eigenvalue of gamma stays below
    the cap (growth vanishes exactly on the ceiling). ``None`` disables
    the ceiling and leaves plain exponential forgetting.
    """

    rate: float            # phi_c, overall adaptation rate
    normalization: float   # nu, regressor normalization weight
    forgetting: float      # lambda in (0, 1), data discount rate
    gain_cap: float | None = None

    def __post_init__(self):
        if self.rate <= 0 or self.normalization <= 0:
            raise ConfigInvalid("critic rate and normalization must be > 0")
        if not 0.0 < self.forgetting < 1.0:
            raise ConfigInvalid(
                f"forgetting factor must lie in (0, 1), "
                f"got {self.forgetting}")
        if self.gain_cap is not None and self.gain_cap <= 0:
            raise ConfigInvalid("gain_cap must be positive or None")


def forgetting_growth(gamma, gains: CriticGains):
    """Growth term of the gain dynamics: bounded-gain forgetting.

    Plain exponential regrowth ``lambda * gamma`` when no cap is set;
    with a cap the factor becomes ``lambda * gamma (I - gamma / cap)``,
    which vanishes on the ceiling, so no eigenvalue of gamma can cross it.
    """
    gamma = np.asarray(gamma, dtype=float)
    if gains.gain_cap is None:
        return gains.forgetting * gamma
    return gains.forgetting * (gamma - (gamma @ gamma) / gains.gain_cap)


def critic_update(gamma, omega, delta, gains: CriticGains):
    """Time derivatives (dW_c, dgamma) of the critic weights and gain.

    Normalized least squares: the weight moves against the regressor scaled
    by the residual; the gain matrix loses a rank-one term along the
    regressor and regrows through the forgetting factor (saturating at the
    gain cap).
    """
    gamma = np.asarray(gamma, dtype=float)
    omega = np.asarray(omega, dtype=float)
    g_om = gamma @ omega
    denom = 1.0 + gains.normalization * float(omega @ g_om)
    d_weights = -gains.rate * g_om * (float(delta) / denom)
    d_gamma = gains.rate * (forgetting_growth(gamma, gains)
                            - np.outer(g_om, g_om) / denom)
    return d_weights, d_gamma


def information_update(info, omega, gains: CriticGains):
    """Time derivative of the inverse gain (information) matrix.

    The engine integrates ``P = inv(gamma)`` instead of gamma itself: the
    rank-one gain plunge becomes additive growth of P and the forgetting
    regrowth becomes a linear leak toward the floor ``I / cap``, both far
    better conditioned for an explicit integrator than the equivalent
    gamma dynamics. Related by ``dP = -P dgamma P`` exactly.
    """
    info = np.asarray(info, dtype=float)
    omega = np.asarray(omega, dtype=float)
    g_om = np.linalg.solve(info, omega)
    denom = 1.0 + gains.normalization * float(omega @ g_om)
    if gains.gain_cap is None:
        leak = -gains.forgetting * info
    else:
        eye = np.eye(info.shape[0])
        leak = -gains.forgetting * (info - eye / gains.gain_cap)
    return gains.rate * (leak + np.outer(omega, omega) / denom)


def normalized_regressor(omega, gamma, normalization):
    """Regressor scaled by the normalization denominator, psi.

    Its norm is bounded by 1/sqrt(normalization * lambda_min(gamma)),
    which the runtime monitors check on every logged step.
    """
    omega = np.asarray(omega, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    return omega / np.sqrt(1.0 + normalization * float(omega @ gamma @ omega))


# ---------------------------------------------------------------------------
# actor

def actor_update(actor_weights, critic_weights, rate, bound):
    """Projected derivative pulling the actor weights toward the critic's."""
    actor_weights = np.asarray(actor_weights, dtype=float)
    raw = -rate * (actor_weights - np.asarray(critic_weights, dtype=float))
    return projection(actor_weights, raw, bound)


def projection(current, raw_derivative, bound):
    """Smooth norm-ball projection of a weight derivative.

    Identity while ``current`` sits inside the inner ball of radius
    ``bound * (1 - PROJ_MARGIN)`` or while the derivative points inward;
    across the outer shell the outward radial component is scaled down by a
    C2 ramp reaching zero at the boundary, so trajectories cannot leave the
    ball. Matrices are treated as flattened vectors (Frobenius geometry).
    """
    current = np.asarray(current, dtype=float)
    raw = np.asarray(raw_derivative, dtype=float)
    if current.shape != raw.shape:
        raise DimensionMismatch(
            f"current {current.shape} vs derivative {raw.shape}")
    nrm = float(np.linalg.norm(current))
    if nrm > bound * (1.0 + 1e-9):
        raise AlreadyOutsideBall(
            f"norm {nrm:.6g} exceeds projection bound {bound:.6g}")
    inner = bound * (1.0 - PROJ_MARGIN)
    if nrm <= inner:
        return raw.copy()
    unit = current / nrm
    radial = float(np.sum(raw * unit))
    if radial <= 0.0:
        return raw.copy()
    scale = 1.0 - smootherstep((nrm - inner) / (bound - inner))
    return raw + (scale - 1.0) * radial * unit
