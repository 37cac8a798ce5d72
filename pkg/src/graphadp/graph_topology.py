"""Directed communication topology with a pinned virtual reference.

The reference node is virtual: it is never simulated, holds the origin, and
enters only through per-agent pinning gains. Edge weights are stored in an
adjacency matrix ``a[i, j]`` meaning "agent i listens to agent j with weight
a_ij", so row i collects the in-neighborhood of agent i.

All agent indices in this module are 0-based. The JSON config layer speaks
1-based agent ids and converts on load.
"""

from __future__ import annotations

from collections import deque
from typing import Mapping

import numpy as np

from .errors import (
    DimensionMismatch,
    IndexOutOfRange,
    MissingNeighborValue,
    NonPositiveWeight,
    NoSpanningTree,
    SelfLoop,
)

# below this, the smallest singular value is treated as numerically zero
_SINGULAR_TOL = 1e-10


class Topology:
    """Immutable weighted digraph over ``n_agents`` nodes plus pinning.

    Parameters
    ----------
    adjacency : (N, N) array
        ``adjacency[i, j]`` is the weight with which agent i weighs agent
        j's value; nonzero exactly when the edge j -> i exists.
    pinning : (N,) array
        ``pinning[i]`` is the weight of the virtual reference edge into
        agent i; zero means agent i does not see the reference directly.
    state_dim : int
        Dimension n of each agent's state vector.
    """

    def __init__(self, adjacency, pinning, state_dim):
        adjacency = np.array(adjacency, dtype=float)
        pinning = np.array(pinning, dtype=float)
        if adjacency.ndim != 2 or adjacency.shape[0] != adjacency.shape[1]:
            raise DimensionMismatch(
                f"adjacency must be square, got {adjacency.shape}")
        if pinning.shape != (adjacency.shape[0],):
            raise DimensionMismatch(
                f"pinning must have shape ({adjacency.shape[0]},), "
                f"got {pinning.shape}")
        if np.any(np.diag(adjacency) != 0.0):
            bad = int(np.flatnonzero(np.diag(adjacency))[0])
            raise SelfLoop(f"agent {bad} has a self-edge")
        if np.any(adjacency < 0.0) or np.any(pinning < 0.0):
            raise NonPositiveWeight("edge and pinning weights must be >= 0")
        if int(state_dim) < 1 or adjacency.shape[0] < 1:
            raise DimensionMismatch("need at least one agent and one state "
                                    "dimension")

        self.n_agents = adjacency.shape[0]
        self.state_dim = int(state_dim)
        self.adjacency = adjacency
        self.pinning = pinning
        self.in_degree = adjacency.sum(axis=1)
        self.laplacian = np.diag(self.in_degree) - adjacency
        self.coupling = self.laplacian + np.diag(pinning)
        self._neighbors = tuple(
            tuple(int(j) for j in np.flatnonzero(adjacency[i]))
            for i in range(self.n_agents))
        # read-only views so shared instances cannot be mutated in place
        for arr in (self.adjacency, self.pinning, self.in_degree,
                    self.laplacian, self.coupling):
            arr.setflags(write=False)

    # -- neighborhood structure -------------------------------------------

    def neighbors(self, i: int) -> tuple[int, ...]:
        """Agents whose values agent i weighs directly (in-neighbors)."""
        return self._neighbors[i]

    def two_hop(self, i: int) -> frozenset[int]:
        """Agents whose data can reach agent i in at most two edges.

        This is the outer limit of what agent i's computations may touch;
        the simulation's access audit checks reads against it.
        """
        reach = {i} | set(self._neighbors[i])
        for j in self._neighbors[i]:
            reach |= set(self._neighbors[j])
        return frozenset(reach)

    def has_spanning_tree(self) -> bool:
        """True iff the virtual reference reaches every agent.

        The reference has an edge to agent i exactly when ``pinning[i] > 0``;
        from there information flows along j -> i edges (``adjacency[i, j] >
        0``). Plain BFS over that relation.
        """
        seen = {int(i) for i in np.flatnonzero(self.pinning)}
        queue = deque(seen)
        while queue:
            j = queue.popleft()
            for i in np.flatnonzero(self.adjacency[:, j]):
                i = int(i)
                if i not in seen:
                    seen.add(i)
                    queue.append(i)
        return len(seen) == self.n_agents

    def consensus_gain(self) -> float:
        """Smallest singular value s of the coupling matrix L + A0.

        For any stacked state X with stacked disagreement E the bound
        ``norm(X) <= norm(E) / s`` holds, which is what turns disagreement
        decay into state decay. Only meaningful when the reference reaches
        every agent, so a missing spanning tree is refused rather than
        answered with a vacuous 0.
        """
        if not self.has_spanning_tree():
            raise NoSpanningTree("consensus gain undefined without a "
                                 "reference spanning tree")
        s = float(np.linalg.svd(self.coupling, compute_uv=False)[-1])
        if s <= _SINGULAR_TOL:
            raise NoSpanningTree(
                f"coupling matrix numerically singular (s = {s:.3e})")
        return s

    # -- disagreement operators -------------------------------------------

    def disagreement(self, i: int, values) -> np.ndarray:
        """Weighted disagreement of agent i's value with its neighborhood.

        Computes ``sum_j a_ij (y_i - y_j) + p_i y_i`` over the in-neighbors
        j of agent i, where p_i is the pinning gain (the reference holds the
        origin, so its term is just ``p_i y_i``).

        ``values`` may be a full (N, n) array or a mapping from agent index
        to vector; the mapping only needs entries for i and its neighbors.
        """
        y_i = self._value_of(values, i, i)
        out = (self.in_degree[i] + self.pinning[i]) * y_i
        for j in self._neighbors[i]:
            out = out - self.adjacency[i, j] * self._value_of(values, j, i)
        return out

    def stacked_disagreement(self, stacked) -> np.ndarray:
        """Disagreement of every agent at once, in stacked form.

        Accepts an (N, n) array or a flat (N*n,) vector and returns the
        same layout. Equals the Kronecker product ``(coupling kron I_n) @
        stacked`` but is computed blockwise.
        """
        arr = np.asarray(stacked, dtype=float)
        flat_in = arr.ndim == 1
        if flat_in:
            if arr.size != self.n_agents * self.state_dim:
                raise DimensionMismatch(
                    f"expected {self.n_agents * self.state_dim} entries, "
                    f"got {arr.size}")
            arr = arr.reshape(self.n_agents, self.state_dim)
        elif arr.shape != (self.n_agents, self.state_dim):
            raise DimensionMismatch(
                f"expected shape {(self.n_agents, self.state_dim)}, "
                f"got {arr.shape}")
        out = self.coupling @ arr
        return out.ravel() if flat_in else out

    def _value_of(self, values, j, reader):
        if isinstance(values, Mapping):
            try:
                y = values[j]
            except KeyError:
                raise MissingNeighborValue(
                    f"agent {reader} needs the value of agent {j}") from None
        else:
            values = np.asarray(values, dtype=float)
            if values.shape != (self.n_agents, self.state_dim):
                raise DimensionMismatch(
                    f"expected shape {(self.n_agents, self.state_dim)}, "
                    f"got {values.shape}")
            y = values[j]
        y = np.asarray(y, dtype=float)
        if y.shape != (self.state_dim,):
            raise DimensionMismatch(
                f"agent {j} value must have shape ({self.state_dim},), "
                f"got {y.shape}")
        return y

    def __repr__(self):
        n_edges = int(np.count_nonzero(self.adjacency))
        n_pins = int(np.count_nonzero(self.pinning))
        return (f"Topology(n_agents={self.n_agents}, "
                f"state_dim={self.state_dim}, edges={n_edges}, "
                f"pinned={n_pins})")


def build_topology(n_agents, state_dim, edges=(), pinning=None) -> Topology:
    """Construct a Topology from an edge list and pinning gains.

    Parameters
    ----------
    edges : iterable of (src, dst, weight)
        ``(j, i, w)`` adds the edge j -> i, i.e. agent i listens to agent j
        with weight w > 0. Indices are 0-based.
    pinning : mapping {agent: gain} or (N,) array-like, optional
        Strictly positive gains for agents that see the reference.
    """
    n_agents = int(n_agents)
    adjacency = np.zeros((n_agents, n_agents))
    for src, dst, weight in edges:
        src, dst = int(src), int(dst)
        for idx in (src, dst):
            if not 0 <= idx < n_agents:
                raise IndexOutOfRange(
                    f"agent index {idx} outside 0..{n_agents - 1}")
        if src == dst:
            raise SelfLoop(f"edge ({src} -> {dst}) is a self-loop")
        if not weight > 0:
            raise NonPositiveWeight(
                f"edge ({src} -> {dst}) has weight {weight}")
        adjacency[dst, src] = float(weight)

    gains = np.zeros(n_agents)
    if pinning is not None:
        if isinstance(pinning, Mapping):
            items = pinning.items()
        else:
            items = enumerate(pinning)
        for agent, gain in items:
            agent = int(agent)
            if not 0 <= agent < n_agents:
                raise IndexOutOfRange(
                    f"pinned agent {agent} outside 0..{n_agents - 1}")
            if gain < 0:
                raise NonPositiveWeight(
                    f"pinning gain for agent {agent} is {gain}")
            gains[agent] = float(gain)

    return Topology(adjacency, gains, state_dim)
