"""Synchronous multi-agent simulation loop.

The closed loop is integrated as one ordinary differential equation over a
flat state vector holding every agent's plant state, estimator state and
learning weights. Each right-hand-side evaluation performs a full
synchronous message round: publish states, form tracking errors, compute
controls and drift surrogates, exchange their disagreements, then evaluate
every learning law. Classic fixed-step RK4 advances the whole vector, so
each stage re-evaluates the round at the stage state and the integrator
sees a smooth autonomous system (probing is a smooth function of time).

Information flow is mediated by a MessageBoard that knows the one-hop read
policy. The vectorized fast path cannot bypass it: every gather pattern the
engine uses is validated against the policy at construction time and every
evaluation registers its reads, so the audit reflects exactly what was
read. The object-level ``read`` API enforces the same policy per call and
is what a mis-wired controller trips over.
"""

from __future__ import annotations

import time as _time
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AccessViolation,
    ConfigInvalid,
    DimensionMismatch,
    GammaNotPD,
    MonitorBreach,
    NonFinite,
    NumericalDivergence,
)
from .agent_dynamics import all_local_errors  # noqa: F401  (re-export)
from .graph_topology import Topology
from .identifier import IdentifierGains, init_identifier
from .value_approx import (
    CostSpec,
    CriticGains,
    QuadraticBasis,
    projection,
)

DEFAULT_DIVERGENCE_LIMIT = 1e6

# monitor ceiling: largest gain eigenvalue may grow at most this factor
# above its initial value
GAIN_GROWTH_LIMIT = 10.0


# ---------------------------------------------------------------------------
# message board

BOARD_FIELDS = ("state", "error", "drift_surrogate", "drift_disagreement")


class MessageBoard:
    """Per-round publish/read surface with a one-hop access policy.

    Agent i may read a field of agent j only when j is i itself or one of
    i's in-neighbors. The two-hop reach of the architecture comes from the
    content, not the policy: each agent publishes the disagreement of the
    drift surrogates, which it computed from its own neighbors, so a reader
    one hop away sees information from two hops away without ever touching
    a non-neighbor's row.

    Reads through :meth:`read` are policy-checked per call. The simulation
    engine instead registers whole read patterns, each validated against
    the policy once via :meth:`validate_pattern`; either way every read
    lands in the same per-field counters that :meth:`report` summarizes.
    """

    def __init__(self, topology: Topology):
        self.topology = topology
        n = topology.n_agents
        allowed = np.zeros((n, n), dtype=bool)
        for i in range(n):
            allowed[i, i] = True
            for j in topology.neighbors(i):
                allowed[i, j] = True
        self._allowed = allowed
        self._counts = {f: np.zeros((n, n), dtype=np.int64)
                        for f in BOARD_FIELDS}
        self._values = {}
        self.violations: list[tuple[int, int, str]] = []

    def may_read(self, reader: int, owner: int) -> bool:
        return bool(self._allowed[reader, owner])

    def publish(self, owner: int, fields: dict) -> None:
        for name, value in fields.items():
            if name not in BOARD_FIELDS:
                raise KeyError(f"unknown board field '{name}'")
            self._values.setdefault(name, {})[owner] = np.array(value,
                                                               dtype=float)

    def read(self, reader: int, owner: int, field_name: str):
        if field_name not in BOARD_FIELDS:
            raise KeyError(f"unknown board field '{field_name}'")
        if not self._allowed[reader, owner]:
            self.violations.append((reader, owner, field_name))
            raise AccessViolation(reader, owner, field_name)
        self._counts[field_name][reader, owner] += 1
        try:
            return self._values[field_name][owner]
        except KeyError:
            raise KeyError(
                f"agent {owner} has not published '{field_name}' this "
                f"round") from None

    def validate_pattern(self, field_name: str, pattern) -> np.ndarray:
        """Check a (reader, owner) boolean read pattern against the policy.

        Returns the pattern as an int64 count increment. A pattern that
        touches a forbidden pair is recorded and rejected, which is how a
        mis-wired engine configuration surfaces immediately instead of
        after a run.
        """
        pattern = np.asarray(pattern, dtype=bool)
        if pattern.shape != self._allowed.shape:
            raise DimensionMismatch(
                f"pattern shape {pattern.shape}, "
                f"expected {self._allowed.shape}")
        illegal = pattern & ~self._allowed
        if illegal.any():
            reader, owner = map(int, np.argwhere(illegal)[0])
            self.violations.append((reader, owner, field_name))
            raise AccessViolation(reader, owner, field_name)
        return pattern.astype(np.int64)

    def register_reads(self, field_name: str, increments) -> None:
        self._counts[field_name] += increments

    def report(self) -> dict:
        """Audit summary: read counts by (reader, owner) and the verdict."""
        return {
            "reads": {f: self._counts[f].copy() for f in BOARD_FIELDS},
            "violations": list(self.violations),
            "verdict": "FAIL" if self.violations else "PASS",
        }


def audit_access(trace) -> dict:
    """Audit report of a finished run (PASS iff no policy violation)."""
    return trace.audit


# ---------------------------------------------------------------------------
# probing

@dataclass(frozen=True)
class ProbingSpec:
    """Exponentially decaying multi-tone excitation added to every input."""

    amplitude: float = 1.0
    decay: float = 0.1                    # 1/s envelope rate
    frequencies: tuple = (0.1, 0.7, 1.3, 2.1, 3.7)   # Hz

    def __post_init__(self):
        if self.amplitude < 0:
            raise ConfigInvalid("probing amplitude must be >= 0")
        if self.decay <= 0:
            raise ConfigInvalid("probing decay must be > 0")
        if len(self.frequencies) == 0 and self.amplitude > 0:
            raise ConfigInvalid("probing needs at least one frequency")


def draw_probe_phases(spec: ProbingSpec, rng, n_agents: int,
                      input_dim: int) -> np.ndarray:
    """Per-agent, per-channel, per-tone phases, drawn once per run."""
    return rng.uniform(0.0, 2.0 * np.pi,
                       size=(n_agents, input_dim, len(spec.frequencies)))


def probing_signal(t: float, spec: ProbingSpec,
                   phases: np.ndarray) -> np.ndarray:
    """(n_agents, input_dim) excitation at time t."""
    if spec.amplitude == 0.0:
        return np.zeros(phases.shape[:2])
    omega = 2.0 * np.pi * np.asarray(spec.frequencies)
    tones = np.sin(omega * t + phases)
    return spec.amplitude * np.exp(-spec.decay * t) * tones.sum(axis=-1)


# ---------------------------------------------------------------------------
# setup containers

@dataclass
class AgentSetup:
    """Everything one agent brings to the simulation."""

    model: object
    cost: CostSpec
    basis: QuadraticBasis
    critic: CriticGains
    actor_rate: float
    identifier: IdentifierGains
    x0: np.ndarray
    actor_bound: float = 10.0
    weights_init: float = 1.0
    gamma0_scale: float = 1.0


@dataclass
class SimSetup:
    topology: Topology
    agents: list
    step_size: float
    duration: float
    probing: ProbingSpec = field(default_factory=ProbingSpec)
    log_every: int = 10
    seed: int = 0
    exact_model: bool = False
    monitors: bool = True
    divergence_limit: float = DEFAULT_DIVERGENCE_LIMIT
    pe_window: float = 5.0


# ---------------------------------------------------------------------------
# trace

@dataclass
class SimTrace:
    """Logged time series of one run plus its audit and monitor summary.

    Weight arrays are padded to the largest basis size; ``basis_sizes``
    gives each agent's true width and the CSV writer slices accordingly.
    """

    t: np.ndarray                 # (S,)
    x: np.ndarray                 # (S, N, n)
    xhat: np.ndarray              # (S, N, n)
    error: np.ndarray             # (S, N, n)
    control: np.ndarray           # (S, N, m) applied, probing included
    policy_control: np.ndarray    # (S, N, m) actor policy alone
    residual: np.ndarray          # (S, N) Bellman residuals
    critic_weights: np.ndarray    # (S, N, Mx)
    actor_weights: np.ndarray     # (S, N, Mx)
    gain_min_eig: np.ndarray      # (S, N)
    gain_max_eig: np.ndarray      # (S, N)
    estimate_error_norm: np.ndarray   # (S, N)
    regressor: np.ndarray         # (S, N, Mx) omega, for offline checks
    psi_norm: np.ndarray          # (S, N)
    psi_bound: np.ndarray         # (S, N)
    basis_sizes: tuple
    audit: dict
    summary_extra: dict

    @property
    def n_agents(self):
        return self.x.shape[1]

    @property
    def state_dim(self):
        return self.x.shape[2]

    @property
    def input_dim(self):
        return self.control.shape[2]

    def csv_header(self):
        cols = ["t"]
        n, m = self.state_dim, self.input_dim
        for i in range(self.n_agents):
            a = i + 1
            cols += [f"x{a}_{k + 1}" for k in range(n)]
            cols += [f"xhat{a}_{k + 1}" for k in range(n)]
            cols += [f"e{a}_{k + 1}" for k in range(n)]
            cols += [f"u{a}_{k + 1}" for k in range(m)]
            cols += [f"delta{a}"]
            cols += [f"Wc{a}_{k + 1}" for k in range(self.basis_sizes[i])]
            cols += [f"Wa{a}_{k + 1}" for k in range(self.basis_sizes[i])]
            cols += [f"gamma_min{a}", f"xtilde_norm{a}"]
        return cols

    def to_csv(self, path):
        """Write the trace with full round-trip precision.

        Column order: t, then per agent its states, state estimates,
        tracking errors, controls, Bellman residual, critic weights, actor
        weights, smallest gain eigenvalue, and estimate error norm.
        """
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.csv_header())
            for r in range(self.t.size):
                row = [repr(float(self.t[r]))]
                for i in range(self.n_agents):
                    mi = self.basis_sizes[i]
                    vals = (list(self.x[r, i]) + list(self.xhat[r, i])
                            + list(self.error[r, i]) + list(self.control[r, i])
                            + [self.residual[r, i]]
                            + list(self.critic_weights[r, i, :mi])
                            + list(self.actor_weights[r, i, :mi])
                            + [self.gain_min_eig[r, i],
                               self.estimate_error_norm[r, i]])
                    row += [repr(float(v)) for v in vals]
                writer.writerow(row)

    def summary(self) -> dict:
        """Run-level verdict data for the JSON summary file."""
        audit = self.audit
        out = {
            "final_time": float(self.t[-1]),
            "final_state_norms": {
                str(i + 1): float(np.linalg.norm(self.x[-1, i]))
                for i in range(self.n_agents)},
            "max_abs_bellman_residual": {
                str(i + 1): float(np.max(np.abs(self.residual[:, i])))
                for i in range(self.n_agents)},
            "min_gain_eigenvalue": {
                str(i + 1): float(np.min(self.gain_min_eig[:, i]))
                for i in range(self.n_agents)},
            "final_estimate_error_norms": {
                str(i + 1): float(self.estimate_error_norm[-1, i])
                for i in range(self.n_agents)},
            "audit": {
                "verdict": audit["verdict"],
                "violations": [list(v) for v in audit["violations"]],
                "reads_total": {f: int(audit["reads"][f].sum())
                                for f in audit["reads"]},
            },
        }
        out.update(self.summary_extra)
        return out

    def write_summary(self, path):
        import json

        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


# ---------------------------------------------------------------------------
# engine

class _Layout:
    """Offsets of every named block inside the flat state vector."""

    def __init__(self, shapes):
        self.shapes = dict(shapes)
        self.offsets = {}
        off = 0
        for name, shape in shapes.items():
            self.offsets[name] = off
            off += int(np.prod(shape))
        self.size = off

    def view(self, z, name):
        off = self.offsets[name]
        shape = self.shapes[name]
        return z[off:off + int(np.prod(shape))].reshape(shape)


class Simulation:
    """One configured run of the full learning loop.

    Construction precomputes every coupling tensor and validates the read
    patterns against the message-board policy; :meth:`run` integrates and
    returns a :class:`SimTrace`.
    """

    def __init__(self, setup: SimSetup):
        topo = setup.topology
        n_agents = topo.n_agents
        if len(setup.agents) != n_agents:
            raise ConfigInvalid(
                f"{len(setup.agents)} agent blocks for {n_agents} agents")
        if setup.step_size <= 0 or setup.duration < setup.step_size:
            raise ConfigInvalid("need step_size > 0 and duration >= "
                                "step_size")
        if setup.log_every < 1:
            raise ConfigInvalid("log_every must be >= 1")

        self.setup = setup
        self.topology = topo
        self.board = MessageBoard(topo)
        n = topo.state_dim
        self._N, self._n = n_agents, n

        models = [a.model for a in setup.agents]
        m = models[0].input_dim
        for i, mod in enumerate(models):
            if mod.state_dim != n:
                raise ConfigInvalid(
                    f"agent {i} model has state_dim {mod.state_dim}, "
                    f"topology says {n}")
            if mod.input_dim != m:
                raise ConfigInvalid("all agents must share one input "
                                    "dimension")
        self._models = models
        self._m = m
        self._homogeneous = all(
            type(mod) is type(models[0]) and repr(mod) == repr(models[0])
            for mod in models)

        sizes = [a.basis.size for a in setup.agents]
        self._sizes = tuple(sizes)
        mx = max(sizes)
        self._Mx = mx

        # participant sets must stay inside each agent's neighborhood
        for i, a in enumerate(setup.agents):
            hood = {i} | set(topo.neighbors(i))
            extra = set(a.basis.participants) - hood
            if extra:
                raise ConfigInvalid(
                    f"agent {i} basis reads errors of non-neighbors "
                    f"{sorted(extra)}")
            missing_q = set(topo.neighbors(i)) - set(
                a.cost.neighbor_weights)
            if missing_q:
                raise ConfigInvalid(
                    f"agent {i} lacks cost weights for neighbors "
                    f"{sorted(missing_q)}")
            if a.cost.state_weight.shape != (n, n):
                raise ConfigInvalid(f"agent {i} state cost must be "
                                    f"{n}x{n}")
            if a.cost.input_weight.shape != (m, m):
                raise ConfigInvalid(f"agent {i} input cost must be "
                                    f"{m}x{m}")

        # basis selectors, padded to mx rows, flattened for cheap matmul
        gp = np.zeros((n_agents, mx, n_agents * n))
        gq = np.zeros((n_agents, mx, n_agents * n))
        for i, a in enumerate(setup.agents):
            P, Q = a.basis.full_selectors(n_agents)
            gp[i, :sizes[i]] = P
            gq[i, :sizes[i]] = Q
        self._GP2 = gp.reshape(n_agents * mx, n_agents * n)
        self._GQ2 = gq.reshape(n_agents * mx, n_agents * n)

        # policy-matrix coefficients: own block weighted by pinning plus
        # in-degree, neighbor blocks by minus the reverse edge weight
        lcoef = np.zeros((n_agents, n_agents))
        for i in range(n_agents):
            lcoef[i, i] = topo.pinning[i] + topo.in_degree[i]
            for j in topo.neighbors(i):
                lcoef[i, j] = -topo.adjacency[j, i]
        self._lcoef = lcoef

        self._coupling = np.asarray(topo.coupling)
        self._Aw = np.asarray(topo.adjacency)

        self._Qii = np.stack([a.cost.state_weight for a in setup.agents])
        self._R = np.stack([a.cost.input_weight for a in setup.agents])
        self._Rinv = np.linalg.inv(self._R)
        qpair = np.zeros((n_agents, n_agents, n, n))
        for i, a in enumerate(setup.agents):
            for j, Q in a.cost.neighbor_weights.items():
                qpair[i, j] = Q
        self._Qpair2 = qpair.reshape(n_agents * n_agents, n, n)

        self._phi_c = np.array([a.critic.rate for a in setup.agents])
        self._nu = np.array([a.critic.normalization for a in setup.agents])
        self._lam = np.array([a.critic.forgetting for a in setup.agents])
        caps = []
        for i, a in enumerate(setup.agents):
            cap = a.critic.gain_cap
            if cap is None:
                cap = GAIN_GROWTH_LIMIT * a.gamma0_scale
            if a.gamma0_scale > cap:
                raise ConfigInvalid(
                    f"agent {i} starts its gain at {a.gamma0_scale} above "
                    f"the ceiling {cap}")
            caps.append(cap)
        self._cap = np.array(caps, dtype=float)
        self._eta_a = np.array([a.actor_rate for a in setup.agents])
        self._wa_bound = np.array([a.actor_bound for a in setup.agents])
        # ceiling the criterion monitor checks, independent of the
        # forgetting saturation mechanism
        self._gain_monitor_cap = GAIN_GROWTH_LIMIT * np.array(
            [a.gamma0_scale for a in setup.agents])

        idg = [a.identifier for a in setup.agents]
        hidden = idg[0].hidden
        if any(g.hidden != hidden for g in idg):
            raise ConfigInvalid("all agents must share one identifier "
                                "hidden size")
        if any(g.sign_mode != idg[0].sign_mode for g in idg):
            raise ConfigInvalid("all agents must share one sign_mode")
        self._H = hidden
        self._kf = np.array([g.feedback for g in idg])
        self._vrate = np.array([(g.feedback * g.feedback_integral + g.leak)
                                for g in idg])
        self._sgain = np.array([g.sign_gain for g in idg])
        self._out_rate = np.array([g.out_rate for g in idg])
        self._in_rate = np.array([g.in_rate for g in idg])
        self._wf_bound = np.array([g.weight_bound for g in idg])
        self._sign_mode = idg[0].sign_mode
        self._sign_width = np.array([g.sign_width for g in idg])

        # state vector layout; the critic gain is carried as its inverse
        # (information matrix), whose dynamics stay well conditioned for
        # an explicit integrator where the gain itself would be stiff
        self._lay = _Layout({
            "x": (n_agents, n),
            "xhat": (n_agents, n),
            "wf": (n_agents, hidden + 1, n),
            "vf": (n_agents, n, hidden),
            "vint": (n_agents, n),
            "wc": (n_agents, mx),
            "wa": (n_agents, mx),
            "pinfo": (n_agents, mx, mx),
        })

        # leak floor of the information matrix: inverse of the gain
        # ceiling on live entries, identity on padding (which then has
        # zero drift and never couples to the live block)
        floor = np.zeros((n_agents, mx, mx))
        for i in range(n_agents):
            idx = np.arange(mx)
            floor[i, idx, idx] = 1.0
            live = np.arange(sizes[i])
            floor[i, live, live] = 1.0 / self._cap[i]
        self._pfloor = floor

        # deterministic substreams: one for probing phases, one per agent
        ss = np.random.SeedSequence(setup.seed)
        children = ss.spawn(n_agents + 1)
        phase_rng = np.random.default_rng(children[0])
        self._phases = draw_probe_phases(setup.probing, phase_rng,
                                         n_agents, m)
        self._omega_f = 2.0 * np.pi * np.asarray(setup.probing.frequencies)

        z0 = np.zeros(self._lay.size)
        xv = self._lay.view(z0, "x")
        xhv = self._lay.view(z0, "xhat")
        wfv = self._lay.view(z0, "wf")
        vfv = self._lay.view(z0, "vf")
        wcv = self._lay.view(z0, "wc")
        wav = self._lay.view(z0, "wa")
        pv = self._lay.view(z0, "pinfo")
        for i, a in enumerate(setup.agents):
            x0 = np.asarray(a.x0, dtype=float)
            if x0.shape != (n,):
                raise ConfigInvalid(
                    f"agent {i} x0 must have shape ({n},), got {x0.shape}")
            ident = init_identifier(a.identifier, x0,
                                    np.random.default_rng(children[i + 1]))
            xv[i] = x0
            xhv[i] = ident.estimate
            wfv[i] = ident.out_weights
            vfv[i] = ident.in_weights
            wcv[i, :sizes[i]] = a.weights_init
            wav[i, :sizes[i]] = a.weights_init
            pv[i] = np.eye(mx)
            pv[i, :sizes[i], :sizes[i]] = np.eye(sizes[i]) / a.gamma0_scale
        self._err0 = np.zeros((n_agents, n))
        self._z = z0
        self._t = 0.0
        self.clamp_events = 0

        # every gather pattern the vectorized round uses, checked against
        # the board policy up front
        one_hop = np.zeros((n_agents, n_agents), dtype=bool)
        for i in range(n_agents):
            one_hop[i, i] = True
            for j in topo.neighbors(i):
                one_hop[i, j] = True
        participants = np.zeros((n_agents, n_agents), dtype=bool)
        for i, a in enumerate(setup.agents):
            participants[i, i] = True
            for j in a.basis.participants:
                participants[i, j] = True
        cost_reads = one_hop.copy()
        self._patterns = {
            "state": self.board.validate_pattern("state", one_hop),
            "error": self.board.validate_pattern("error", cost_reads),
            "drift_surrogate": self.board.validate_pattern(
                "drift_surrogate", one_hop),
            "drift_disagreement": self.board.validate_pattern(
                "drift_disagreement", participants),
        }

        self._capture = None

    # -- model evaluation over all agents ---------------------------------

    def _drift_all(self, x):
        if self._homogeneous:
            return self._models[0].drift_batch(x)
        return np.stack([mod.drift(x[i])
                         for i, mod in enumerate(self._models)])

    def _effectiveness_all(self, x):
        if self._homogeneous:
            return self._models[0].effectiveness_batch(x)
        return np.stack([mod.control_effectiveness(x[i])
                         for i, mod in enumerate(self._models)])

    def _probe(self, t):
        spec = self.setup.probing
        if spec.amplitude == 0.0:
            return np.zeros((self._N, self._m))
        tones = np.sin(self._omega_f * t + self._phases)
        return spec.amplitude * np.exp(-spec.decay * t) * tones.sum(axis=-1)

    # -- one synchronous round --------------------------------------------

    def _rhs(self, t, z, capture=False):
        lay = self._lay
        N, n, mx = self._N, self._n, self._Mx
        x = lay.view(z, "x")
        xhat = lay.view(z, "xhat")
        wf = lay.view(z, "wf")
        vf = lay.view(z, "vf")
        vint = lay.view(z, "vint")
        wc = lay.view(z, "wc")
        wa = lay.view(z, "wa")
        pin = lay.view(z, "pinfo")

        # round 1: publish states, form tracking errors
        E = self._coupling @ x
        g = self._effectiveness_all(x)

        # feature Jacobian in global stacked-error coordinates
        eflat = E.ravel()
        pv = self._GP2 @ eflat
        qv = self._GQ2 @ eflat
        J2 = self._GP2 * qv[:, None] + self._GQ2 * pv[:, None]

        # round 2: control from the actor weights; probing excites the
        # plant but stays out of the learning signal (the residual and the
        # published surrogate evaluate the unprobed policy field)
        J3 = J2.reshape(N, mx, N * n)
        jw = (wa.reshape(N, 1, mx) @ J3).reshape(N, N, n)
        wtil = (self._lcoef[:, :, None] * jw).sum(axis=1)       # (N, n)
        u_raw = (g.transpose(0, 2, 1) @ wtil[:, :, None])
        u_pol = -0.5 * (self._Rinv @ u_raw)[:, :, 0]
        u = u_pol + self._probe(t)

        # plant
        drift = self._drift_all(x)
        gu = (g @ u[:, :, None])[:, :, 0]
        g_upol = (g @ u_pol[:, :, None])[:, :, 0]
        dx = drift + gu

        dz = np.zeros_like(z)
        dxv = lay.view(dz, "x")
        dxhv = lay.view(dz, "xhat")
        dwfv = lay.view(dz, "wf")
        dvfv = lay.view(dz, "vf")
        dvintv = lay.view(dz, "vint")
        dwcv = lay.view(dz, "wc")
        dwav = lay.view(dz, "wa")
        dpv = lay.view(dz, "pinfo")
        dxv[:] = dx

        # round 3: drift surrogates; the estimate follows the probed plant
        # while the published surrogate swaps in the policy control
        if self.setup.exact_model:
            fhat_full = dx
            fhat_pub = drift + g_upol
            dxhv[:] = dx
            err = np.zeros((N, n))
        else:
            err = x - xhat
            pre = (vf.transpose(0, 2, 1) @ xhat[:, :, None])[:, :, 0]
            th = np.tanh(pre)
            dth = 1.0 - th * th
            act = np.concatenate((np.ones((N, 1)), th), axis=1)
            f_nn = (wf.transpose(0, 2, 1) @ act[:, :, None])[:, :, 0]
            mu = self._kf[:, None] * (err - self._err0) + vint
            fhat_full = f_nn + gu + mu
            fhat_pub = f_nn + g_upol + mu
            dxhv[:] = fhat_full

            hidden_vel = (vf.transpose(0, 2, 1)
                          @ fhat_full[:, :, None])[:, :, 0]
            corr = np.concatenate((np.zeros((N, 1)), dth * hidden_vel),
                                  axis=1)
            dwf_raw = (self._out_rate[:, None, None]
                       * corr[:, :, None] * err[:, None, :])
            back = (wf @ err[:, :, None])[:, :, 0]              # (N, H+1)
            dvf_raw = (self._in_rate[:, None, None]
                       * fhat_full[:, :, None]
                       * (back[:, 1:] * dth)[:, None, :])
            dwfv[:] = self._project_family(wf, dwf_raw, self._wf_bound,
                                           axes=(1, 2))
            dvfv[:] = self._project_family(vf, dvf_raw, self._wf_bound,
                                           axes=(1, 2))
            if self._sign_mode == "smooth":
                sgn = np.tanh(err / self._sign_width[:, None])
            else:
                sgn = np.sign(err)
            dvintv[:] = self._vrate[:, None] * err \
                + self._sgain[:, None] * sgn

        # round 4: exchange surrogate disagreements, learn
        ups = self._coupling @ fhat_pub
        om = (J2 @ ups.ravel()).reshape(N, mx)

        e_q = (self._Qii @ E[:, :, None])[:, :, 0]
        quad_own = (E * e_q).sum(axis=1)
        u_q = (self._R @ u_pol[:, :, None])[:, :, 0]
        quad_u = (u_pol * u_q).sum(axis=1)
        etile = np.broadcast_to(E, (N, N, n)).reshape(N * N, n, 1)
        k_all = (self._Qpair2 @ etile)[:, :, 0].reshape(N, N, n)
        quad_nb = (self._Aw * (k_all * E[None, :, :]).sum(axis=2)).sum(axis=1)
        delta = quad_own + quad_u + quad_nb + (wc * om).sum(axis=1)

        gw = np.linalg.solve(pin, om[:, :, None])[:, :, 0]       # gamma @ om
        wgw = (om * gw).sum(axis=1)
        denom = 1.0 + self._nu * wgw
        dwcv[:] = (-(self._phi_c * delta / denom))[:, None] * gw
        dpv[:] = (-(self._phi_c * self._lam)[:, None, None]
                  * (pin - self._pfloor)
                  + (self._phi_c / denom)[:, None, None]
                  * (om[:, :, None] * om[:, None, :]))

        dwav[:] = self._project_family(
            wa, -self._eta_a[:, None] * (wa - wc), self._wa_bound, axes=(1,))

        for name, pattern in self._patterns.items():
            self.board.register_reads(name, pattern)

        if capture:
            self._capture = {
                "t": t,
                "error": E.copy(),
                "control": u.copy(),
                "policy_control": u_pol.copy(),
                "residual": delta.copy(),
                "regressor": om.copy(),
                "psi": om / np.sqrt(denom)[:, None],
                "estimate_error": err.copy(),
                "drift_surrogate": fhat_pub.copy(),
            }
        return dz

    def _project_family(self, weights, raw, bounds, axes):
        """Batched norm-ball projection, delegating to the scalar rule
        only for agents inside the boundary shell."""
        nrm = np.sqrt((weights * weights).sum(axis=axes))
        inner = bounds * (1.0 - 0.01)
        if np.all(nrm <= inner):
            return raw
        out = raw.copy()
        for i in np.flatnonzero(nrm > inner):
            out[i] = projection(weights[i], raw[i], bounds[i])
        return out

    # -- integration ------------------------------------------------------

    def _advance(self, z, t, k1):
        h = self.setup.step_size
        k2 = self._rhs(t + 0.5 * h, z + (0.5 * h) * k1)
        k3 = self._rhs(t + 0.5 * h, z + (0.5 * h) * k2)
        k4 = self._rhs(t + h, z + h * k3)
        zn = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        self._post_step(zn)
        return zn

    def _post_step(self, z):
        pv = self._lay.view(z, "pinfo")
        pv[:] = 0.5 * (pv + pv.transpose(0, 2, 1))
        for name, bounds, axes in (("wa", self._wa_bound, (1,)),
                                   ("wf", self._wf_bound, (1, 2)),
                                   ("vf", self._wf_bound, (1, 2))):
            w = self._lay.view(z, name)
            nrm = np.sqrt((w * w).sum(axis=axes))
            over = nrm > bounds
            if np.any(over):
                scale = np.where(over, bounds / np.maximum(nrm, 1e-300), 1.0)
                w *= scale.reshape((-1,) + (1,) * len(axes))
                self.clamp_events += int(np.count_nonzero(over))

    def step_once(self):
        """Advance the internal state by one step (test/demo hook)."""
        k1 = self._rhs(self._t, self._z)
        self._z = self._advance(self._z, self._t, k1)
        self._t += self.setup.step_size

    def snapshot(self) -> dict:
        """Named copies of every state block at the current time."""
        out = {"t": self._t}
        for name in self._lay.shapes:
            out[name] = self._lay.view(self._z, name).copy()
        return out

    def gain_matrices(self) -> list:
        """Per-agent critic gain matrices (inverse of the integrated
        information block, live entries only)."""
        pin = self._lay.view(self._z, "pinfo")
        return [np.linalg.inv(pin[i, :mi, :mi])
                for i, mi in enumerate(self._sizes)]

    def round_quantities(self) -> dict:
        """Evaluate one message round at the current state and return the
        published and derived per-round quantities (test/demo hook)."""
        self._rhs(self._t, self._z, capture=True)
        return dict(self._capture)

    # -- main loop --------------------------------------------------------

    def run(self) -> SimTrace:
        setup = self.setup
        h = setup.step_size
        n_steps = int(round(setup.duration / h))
        if abs(n_steps * h - setup.duration) > 1e-9 * max(1.0,
                                                          setup.duration):
            raise ConfigInvalid(
                f"duration {setup.duration} is not a whole number of steps "
                f"of size {h}")
        log_rows = [k for k in range(0, n_steps, setup.log_every)]
        log_rows.append(n_steps)
        S = len(log_rows)
        N, n, m, mx = self._N, self._n, self._m, self._Mx

        tr = {
            "t": np.zeros(S),
            "x": np.zeros((S, N, n)),
            "xhat": np.zeros((S, N, n)),
            "error": np.zeros((S, N, n)),
            "control": np.zeros((S, N, m)),
            "policy_control": np.zeros((S, N, m)),
            "residual": np.zeros((S, N)),
            "critic_weights": np.zeros((S, N, mx)),
            "actor_weights": np.zeros((S, N, mx)),
            "gain_min_eig": np.zeros((S, N)),
            "gain_max_eig": np.zeros((S, N)),
            "estimate_error_norm": np.zeros((S, N)),
            "regressor": np.zeros((S, N, mx)),
            "psi_norm": np.zeros((S, N)),
            "psi_bound": np.zeros((S, N)),
        }

        # sliding persistence-of-excitation accumulator, recorded per window
        dt_log = h * setup.log_every
        pe_rows = max(1, int(round(setup.pe_window / dt_log)))
        pe_acc = np.zeros((N, mx, mx))
        pe_count = 0
        pe_mineigs = [[] for _ in range(N)]

        wall_start = _time.perf_counter()
        row = 0
        z, t = self._z, self._t
        next_log = log_rows[row]
        try:
            for k in range(n_steps + 1):
                is_log = k == next_log
                k1 = self._rhs(k * h, z, capture=is_log)
                if is_log:
                    self._log_row(tr, row, z, k * h)
                    psi = self._capture["psi"]
                    pe_acc += psi[:, :, None] * psi[:, None, :] * dt_log
                    pe_count += 1
                    if pe_count == pe_rows:
                        for i in range(N):
                            mi = self._sizes[i]
                            pe_mineigs[i].append(float(np.linalg.eigvalsh(
                                pe_acc[i, :mi, :mi])[0]))
                        pe_acc[:] = 0.0
                        pe_count = 0
                    row += 1
                    next_log = log_rows[row] if row < S else -1
                if k == n_steps:
                    break
                z = self._advance(z, k * h, k1)
                peak = float(np.max(np.abs(z)))
                if not np.isfinite(peak):
                    raise NonFinite(
                        f"non-finite state after step {k} (t = {k * h:.6g})",
                        partial_trace=self._partial(tr, row))
                if peak > setup.divergence_limit:
                    raise NumericalDivergence(
                        f"state magnitude {peak:.3g} exceeded "
                        f"{setup.divergence_limit:.3g} after step {k} "
                        f"(t = {(k + 1) * h:.6g})",
                        partial_trace=self._partial(tr, row))
        finally:
            self._z, self._t = z, min(n_steps, k) * h

        wall = _time.perf_counter() - wall_start
        extra = {
            "wall_seconds": wall,
            "seed": setup.seed,
            "step_size": h,
            "weight_clamp_events": self.clamp_events,
            "pe_window_seconds": setup.pe_window,
            "pe_window_min_eigs": {str(i + 1): pe_mineigs[i]
                                   for i in range(N)},
        }
        trace = SimTrace(basis_sizes=self._sizes, audit=self.board.report(),
                         summary_extra=extra, **tr)
        return trace

    def _log_row(self, tr, row, z, t):
        lay = self._lay
        cap = self._capture
        x = lay.view(z, "x")
        xhat = lay.view(z, "xhat")
        pin = lay.view(z, "pinfo")
        tr["t"][row] = t
        tr["x"][row] = x
        tr["xhat"][row] = x if self.setup.exact_model else xhat
        tr["error"][row] = cap["error"]
        tr["control"][row] = cap["control"]
        tr["policy_control"][row] = cap["policy_control"]
        tr["residual"][row] = cap["residual"]
        tr["critic_weights"][row] = lay.view(z, "wc")
        tr["actor_weights"][row] = lay.view(z, "wa")
        tr["regressor"][row] = cap["regressor"]
        est_err = cap["estimate_error"]
        tr["estimate_error_norm"][row] = np.sqrt((est_err ** 2).sum(axis=1))
        psi = cap["psi"]
        psi_norm = np.sqrt((psi * psi).sum(axis=1))
        tr["psi_norm"][row] = psi_norm

        # gain eigenvalues are reciprocals of the information eigenvalues
        gmin = np.empty(self._N)
        gmax = np.empty(self._N)
        for i in range(self._N):
            mi = self._sizes[i]
            eig = np.linalg.eigvalsh(pin[i, :mi, :mi])
            if eig[0] <= 0.0:
                gmin[i], gmax[i] = -np.inf, np.inf
            else:
                gmin[i], gmax[i] = 1.0 / eig[-1], 1.0 / eig[0]
        tr["gain_min_eig"][row] = gmin
        tr["gain_max_eig"][row] = gmax
        bound = 1.0 / np.sqrt(self._nu * np.maximum(gmin, 1e-300))
        tr["psi_bound"][row] = bound

        if self.setup.monitors:
            self._check_monitors(z, t, gmin, gmax, psi_norm, bound, tr, row)

    def _check_monitors(self, z, t, gmin, gmax, psi_norm, bound, tr, row):
        if np.any(gmin <= 0.0):
            i = int(np.argmin(gmin))
            raise GammaNotPD(
                f"agent {i + 1} gain matrix lost positive definiteness at "
                f"t = {t:.6g} (lambda_min = {gmin[i]:.3g})",
                partial_trace=self._partial(tr, row + 1))
        over = gmax > self._gain_monitor_cap * (1.0 + 1e-9)
        if np.any(over):
            i = int(np.argmax(gmax / self._gain_monitor_cap))
            raise MonitorBreach(
                f"agent {i + 1} gain eigenvalue {gmax[i]:.4g} exceeded "
                f"{self._gain_monitor_cap[i]:.4g} at t = {t:.6g}",
                partial_trace=self._partial(tr, row + 1))
        if np.any(psi_norm > bound * (1.0 + 1e-9)):
            i = int(np.argmax(psi_norm / bound))
            raise MonitorBreach(
                f"agent {i + 1} regressor norm {psi_norm[i]:.4g} exceeded "
                f"its bound {bound[i]:.4g} at t = {t:.6g}",
                partial_trace=self._partial(tr, row + 1))
        lay = self._lay
        wa = lay.view(z, "wa")
        wa_n = np.sqrt((wa * wa).sum(axis=1))
        if np.any(wa_n > self._wa_bound * (1.0 + 1e-9)):
            i = int(np.argmax(wa_n / self._wa_bound))
            raise MonitorBreach(
                f"agent {i + 1} actor weight norm {wa_n[i]:.4g} exceeded "
                f"bound {self._wa_bound[i]:.4g} at t = {t:.6g}",
                partial_trace=self._partial(tr, row + 1))
        for name in ("wf", "vf"):
            w = lay.view(z, name)
            nrm = np.sqrt((w * w).sum(axis=(1, 2)))
            if np.any(nrm > self._wf_bound * (1.0 + 1e-9)):
                i = int(np.argmax(nrm / self._wf_bound))
                raise MonitorBreach(
                    f"agent {i + 1} identifier weight norm {nrm[i]:.4g} "
                    f"exceeded bound {self._wf_bound[i]:.4g} at "
                    f"t = {t:.6g}",
                    partial_trace=self._partial(tr, row + 1))

    def _partial(self, tr, rows):
        """Trace of the rows logged so far, for post-mortem inspection."""
        cut = {k: v[:rows].copy() for k, v in tr.items()}
        return SimTrace(basis_sizes=self._sizes, audit=self.board.report(),
                        summary_extra={"truncated": True}, **cut)


def run_simulation(setup: SimSetup) -> SimTrace:
    """Build a Simulation from ``setup``, run it, return the trace."""
    return Simulation(setup).run()
