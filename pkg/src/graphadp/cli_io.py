"""Config schema, command-line entry points, and file output.

The JSON config speaks 1-based agent ids (matching the CSV column labels);
everything is converted to the library's 0-based indexing here. Unknown
keys are rejected so typos fail loudly; keys starting with an underscore
are documentation (provenance notes) and are ignored.
"""

from __future__ import annotations

import argparse
import json
import re
import sys

import numpy as np

from .agent_dynamics import make_model
from .errors import (
    ConfigInvalid,
    GraphADPError,
    MonitorBreach,
    NumericalDivergence,
)
from .graph_topology import Topology, build_topology
from .identifier import IdentifierGains
from .sim_engine import (
    AgentSetup,
    ProbingSpec,
    SimSetup,
    Simulation,
)
from .value_approx import CostSpec, CriticGains, build_basis

OPTIMAL_SCALAR_GAIN = np.sqrt(2.0) - 1.0

_MATRIX_SHORTHAND = re.compile(
    r"^\s*(?:([0-9.eE+\-]+)\s*\*\s*)?I\s*([0-9]+)\s*$")


# ---------------------------------------------------------------------------
# schema helpers

def _section(raw, key, context, required=True, default=None):
    if key not in raw:
        if required:
            raise ConfigInvalid(f"{context}: missing required key '{key}'")
        return default
    return raw[key]

def _reject_unknown(raw, allowed, context):
    unknown = [k for k in raw
               if k not in allowed and not k.startswith("_")]
    if unknown:
        raise ConfigInvalid(
            f"{context}: unknown key(s) {unknown}; allowed: "
            f"{sorted(allowed)}")

def _number(value, context):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigInvalid(f"{context}: expected a number, got {value!r}")
    return float(value)

def _matrix(value, size, context):
    """Accept a nested list, a bare number (scaled identity), or the
    shorthand string 'c*Ik' / 'Ik'."""
    if isinstance(value, str):
        match = _MATRIX_SHORTHAND.match(value)
        if not match:
            raise ConfigInvalid(
                f"{context}: bad matrix shorthand {value!r} "
                f"(expected e.g. 'I2' or '0.5*I2')")
        scale = float(match.group(1)) if match.group(1) else 1.0
        k = int(match.group(2))
        if k != size:
            raise ConfigInvalid(
                f"{context}: shorthand size {k} does not match required "
                f"size {size}")
        return scale * np.eye(size)
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value) * np.eye(size)
    arr = np.asarray(value, dtype=float)
    if arr.shape != (size, size):
        raise ConfigInvalid(
            f"{context}: expected a {size}x{size} matrix, "
            f"got shape {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# config -> SimSetup

def load_config(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigInvalid(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"config {path} is not valid JSON: "
                            f"{exc}") from None

def apply_override(raw: dict, assignment: str) -> None:
    """Apply one ``dotted.path=value`` override to the raw config dict.

    The value is parsed as JSON when possible, else kept as a string.
    Integer path segments index into lists.
    """
    if "=" not in assignment:
        raise ConfigInvalid(f"override '{assignment}' must look like "
                            f"path=value")
    path, _, text = assignment.partition("=")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    keys = path.strip().split(".")
    node = raw
    for k in keys[:-1]:
        if isinstance(node, list):
            node = node[int(k)]
        elif k in node:
            node = node[k]
        else:
            node[k] = {}
            node = node[k]
        if not isinstance(node, (dict, list)):
            raise ConfigInvalid(f"override path '{path}' descends into a "
                                f"non-container at '{k}'")
    last = keys[-1]
    if isinstance(node, list):
        node[int(last)] = value
    else:
        node[last] = value

def build_topology_from_config(raw: dict) -> Topology:
    _reject_unknown(raw, {"n_agents", "state_dim", "edges", "pinning"},
                    "topology")
    n_agents = int(_number(_section(raw, "n_agents", "topology"),
                           "topology.n_agents"))
    state_dim = int(_number(_section(raw, "state_dim", "topology"),
                            "topology.state_dim"))
    edges = []
    for k, edge in enumerate(_section(raw, "edges", "topology",
                                      required=False, default=[])):
        if len(edge) != 3:
            raise ConfigInvalid(
                f"topology.edges[{k}]: expected [from, to, weight]")
        src, dst, w = edge
        edges.append((int(src) - 1, int(dst) - 1, float(w)))
    pinning = {}
    for agent, gain in _section(raw, "pinning", "topology",
                                required=False, default={}).items():
        if agent.startswith("_"):
            continue
        pinning[int(agent) - 1] = _number(gain,
                                          f"topology.pinning[{agent}]")
    return build_topology(n_agents, state_dim, edges, pinning)

def _build_agent(raw: dict, i: int, topology: Topology) -> AgentSetup:
    ctx = f"agents[{i}]"
    _reject_unknown(raw, {"dynamics", "cost", "basis", "gains",
                          "identifier", "x0", "sign_mode"}, ctx)
    n = topology.state_dim

    dyn = _section(raw, "dynamics", ctx)
    _reject_unknown(dyn, {"model", "params"}, f"{ctx}.dynamics")
    model = make_model(_section(dyn, "model", f"{ctx}.dynamics"),
                       _section(dyn, "params", f"{ctx}.dynamics",
                                required=False, default={}))
    m = model.input_dim

    cost_raw = _section(raw, "cost", ctx)
    _reject_unknown(cost_raw, {"Q_ii", "Q_ij", "R"}, f"{ctx}.cost")
    neighbor_weights = {}
    for agent, Q in _section(cost_raw, "Q_ij", f"{ctx}.cost",
                             required=False, default={}).items():
        if agent.startswith("_"):
            continue
        neighbor_weights[int(agent) - 1] = _matrix(
            Q, n, f"{ctx}.cost.Q_ij[{agent}]")
    cost = CostSpec(
        state_weight=_matrix(_section(cost_raw, "Q_ii", f"{ctx}.cost"),
                             n, f"{ctx}.cost.Q_ii"),
        input_weight=_matrix(_section(cost_raw, "R", f"{ctx}.cost"),
                             m, f"{ctx}.cost.R"),
        neighbor_weights=neighbor_weights)

    basis_raw = _section(raw, "basis", ctx)
    if isinstance(basis_raw, dict):
        _reject_unknown(basis_raw, {"monomials"}, f"{ctx}.basis")
        basis_raw = _section(basis_raw, "monomials", f"{ctx}.basis")
    if isinstance(basis_raw, str):
        spec = basis_raw
    else:
        spec = []
        for k, pair in enumerate(basis_raw):
            if len(pair) != 2:
                raise ConfigInvalid(
                    f"{ctx}.basis.monomials[{k}]: a monomial is a pair of "
                    f"[agent, coordinate] factors")
            spec.append([[int(a) - 1, int(c) - 1] for a, c in pair])
    basis = build_basis(i, topology.neighbors(i), n, spec)

    gains = _section(raw, "gains", ctx)
    _reject_unknown(gains, {"eta_a", "eta_c", "nu", "lambda",
                            "gamma0_scale", "actor_bound", "gamma_cap",
                            "weights_init"}, f"{ctx}.gains")
    gctx = f"{ctx}.gains"
    gamma_cap = _section(gains, "gamma_cap", gctx, required=False)
    critic = CriticGains(
        rate=_number(_section(gains, "eta_c", gctx), f"{gctx}.eta_c"),
        normalization=_number(_section(gains, "nu", gctx), f"{gctx}.nu"),
        forgetting=_number(_section(gains, "lambda", gctx, required=False,
                                    default=0.5), f"{gctx}.lambda"),
        gain_cap=None if gamma_cap is None
        else _number(gamma_cap, f"{gctx}.gamma_cap"))

    ident = _section(raw, "identifier", ctx)
    _reject_unknown(ident, {"M_f", "k_f", "alpha_f", "gamma_f", "beta_1f",
                            "Gamma_wf", "Gamma_vf", "weight_bound",
                            "init_scale"}, f"{ctx}.identifier")
    ictx = f"{ctx}.identifier"

    def ident_num(key, default):
        return _number(_section(ident, key, ictx, required=False,
                                default=default), f"{ictx}.{key}")

    identifier = IdentifierGains(
        hidden=int(_number(_section(ident, "M_f", ictx), f"{ictx}.M_f")),
        feedback=ident_num("k_f", 600.0),
        feedback_integral=ident_num("alpha_f", 300.0),
        leak=ident_num("gamma_f", 5.0),
        sign_gain=ident_num("beta_1f", 0.2),
        out_rate=ident_num("Gamma_wf", 0.1),
        in_rate=ident_num("Gamma_vf", 0.1),
        weight_bound=ident_num("weight_bound", 10.0),
        sign_mode=raw.get("sign_mode", "exact"),
        init_scale=ident_num("init_scale", 1.0))

    x0 = np.asarray(_section(raw, "x0", ctx), dtype=float)

    return AgentSetup(
        model=model,
        cost=cost,
        basis=basis,
        critic=critic,
        actor_rate=_number(_section(gains, "eta_a", gctx), f"{gctx}.eta_a"),
        identifier=identifier,
        x0=x0,
        actor_bound=_number(_section(gains, "actor_bound", gctx,
                                     required=False, default=10.0),
                            f"{gctx}.actor_bound"),
        weights_init=_number(_section(gains, "weights_init", gctx,
                                      required=False, default=1.0),
                             f"{gctx}.weights_init"),
        gamma0_scale=_number(_section(gains, "gamma0_scale", gctx,
                                      required=False, default=1.0),
                             f"{gctx}.gamma0_scale"))

def build_setup(raw: dict) -> SimSetup:
    """Validate a raw config dict and assemble the simulation setup."""
    _reject_unknown(raw, {"topology", "agents", "sim", "output"}, "config")
    topology = build_topology_from_config(_section(raw, "topology",
                                                   "config"))
    agents_raw = _section(raw, "agents", "config")
    if len(agents_raw) != topology.n_agents:
        raise ConfigInvalid(
            f"config: {len(agents_raw)} agent blocks for "
            f"{topology.n_agents} agents")
    agents = [_build_agent(block, i, topology)
              for i, block in enumerate(agents_raw)]

    sim = _section(raw, "sim", "config")
    _reject_unknown(sim, {"h", "T", "log_every", "seed", "probing",
                          "exact_model", "monitors", "pe_window"}, "sim")
    probing_raw = _section(sim, "probing", "sim", required=False,
                           default={})
    _reject_unknown(probing_raw, {"A", "kappa", "freqs"}, "sim.probing")
    defaults = ProbingSpec()
    probing = ProbingSpec(
        amplitude=_number(_section(probing_raw, "A", "sim.probing",
                                   required=False,
                                   default=defaults.amplitude),
                          "sim.probing.A"),
        decay=_number(_section(probing_raw, "kappa", "sim.probing",
                               required=False, default=defaults.decay),
                      "sim.probing.kappa"),
        frequencies=tuple(_section(probing_raw, "freqs", "sim.probing",
                                   required=False,
                                   default=defaults.frequencies)))

    return SimSetup(
        topology=topology,
        agents=agents,
        step_size=_number(_section(sim, "h", "sim"), "sim.h"),
        duration=_number(_section(sim, "T", "sim"), "sim.T"),
        probing=probing,
        log_every=int(_number(_section(sim, "log_every", "sim",
                                       required=False, default=10),
                              "sim.log_every")),
        seed=int(_number(_section(sim, "seed", "sim", required=False,
                                  default=0), "sim.seed")),
        exact_model=bool(_section(sim, "exact_model", "sim",
                                  required=False, default=False)),
        monitors=bool(_section(sim, "monitors", "sim", required=False,
                               default=True)),
        pe_window=_number(_section(sim, "pe_window", "sim", required=False,
                                   default=5.0), "sim.pe_window"))

def output_paths(raw: dict) -> tuple[str, str]:
    out = _section(raw, "output", "config", required=False, default={})
    _reject_unknown(out, {"trace_path", "summary_path"}, "output")
    return (out.get("trace_path", "trace.csv"),
            out.get("summary_path", "summary.json"))


# ---------------------------------------------------------------------------
# built-in scalar reference problem

def scalar_reference_config(exact_model: bool = True) -> dict:
    """Single linear scalar agent with quadratic cost and an e^2 basis.

    The associated optimal gain has the closed form sqrt(2) - 1, which
    makes this the calibration target for the whole learning loop.
    """
    return {
        "topology": {
            "n_agents": 1, "state_dim": 1,
            "edges": [], "pinning": {"1": 1.0},
        },
        "agents": [{
            "dynamics": {"model": "linear_scalar",
                         "params": {"a": -1.0, "b": 1.0}},
            "cost": {"Q_ii": 1.0, "R": 1.0},
            "basis": {"monomials": [[[1, 1], [1, 1]]]},
            "gains": {"eta_a": 2.0, "eta_c": 5.0, "nu": 0.05,
                      "lambda": 0.3, "gamma0_scale": 1.0,
                      "actor_bound": 10.0, "weights_init": 1.0},
            "identifier": {"M_f": 5, "k_f": 100.0, "alpha_f": 30.0,
                           "gamma_f": 5.0, "beta_1f": 0.2,
                           "Gamma_wf": 0.1, "Gamma_vf": 0.1},
            "x0": [1.0],
            "sign_mode": "exact",
        }],
        "sim": {"h": 0.0025, "T": 30.0, "log_every": 10, "seed": 7,
                "exact_model": bool(exact_model),
                "probing": {"A": 1.0, "kappa": 0.1,
                            "freqs": [0.1, 0.7, 1.3, 2.1, 3.7]}},
    }


# ---------------------------------------------------------------------------
# commands

def cmd_run(args) -> int:
    raw = load_config(args.config)
    for assignment in args.set or []:
        apply_override(raw, assignment)
    if args.seed is not None:
        raw.setdefault("sim", {})["seed"] = args.seed
    trace_path, summary_path = output_paths(raw)
    setup = build_setup(raw)
    _ensure_parent(trace_path)
    _ensure_parent(summary_path)
    try:
        trace = Simulation(setup).run()
    except (NumericalDivergence, MonitorBreach) as exc:
        if exc.partial_trace is not None:
            trace_stub = trace_path + ".partial"
            exc.partial_trace.to_csv(trace_stub)
            print(f"partial trace written to {trace_stub}",
                  file=sys.stderr)
        raise
    trace.to_csv(trace_path)
    trace.write_summary(summary_path)
    summary = trace.summary()
    norms = ", ".join(f"{k}: {v:.4g}"
                      for k, v in summary["final_state_norms"].items())
    print(f"t = {summary['final_time']:g} s, "
          f"final state norms {{{norms}}}")
    print(f"audit: {summary['audit']['verdict']}, "
          f"wall {summary['wall_seconds']:.2f} s")
    print(f"trace: {trace_path}\nsummary: {summary_path}")
    return 0

def cmd_check(args) -> int:
    raw = load_config(args.config)
    setup = build_setup(raw)
    topo = setup.topology
    print(f"agents: {topo.n_agents}, state_dim: {topo.state_dim}")
    edges = [(j + 1, i + 1, topo.adjacency[i, j])
             for i in range(topo.n_agents)
             for j in range(topo.n_agents) if topo.adjacency[i, j] > 0]
    print("edges (from -> to, weight):")
    for src, dst, w in edges:
        print(f"  {src} -> {dst}  ({w:g})")
    pins = {i + 1: topo.pinning[i]
            for i in range(topo.n_agents) if topo.pinning[i] > 0}
    print(f"pinned agents: { {k: float(v) for k, v in pins.items()} }")
    has_tree = topo.has_spanning_tree()
    print(f"reference spanning tree: {'YES' if has_tree else 'NO'}")
    if has_tree:
        print(f"consensus gain s = {topo.consensus_gain():.12g}")
    sizes = {i + 1: a.basis.size for i, a in enumerate(setup.agents)}
    print(f"basis sizes: {sizes}")
    return 0 if has_tree else 1

def cmd_oracle_lqr(args) -> int:
    raw = scalar_reference_config(exact_model=args.exact_model)
    for assignment in args.set or []:
        apply_override(raw, assignment)
    if args.seed is not None:
        raw["sim"]["seed"] = args.seed
    setup = build_setup(raw)
    trace = Simulation(setup).run()
    critic_final = float(trace.critic_weights[-1, 0, 0])
    actor_final = float(trace.actor_weights[-1, 0, 0])
    target = OPTIMAL_SCALAR_GAIN
    err = abs(critic_final - target)
    tol = 0.02 if args.exact_model else 0.05
    print(f"critic weight at T: {critic_final:.6f}")
    print(f"actor  weight at T: {actor_final:.6f}")
    print(f"optimal gain:       {target:.6f}")
    print(f"critic error:       {err:.6f} (tolerance {tol})")
    verdict = err <= tol
    print("PASS" if verdict else "FAIL")
    return 0 if verdict else 1

def _ensure_parent(path):
    import os

    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)


# ---------------------------------------------------------------------------
# entry point

def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graphadp",
        description="Decentralized approximate-optimal consensus control "
                    "simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a simulation from a JSON "
                                       "config")
    p_run.add_argument("config")
    p_run.add_argument("--set", action="append", metavar="PATH=VALUE",
                       help="override a config entry, e.g. sim.T=10")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.set_defaults(func=cmd_run)

    p_check = sub.add_parser("check", help="validate a config and report "
                                           "its topology")
    p_check.add_argument("config")
    p_check.set_defaults(func=cmd_check)

    p_oracle = sub.add_parser(
        "oracle-lqr",
        help="run the built-in scalar reference problem and compare the "
             "learned gain against the closed form")
    p_oracle.add_argument("--exact-model", action="store_true",
                          help="bypass the identifier with the true "
                               "dynamics")
    p_oracle.add_argument("--set", action="append", metavar="PATH=VALUE")
    p_oracle.add_argument("--seed", type=int, default=None)
    p_oracle.set_defaults(func=cmd_oracle_lqr)
    return parser

def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except GraphADPError as exc:
        code = getattr(exc, "exit_code", 1)
        print(f"error: {exc}", file=sys.stderr)
        return code

if __name__ == "__main__":
    sys.exit(main())
