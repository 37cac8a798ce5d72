"""Control-affine dynamics models and the local tracking error.

Every model exposes ``drift(x) -> (n,)`` and ``control_effectiveness(x) ->
(n, m)`` so the closed loop reads ``xdot = drift(x) + control_effectiveness(x)
@ u``. Models are stateless; batched variants evaluate all agents of a
homogeneous team in one call.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigInvalid, DimensionMismatch, NonFinite


def _check_state(x, n, who):
    x = np.asarray(x, dtype=float)
    if x.shape != (n,):
        raise DimensionMismatch(f"{who}: state must have shape ({n},), "
                                f"got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NonFinite(f"{who}: non-finite state {x}")
    return x


class TwoStateOscillator:
    """Planar nonlinear model used by the five-agent demonstration.

    xdot1 = -x1 + x2
    xdot2 = -0.5 x1 - 0.5 x2 (1 - (cos(2 x1) + 2)^2) + (cos(2 x1) + 2) u

    The input channel gain cos(2 x1) + 2 stays inside [1, 3], so the model
    is controllable everywhere along the second coordinate.
    """

    state_dim = 2
    input_dim = 1

    def drift(self, x):
        x = _check_state(x, 2, "TwoStateOscillator.drift")
        c = np.cos(2.0 * x[0]) + 2.0
        return np.array([-x[0] + x[1],
                         -0.5 * x[0] - 0.5 * x[1] * (1.0 - c * c)])

    def control_effectiveness(self, x):
        x = _check_state(x, 2, "TwoStateOscillator.control_effectiveness")
        return np.array([[0.0], [np.cos(2.0 * x[0]) + 2.0]])

    def drift_batch(self, X):
        X = np.asarray(X, dtype=float)
        c = np.cos(2.0 * X[:, 0]) + 2.0
        out = np.empty_like(X)
        out[:, 0] = -X[:, 0] + X[:, 1]
        out[:, 1] = -0.5 * X[:, 0] - 0.5 * X[:, 1] * (1.0 - c * c)
        return out

    def effectiveness_batch(self, X):
        X = np.asarray(X, dtype=float)
        out = np.zeros((X.shape[0], 2, 1))
        out[:, 1, 0] = np.cos(2.0 * X[:, 0]) + 2.0
        return out

    def __repr__(self):
        return "TwoStateOscillator()"


class LinearScalarDynamics:
    """One-dimensional linear model ``xdot = a x + b u``.

    Exists so the learning loop can be checked against the closed-form
    solution of the associated scalar quadratic-cost problem.
    """

    state_dim = 1
    input_dim = 1

    def __init__(self, a=-1.0, b=1.0):
        self.a = float(a)
        self.b = float(b)

    def drift(self, x):
        x = _check_state(x, 1, "LinearScalarDynamics.drift")
        return self.a * x

    def control_effectiveness(self, x):
        _check_state(x, 1, "LinearScalarDynamics.control_effectiveness")
        return np.array([[self.b]])

    def drift_batch(self, X):
        return self.a * np.asarray(X, dtype=float)

    def effectiveness_batch(self, X):
        X = np.asarray(X, dtype=float)
        return np.full((X.shape[0], 1, 1), self.b)

    def __repr__(self):
        return f"LinearScalarDynamics(a={self.a}, b={self.b})"


MODEL_REGISTRY = {
    "benchmark": TwoStateOscillator,
    "linear_scalar": LinearScalarDynamics,
}


def make_model(name, params=None):
    """Instantiate a dynamics model by registry name."""
    try:
        cls = MODEL_REGISTRY[name]
    except KeyError:
        known = ", ".join(sorted(MODEL_REGISTRY))
        raise ConfigInvalid(
            f"unknown dynamics model '{name}' (known: {known})") from None
    return cls(**(params or {}))


def local_error(topology, i, states):
    """Tracking error of agent i: its weighted neighborhood disagreement.

    Identical to ``topology.disagreement(i, states)``; exists under this
    name because downstream code treats it as the controlled quantity, not
    as a graph operation.
    """
    return topology.disagreement(i, states)


def all_local_errors(topology, states):
    """(N, n) array of every agent's tracking error at once."""
    return topology.stacked_disagreement(np.asarray(states, dtype=float))
