"""Online neural state-derivative estimator for one agent.

Each agent runs a single-hidden-layer network that learns its own unknown
drift term from measured state, plus a robust integral feedback that pulls
the state estimate onto the measured trajectory. The sum

    drift_estimate(xhat) + effectiveness(x) @ u + feedback

is both the state-estimate derivative and the published drift surrogate the
critics consume, so the learning loop never touches the true drift.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigInvalid, DimensionMismatch, NonFinite
from .value_approx import projection


@dataclass(frozen=True)
class IdentifierGains:
    """Gains of the estimator feedback and the weight adaptation.

    ``feedback`` (k_f) is the proportional estimate-error gain,
    ``feedback_integral`` (alpha_f) and ``leak`` (gamma_f) shape the
    integral path, and ``sign_gain`` (beta_1f) scales the signum term that
    rejects the network's residual reconstruction error. ``out_rate`` and
    ``in_rate`` are scalar adaptation rates for the output and input layer
    (isotropic gain matrices). ``sign_mode`` selects the exact elementwise
    signum or a tanh surrogate with width ``sign_width``.
    """

    hidden: int                   # neuron count of the hidden layer
    feedback: float = 600.0
    feedback_integral: float = 300.0
    leak: float = 5.0
    sign_gain: float = 0.2
    out_rate: float = 0.1
    in_rate: float = 0.1
    weight_bound: float = 10.0
    sign_mode: str = "exact"
    sign_width: float = 1e-3
    init_scale: float = 1.0       # scales the uniform initial weight draw

    def __post_init__(self):
        if self.hidden < 1:
            raise ConfigInvalid("identifier needs at least one hidden "
                                "neuron")
        if self.init_scale < 0:
            raise ConfigInvalid("identifier init_scale must be >= 0")
        for name in ("feedback", "feedback_integral", "leak", "sign_gain",
                     "out_rate", "in_rate", "weight_bound", "sign_width"):
            if getattr(self, name) <= 0:
                raise ConfigInvalid(f"identifier gain '{name}' must be > 0")
        if self.sign_mode not in ("exact", "smooth"):
            raise ConfigInvalid(
                f"sign_mode must be 'exact' or 'smooth', "
                f"got '{self.sign_mode}'")


@dataclass
class IdentifierState:
    """Mutable per-agent estimator state.

    ``out_weights`` has a leading bias row (hidden + 1 rows), matching the
    activation vector [1, tanh(...)]; ``initial_error`` caches x - xhat at
    t = 0 for the feedback term.
    """

    estimate: np.ndarray        # xhat, (n,)
    out_weights: np.ndarray     # (hidden + 1, n)
    in_weights: np.ndarray      # (n, hidden)
    integral: np.ndarray        # v, (n,)
    initial_error: np.ndarray   # x(0) - xhat(0), (n,)


@dataclass(frozen=True)
class IdentifierDerivatives:
    d_estimate: np.ndarray      # also the published drift surrogate
    d_out_weights: np.ndarray
    d_in_weights: np.ndarray
    d_integral: np.ndarray


def init_identifier(gains: IdentifierGains, x0, rng) -> IdentifierState:
    """Fresh estimator state at the measured initial state.

    Both weight layers start i.i.d. uniform on [-1, 1] from ``rng``; the
    state estimate starts at the measurement itself, so the initial
    estimate error and the integral state are zero.
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim != 1:
        raise DimensionMismatch(f"x0 must be a vector, got shape {x0.shape}")
    n = x0.size
    s = gains.init_scale
    out_w = s * rng.uniform(-1.0, 1.0, size=(gains.hidden + 1, n))
    in_w = s * rng.uniform(-1.0, 1.0, size=(n, gains.hidden))
    return IdentifierState(
        estimate=x0.copy(),
        out_weights=out_w,
        in_weights=in_w,
        integral=np.zeros(n),
        initial_error=np.zeros(n),
    )


def activation(pre):
    """Hidden-layer output with a constant bias element prepended."""
    pre = np.asarray(pre, dtype=float)
    return np.concatenate(([1.0], np.tanh(pre)))


def activation_jacobian(pre):
    """(hidden + 1, hidden) Jacobian of the activation; zero bias row."""
    pre = np.asarray(pre, dtype=float)
    jac = np.zeros((pre.size + 1, pre.size))
    np.fill_diagonal(jac[1:], 1.0 - np.tanh(pre) ** 2)
    return jac


def drift_estimate(state: IdentifierState, at=None):
    """Network output W^T sigma(V^T xhat), the learned drift term."""
    x = state.estimate if at is None else np.asarray(at, dtype=float)
    return state.out_weights.T @ activation(state.in_weights.T @ x)


def _sign(v, gains: IdentifierGains):
    if gains.sign_mode == "smooth":
        return np.tanh(v / gains.sign_width)
    return np.sign(v)


def identifier_derivatives(state: IdentifierState, gains: IdentifierGains,
                           x, u, effectiveness) -> IdentifierDerivatives:
    """Time derivatives of every estimator quantity.

    The estimate derivative is computed first and then reused inside both
    weight update laws, which learn from the correlation of the estimated
    state velocity with the estimate error. Weight updates are projected
    onto the norm ball of radius ``weight_bound``.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    err = x - state.estimate

    pre = state.in_weights.T @ state.estimate
    act = activation(pre)
    act_jac = activation_jacobian(pre)

    feedback = (gains.feedback * err
                - gains.feedback * state.initial_error
                + state.integral)
    d_estimate = state.out_weights.T @ act + effectiveness @ u + feedback
    if not np.all(np.isfinite(d_estimate)):
        raise NonFinite("identifier produced a non-finite state-estimate "
                        "derivative")

    # correlation terms; both reuse the freshly computed estimate velocity
    hidden_vel = state.in_weights.T @ d_estimate          # (hidden,)
    d_out_raw = gains.out_rate * np.outer(act_jac @ hidden_vel, err)
    d_in_raw = gains.in_rate * np.outer(
        d_estimate, (err @ state.out_weights.T) @ act_jac)

    d_integral = ((gains.feedback * gains.feedback_integral + gains.leak)
                  * err + gains.sign_gain * _sign(err, gains))

    return IdentifierDerivatives(
        d_estimate=d_estimate,
        d_out_weights=projection(state.out_weights, d_out_raw,
                                 gains.weight_bound),
        d_in_weights=projection(state.in_weights, d_in_raw,
                                gains.weight_bound),
        d_integral=d_integral,
    )


def drift_surrogate(state: IdentifierState, gains: IdentifierGains,
                    x, u, effectiveness):
    """The quantity published for Bellman-residual construction.

    Identical to the state-estimate derivative by construction; exposed
    separately because consumers treat it as a drift stand-in rather than
    as an integrator input.
    """
    return identifier_derivatives(state, gains, x, u,
                                  effectiveness).d_estimate
