"""One controller with its plasticity state, inverse model and sensor delay line."""
from __future__ import annotations

import numpy as np

from .controller import ControllerState, init_least_biased, load_weights, step_controller
from .inverse_model import DelayedSensorConfig, DelayLine, apply_model, extrinsic_signal
from .plasticity import (
    DerivativeBuffer,
    NonFiniteError,
    PlasticityParams,
    Rule,
    dep_update,
    dhl_update,
    estimate_derivative,
    hebb_update,
    normalize,
    threshold_update,
)


class Agent:
    """Runs the per-step update order for one controller.

    Per step: read sensors (and append delayed channels), estimate
    derivatives, update the synaptic accumulator, normalize it into ``C``,
    update thresholds, then compute the motor output.

    The rule pairs a sensor change with the change it causes one step later:
    DEP uses ``(M xdot_t) xdot_{t-1}^T``, DHL ``ydot_{t-1} xdot_{t-1}^T`` and
    Hebb ``y_{t-1} x_{t-1}^T``. On a lag-free loop with an exact model
    ``M xdot_t == ydot_{t-1}``, so DEP and DHL coincide step for step.
    """

    def __init__(self, n_base: int, m: int, params: PlasticityParams, M=None,
                 delay: DelayedSensorConfig | None = None):
        self.params = params
        self.delay = DelayLine(delay, n_base, params.dt)
        n = self.delay.n
        self.M = np.eye(m, n) if M is None else np.asarray(M, dtype=np.float64)
        if self.M.shape != (m, n):
            raise ValueError(f"model shape {self.M.shape} != ({m}, {n})")
        self.state: ControllerState = init_least_biased(n, m)
        self.C_raw = np.zeros((m, n))
        self._xbuf = DerivativeBuffer(n)
        self._ybuf = DerivativeBuffer(m)
        self.x = np.zeros(n)
        self.y = np.zeros(m)
        self.xdot = np.zeros(n)
        self.ydot = np.zeros(m)
        self.y_tilde_dot = np.zeros(m)
        self.delta_y_dot = np.zeros(m)

    @property
    def n(self) -> int:
        return self.state.n

    @property
    def m(self) -> int:
        return self.state.m

    def set_weights(self, C, h=None, frozen: bool = False):
        """Install weights; the accumulator restarts from the installed ``C``."""
        load_weights(self.state, C, h, frozen)
        self.C_raw = self.state.C.copy()

    def step(self, x_base) -> np.ndarray:
        p = self.params
        x = self.delay.push(x_base)
        xdot = estimate_derivative(self._xbuf, x, p.dt)
        x_prev, xdot_prev, y_prev, ydot_prev = self.x, self.xdot, self.y, self.ydot
        self.y_tilde_dot = apply_model(self.M, xdot)
        self.delta_y_dot = extrinsic_signal(self.y_tilde_dot, ydot_prev)
        if not self.state.frozen:
            if p.rule is Rule.DEP:
                raw = dep_update(self.C_raw, self.y_tilde_dot, xdot_prev, p)
            elif p.rule is Rule.DHL:
                raw = dhl_update(self.C_raw, ydot_prev, xdot_prev, p)
            else:
                raw = hebb_update(self.C_raw, y_prev, x_prev, p)
            self.C_raw = raw
            self.state.C = normalize(raw, p)
            self.state.h = threshold_update(self.state.h, y_prev, p)
            if not (np.all(np.isfinite(self.state.C)) and np.all(np.isfinite(self.state.h))):
                raise NonFiniteError("controller state became non-finite")
        y = step_controller(self.state, x)
        self.ydot = estimate_derivative(self._ybuf, y, p.dt)
        self.x, self.xdot, self.y = x, xdot, y
        return y
