"""Composite stochastic mirror-descent stepper and the controller's Adam.

One step:  m <- (1 - alpha) m + alpha * grad;  optionally
v <- beta v + (1 - beta) grad**2 with A = sqrt(v) + eps;  then
z~ = z - eta * m / A  followed by the group projection with step eta.
"""
from dataclasses import dataclass, field
import math

import numpy as np

from .projectors import RegularizerConfig, project


@dataclass
class Schedule:
    """eta_t = c_hat / sqrt(c_bar + t),  alpha_{t+1} = min(c1 * eta_t, 1)."""

    c_hat: float = 1.0
    c_bar: float = 100.0
    c1: float = 10.0

    def __post_init__(self):
        if min(self.c_hat, self.c_bar, self.c1) <= 0:
            raise ValueError("schedule constants must be positive")

    def satisfies(self, L_est, eps_sc=1.0):
        """Whether c_hat / sqrt(c_bar) <= min(1, eps_sc / (4 L_est))."""
        return self.c_hat / math.sqrt(self.c_bar) <= min(1.0, eps_sc / (4.0 * L_est))

    def at(self, t):
        return schedule_at(self, t)


def schedule_at(s, t):
    if t < 0:
        raise ValueError("t must be nonnegative")
    eta = s.c_hat / math.sqrt(s.c_bar + t)
    return eta, min(s.c1 * eta, 1.0)


@dataclass
class RecipeSchedule:
    """Constant learning rate, then x0.1 at each milestone (fractions of the run)."""

    lr: float = 0.1
    momentum: float = 0.9
    total: int = 1
    milestones: tuple = (0.5, 0.75)

    def at(self, t):
        eta = self.lr
        for frac in self.milestones:
            if t >= frac * self.total:
                eta *= 0.1
        return eta, 1.0 - self.momentum


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    beta: float = 0.999
    eps_adam: float = 1e-8
    geometry: str = "identity"
    t: int = 0

    def __post_init__(self):
        if self.geometry not in ("identity", "adam"):
            raise ValueError(f"unknown geometry {self.geometry!r}")

    @classmethod
    def zeros_like(cls, params, **kw):
        st = cls(**kw)
        st.m = {k: np.zeros_like(v) for k, v in params.items()}
        if st.geometry == "adam":
            st.v = {k: np.zeros_like(v) for k, v in params.items()}
        return st

    def metric(self, key):
        """Diagonal of A_t for one parameter (1 under the identity geometry)."""
        if self.geometry == "identity":
            return 1.0
        return np.sqrt(self.v[key]) + self.eps_adam


def update_momentum(state, grads, alpha):
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    for key, gk in grads.items():
        if key not in state.m:
            state.m[key] = np.zeros_like(gk)
        if alpha == 1.0:
            state.m[key] = np.array(gk, dtype=np.float64)
        else:
            state.m[key] = (1.0 - alpha) * state.m[key] + alpha * gk
    return state


def update_second_moment(state, grads):
    if state.geometry != "adam":
        raise ValueError("second moment is only tracked under the adam geometry")
    b = state.beta
    for key, gk in grads.items():
        prev = state.v.get(key, np.zeros_like(gk))
        state.v[key] = b * prev + (1.0 - b) * gk * gk
    return state


def mirror_step(params, state, eta, layout=None, lambdas=None, cfg=None, weight_decay=0.0):
    """Gradient step in the A_t metric, then project penalized groups. In place."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    cfg = cfg or RegularizerConfig()
    ref = None
    if lambdas is not None and cfg.projector == "hsp":
        ref = {k: v.copy() for k, v in params.items()}
    for key, m in state.m.items():
        if key not in params:
            continue
        z = params[key]
        step = eta * m / state.metric(key)
        if weight_decay:
            step = step + eta * weight_decay * z
        params[key] = z - step
    if layout is not None and lambdas is not None:
        project(params, layout, lambdas, eta, cfg, ref)
    state.t += 1
    return params


def step(params, grads, state, eta, alpha, layout=None, lambdas=None, cfg=None,
         weight_decay=0.0):
    """Momentum update, optional second moment, then :func:`mirror_step`."""
    update_momentum(state, grads, alpha)
    if state.geometry == "adam":
        update_second_moment(state, grads)
    return mirror_step(params, state, eta, layout, lambdas, cfg, weight_decay)


class Adam:
    """Bias-corrected Adam over a dict of arrays (used for the controller)."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for key, gk in grads.items():
            m = self.m.get(key, 0.0) * b1 + (1 - b1) * gk
            v = self.v.get(key, 0.0) * b2 + (1 - b2) * gk * gk
            self.m[key], self.v[key] = m, v
            params[key] = params[key] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params

    def state_arrays(self, prefix):
        out = {f"{prefix}.t": np.array([float(self.t)])}
        for key in self.m:
            out[f"{prefix}.m.{key}"] = np.asarray(self.m[key], dtype=np.float64)
            out[f"{prefix}.v.{key}"] = np.asarray(self.v[key], dtype=np.float64)
        return out

    def load_arrays(self, arrays, prefix):
        self.t = int(arrays[f"{prefix}.t"][0])
        mp, vp = f"{prefix}.m.", f"{prefix}.v."
        self.m = {k[len(mp):]: v.copy() for k, v in arrays.items() if k.startswith(mp)}
        self.v = {k[len(vp):]: v.copy() for k, v in arrays.items() if k.startswith(vp)}
