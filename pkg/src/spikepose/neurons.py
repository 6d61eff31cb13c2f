"""Discrete-time CUBA and PLIF neuron dynamics.

Both step kernels operate elementwise on arrays of any shape and fire at
exactly the threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CubaParams:
    alpha_u: float = 0.25
    alpha_v: float = 0.03
    theta: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.alpha_u <= 1.0 and 0.0 <= self.alpha_v <= 1.0):
            raise ValueError("CUBA decays must lie in [0, 1]")
        if not self.theta > 0:
            raise ValueError("CUBA threshold must be > 0")


@dataclass(frozen=True)
class PlifParams:
    tau: float = 2.0
    theta: float = 1.0
    v_reset: float = 0.0

    def __post_init__(self):
        if not self.tau > 1.0:
            raise ValueError(f"PLIF tau must be > 1, got {self.tau}")
        if not self.theta > self.v_reset:
            raise ValueError("PLIF threshold must exceed v_reset")


@dataclass
class CubaState:
    u: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, shape, dtype=np.float64):
        return cls(np.zeros(shape, dtype), np.zeros(shape, dtype))

    def reset(self):
        self.u[...] = 0
        self.v[...] = 0
        return self


@dataclass
class PlifState:
    v: np.ndarray
    v_reset: float = 0.0

    @classmethod
    def resting(cls, shape, params, dtype=np.float64):
        return cls(np.full(shape, params.v_reset, dtype), params.v_reset)

    def reset(self):
        self.v[...] = self.v_reset
        return self


def _check_shape(state_arr, x):
    if np.shape(x) != state_arr.shape:
        raise ValueError(f"input shape {np.shape(x)} does not match state shape {state_arr.shape}")


def cuba_charge(u, v, x, p):
    """Current and pre-reset membrane update; returns ``(u', v_pre)``."""
    u_new = (1.0 - p.alpha_u) * u + x
    v_pre = (1.0 - p.alpha_v) * v + u_new
    return u_new, v_pre


def cuba_step(state, x, p):
    """Advance a CUBA population by one step.

    Returns the new state (membrane reset to zero where a spike fired)
    and the binary spike array.
    """
    _check_shape(state.u, x)
    u_new, v_pre = cuba_charge(state.u, state.v, x, p)
    s = (v_pre >= p.theta).astype(v_pre.dtype)
    return CubaState(u_new, v_pre * (1.0 - s)), s


def plif_charge(v, x, p):
    """Decay-input charge ``v + (x - (v - v_reset)) / tau``."""
    return v + (x - (v - p.v_reset)) / p.tau


def plif_step(state, x, p):
    """Advance a PLIF population by one step (reset by substitution)."""
    _check_shape(state.v, x)
    h = plif_charge(state.v, x, p)
    s = (h - p.theta >= 0).astype(h.dtype)
    return PlifState(h * (1.0 - s) + p.v_reset * s, p.v_reset), s


def reset_state(state):
    """Return the state to zero (CUBA) or ``v_reset`` (PLIF), in place."""
    return state.reset()

