"""Scalar-auxiliary-variable algebra for the splitting integrator.

The auxiliary scalar rho = sqrt(kappa*Phi(u) + c_h - alpha*|u|^2) carries the
potential energy so that the (formally implicit) energy-conserving substep
becomes explicitly solvable.  rho is initialized here once, then carried as a
state variable by the integrator and never re-derived from u: re-deriving
would destroy the exact conservation of |v|^2/2 + alpha*|u|^2 + rho^2.

All functions broadcast over leading batch axes: v, u have shape (..., m)
and rho has shape (...,).
"""

from __future__ import annotations

import warnings
from typing import NamedTuple

import numpy as np

from .model import ModelSpec

__all__ = [
    "AssumptionViolation",
    "AugmentedState",
    "StepScratch",
    "sav_radicand",
    "rho_init",
    "q_vector",
    "i_factor",
    "step_scratch",
    "initial_state",
]

# Hard floor for kappa*Phi + c_h - alpha*|u|^2 (the auxiliary scalar is only
# well defined at >= 1); below _SOFT_FLOOR we emit an early warning that c_h
# is running out of headroom for the current trajectory.
_HARD_FLOOR = 1.0
_SOFT_FLOOR = 10.0


class AssumptionViolation(RuntimeError):
    """Raised when kappa*Phi(u) + c_h - alpha*|u|^2 drops below 1.

    Signals a c_h too small for the visited region; clamping instead of
    raising would silently break the exact energy identity.
    """

    def __init__(self, u: np.ndarray, radicand: float, context: str = ""):
        self.u = np.asarray(u)
        self.radicand = float(radicand)
        where = f" during {context}" if context else ""
        super().__init__(
            f"auxiliary-variable radicand {self.radicand:.6g} < 1 at "
            f"u={np.asarray(u).tolist()}{where}; increase c_h"
        )


class AugmentedState(NamedTuple):
    """State triple (v, u, rho) evolved by the splitting scheme."""

    v: np.ndarray
    u: np.ndarray
    rho: np.ndarray


class StepScratch(NamedTuple):
    """Per-step derived quantities of the explicit substep at stepsize h."""

    q: np.ndarray
    i_factor: np.ndarray
    h: float


def sav_radicand(model: ModelSpec, u: np.ndarray) -> np.ndarray:
    """kappa*Phi(u) + c_h - alpha*|u|^2, the squared auxiliary scalar."""
    u = np.asarray(u, dtype=float)
    return (
        model.kappa * model.potential.value(u)
        + model.c_h
        - model.alpha * np.sum(u * u, axis=-1)
    )


def _checked_radicand(model: ModelSpec, u: np.ndarray, context: str) -> np.ndarray:
    rad = sav_radicand(model, u)
    rmin = float(np.min(rad))
    if not np.isfinite(rmin) or rmin < _HARD_FLOOR:
        flat_u = np.asarray(u, dtype=float).reshape(-1, np.asarray(u).shape[-1])
        idx = int(np.argmin(np.ravel(rad)))
        raise AssumptionViolation(flat_u[idx], rmin, context)
    if rmin < _SOFT_FLOOR:
        warnings.warn(
            f"auxiliary-variable radicand {rmin:.3g} is below {_SOFT_FLOOR}; "
            "c_h leaves little headroom on this trajectory",
            RuntimeWarning,
            stacklevel=3,
        )
    return rad


def rho_init(model: ModelSpec, u: np.ndarray) -> np.ndarray:
    """sqrt(kappa*Phi(u) + c_h - alpha*|u|^2); requires the radicand >= 1."""
    return np.sqrt(_checked_radicand(model, u, "rho_init"))


def q_vector(model: ModelSpec, u: np.ndarray) -> np.ndarray:
    """(kappa*grad(Phi)(u) - 2*alpha*u) / (2*sqrt(kappa*Phi(u)+c_h-alpha*|u|^2))."""
    u = np.asarray(u, dtype=float)
    rad = _checked_radicand(model, u, "q_vector")
    num = model.kappa * model.potential.gradient(u) - 2.0 * model.alpha * u
    return num / (2.0 * np.sqrt(rad))[..., None]


def i_factor(
    model: ModelSpec, state: AugmentedState, q: np.ndarray, h: float
) -> np.ndarray:
    """Averaged auxiliary scalar over the substep,
    (rho*(2 + alpha*h^2) + <q, v - alpha*u*h>*h) / (2 + alpha*h^2 + |q|^2*h^2).

    The denominator is >= 2, so this is defined for every finite input.
    """
    v, u, rho = state.v, state.u, state.rho
    a_h2 = model.alpha * h * h
    denom = 2.0 + a_h2 + np.sum(q * q, axis=-1) * h * h
    return (rho * (2.0 + a_h2) + np.sum(q * (v - model.alpha * u * h), axis=-1) * h) / denom


def step_scratch(model: ModelSpec, state: AugmentedState, h: float) -> StepScratch:
    """Q and I^h for one substep from the given state."""
    q = q_vector(model, state.u)
    return StepScratch(q=q, i_factor=i_factor(model, state, q, h), h=h)


def initial_state(model: ModelSpec, v0: np.ndarray, u0: np.ndarray) -> AugmentedState:
    """Augmented state at time zero, with rho = rho_init(u0).

    Inputs must be finite; batched (..., m) inputs give a batched state.
    """
    v0 = np.asarray(v0, dtype=float)
    u0 = np.asarray(u0, dtype=float)
    if v0.shape != u0.shape:
        raise ValueError(f"v0 and u0 must share a shape, got {v0.shape} vs {u0.shape}")
    if v0.shape[-1] != model.dim:
        raise ValueError(f"state dimension {v0.shape[-1]} != model dim {model.dim}")
    if not (np.all(np.isfinite(v0)) and np.all(np.isfinite(u0))):
        raise ValueError("initial state must be finite")
    return AugmentedState(v=v0, u=u0, rho=rho_init(model, u0))
