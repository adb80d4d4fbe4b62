"""Time-stepping kernels.

One step of the splitting scheme is: an explicit deterministic substep that
conserves the modified energy |v|^2/2 + alpha*|u|^2 + rho^2 exactly, followed
by an exact Ornstein-Uhlenbeck substep acting on the momentum only,

    v <- exp(-gamma*h) * v_tri + int exp(-gamma*(t_{n+1}-s)) Gamma dW_s.

A plain Euler-Maruyama step is provided as the comparison baseline, and a
fixed-point (Picard) solver of the underlying implicit system serves as an
independent oracle for the explicit closed forms.

Kernels broadcast over leading batch axes, so a whole Monte Carlo ensemble
can be advanced with one call per step.
"""

from __future__ import annotations

import math
from functools import lru_cache
from typing import Iterable, Iterator, NamedTuple

import numpy as np

from .model import ModelSpec, hamiltonian, modified_energy
from .sav_core import AssumptionViolation, AugmentedState, q_vector, step_scratch

__all__ = [
    "NoConvergence",
    "StepNoise",
    "TrajectoryRecord",
    "ou_decay",
    "ou_integral_std",
    "ssav_deterministic_substep",
    "ssav_implicit_oracle",
    "ou_substep",
    "ssav_step",
    "em_step",
    "run_trajectory",
    "direct_noise_stream",
]


class NoConvergence(RuntimeError):
    """Picard iteration failed to contract within max_iter (h too large)."""

    def __init__(self, max_iter: int, residual: float):
        self.max_iter = max_iter
        self.residual = residual
        super().__init__(
            f"fixed-point iteration did not reach tolerance in {max_iter} steps "
            f"(last residual {residual:.3e}); reduce the stepsize"
        )


class StepNoise(NamedTuple):
    """Stochastic input for one step.

    ou_integral is the (post-noise-matrix) Gaussian vector distributed as
    int_{t_n}^{t_{n+1}} exp(-gamma*(t_{n+1}-s)) Gamma dW_s.  wiener_increment
    is the raw Brownian increment over the same step, jointly consistent with
    ou_integral when both are present; it is None for streams that only drive
    the splitting scheme.
    """

    ou_integral: np.ndarray
    wiener_increment: np.ndarray | None = None


class TrajectoryRecord(NamedTuple):
    times: np.ndarray
    states: list[AugmentedState]
    energies: np.ndarray | None
    diverged_at: int | None = None


@lru_cache(maxsize=128)
def ou_decay(gamma: float, h: float) -> float:
    """exp(-gamma*h)."""
    return math.exp(-gamma * h)


@lru_cache(maxsize=128)
def ou_integral_std(gamma: float, h: float) -> float:
    """sqrt((1 - exp(-2*gamma*h)) / (2*gamma)), in the expm1 form.

    The naive 1 - exp(-x) loses precision for gamma*h ~ 1e-4 and below.
    """
    return math.sqrt(-math.expm1(-2.0 * gamma * h) / (2.0 * gamma))


def ssav_deterministic_substep(
    model: ModelSpec, state: AugmentedState, h: float
) -> AugmentedState:
    """Explicit closed form of the energy-conserving substep.

    Computed in order: rho first from its own closed form, then v through the
    averaged auxiliary scalar I^h, then u from the velocity average.  This
    ordering keeps the modified-energy identity exact up to rounding.
    """
    v, u, rho = state.v, state.u, state.rho
    alpha = model.alpha
    scratch = step_scratch(model, state, h)
    q, i_fac = scratch.q, scratch.i_factor
    a_h2 = alpha * h * h
    denom = 2.0 + a_h2 + np.sum(q * q, axis=-1) * h * h

    rho_next = rho + np.sum(
        q * (2.0 * v - 2.0 * alpha * u * h - 2.0 * q * rho[..., None] * h), axis=-1
    ) * h / denom
    v_tri = (
        2.0 * v - 4.0 * q * (i_fac * h)[..., None] - 4.0 * alpha * u * h - alpha * v * h * h
    ) / (2.0 + a_h2)
    u_next = u + (v_tri + v) * (0.5 * h)
    return AugmentedState(v=v_tri, u=u_next, rho=rho_next)


def _picard_with_iterations(
    model: ModelSpec,
    state: AugmentedState,
    h: float,
    tol: float,
    max_iter: int,
) -> tuple[AugmentedState, int]:
    """Plain fixed-point iteration on the implicit substep system.

    Independent of the closed forms: iterates the defining equations

        v' = v - alpha*(u + u')*h - Q*(rho' + rho)*h
        u' = u + (v' + v)/2 * h
        rho' = rho + <Q, v' + v>/2 * h

    with Q frozen at the base point, starting from the input state.
    """
    v, u, rho = state.v, state.u, state.rho
    q = q_vector(model, u)
    v_it, u_it, rho_it = v, u, rho
    for iteration in range(1, max_iter + 1):
        v_new = v - model.alpha * (u + u_it) * h - q * ((rho_it + rho) * h)[..., None]
        u_new = u + (v_new + v) * (0.5 * h)
        rho_new = rho + 0.5 * np.sum(q * (v_new + v), axis=-1) * h
        residual = max(
            float(np.max(np.abs(v_new - v_it))),
            float(np.max(np.abs(u_new - u_it))),
            float(np.max(np.abs(rho_new - rho_it))),
        )
        v_it, u_it, rho_it = v_new, u_new, rho_new
        if residual < tol:
            return AugmentedState(v=v_it, u=u_it, rho=rho_it), iteration
    raise NoConvergence(max_iter, residual)


def ssav_implicit_oracle(
    model: ModelSpec,
    state: AugmentedState,
    h: float,
    tol: float = 1e-13,
    max_iter: int = 200,
) -> AugmentedState:
    """Brute-force fixed point of the implicit substep system.

    This is the independent oracle against which the explicit substep is
    verified; it shares no algebra with the closed forms.
    """
    result, _ = _picard_with_iterations(model, state, h, tol, max_iter)
    return result


def ou_substep(
    model: ModelSpec, v_tri: np.ndarray, h: float, noise: StepNoise
) -> np.ndarray:
    """Exact Ornstein-Uhlenbeck update exp(-gamma*h)*v_tri + ou_integral."""
    return ou_decay(model.gamma, h) * np.asarray(v_tri, dtype=float) + noise.ou_integral


def ssav_step(
    model: ModelSpec, state: AugmentedState, h: float, noise: StepNoise
) -> AugmentedState:
    """One full step: deterministic substep, then the OU substep on v only."""
    tri = ssav_deterministic_substep(model, state, h)
    return AugmentedState(v=ou_substep(model, tri.v, h, noise), u=tri.u, rho=tri.rho)


def em_step(
    model: ModelSpec, v: np.ndarray, u: np.ndarray, h: float, dW: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Euler-Maruyama baseline on the first-order system:
    v' = v + (-kappa*grad(Phi)(u) - gamma*v)*h + Gamma*dW,  u' = u + v*h.

    Divergence to inf/nan is not raised; it is the phenomenon the stability
    comparisons record.
    """
    v = np.asarray(v, dtype=float)
    u = np.asarray(u, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        drift = -model.kappa * model.potential.gradient(u) - model.gamma * v
        v_next = v + drift * h + model.apply_noise_matrix(np.asarray(dW, dtype=float))
        u_next = u + v * h
    return v_next, u_next


def direct_noise_stream(
    model: ModelSpec,
    h: float,
    n_steps: int,
    rng: np.random.Generator | int,
    batch_shape: tuple[int, ...] = (),
    with_increments: bool = False,
) -> Iterator[StepNoise]:
    """Fresh per-step noise at the working stepsize (no coupling hierarchy).

    The OU integral is drawn from its closed-form law,
    sqrt((1-exp(-2*gamma*h))/(2*gamma)) * Gamma * xi with xi standard normal.
    When with_increments is set the Brownian increment is drawn jointly with
    the correct cross-covariance (1-exp(-gamma*h))/gamma per coordinate, so
    an EM run can share the exact same Brownian path.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    shape = (*batch_shape, model.dim)
    gamma = model.gamma
    sd_j = ou_integral_std(gamma, h)
    if not with_increments:
        for _ in range(n_steps):
            xi = rng.standard_normal(shape)
            yield StepNoise(ou_integral=model.apply_noise_matrix(sd_j * xi))
        return
    # Cholesky of the per-coordinate (dW, J) covariance
    # [[h, (1-e^{-gh})/g], [(1-e^{-gh})/g, (1-e^{-2gh})/(2g)]].
    var_j = sd_j * sd_j
    cov = -math.expm1(-gamma * h) / gamma
    l11 = math.sqrt(h)
    l21 = cov / l11
    l22 = math.sqrt(max(var_j - l21 * l21, 0.0))
    for _ in range(n_steps):
        z = rng.standard_normal((*shape, 2))
        dw = l11 * z[..., 0]
        j_raw = l21 * z[..., 0] + l22 * z[..., 1]
        yield StepNoise(
            ou_integral=model.apply_noise_matrix(j_raw), wiener_increment=dw
        )


def run_trajectory(
    model: ModelSpec,
    init: AugmentedState,
    h: float,
    n_steps: int,
    noise_stream: Iterable[StepNoise],
    record_every: int = 1,
    method: str = "ssav",
    with_energy: bool = True,
) -> TrajectoryRecord:
    """Drive one (possibly batched) trajectory, recording every record_every steps.

    Deterministic given the noise stream.  For the splitting scheme an
    assumption failure aborts with the step index attached; for the EM
    baseline a non-finite state is recorded (diverged_at) and the run
    continues, since divergence is data.  Recorded energies are the modified
    energy for the splitting scheme and the plain total energy for the EM
    baseline (which carries no auxiliary scalar).
    """
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    if record_every < 1:
        raise ValueError(f"record_every must be >= 1, got {record_every}")
    if method not in ("ssav", "em"):
        raise ValueError(f"method must be 'ssav' or 'em', got {method!r}")

    state = AugmentedState(
        v=np.asarray(init.v, dtype=float),
        u=np.asarray(init.u, dtype=float),
        rho=np.asarray(init.rho, dtype=float),
    )

    def energy(s: AugmentedState) -> np.ndarray:
        if method == "ssav":
            return modified_energy(model, s)
        return hamiltonian(model, s.v, s.u)

    times = [0.0]
    states = [state]
    energies = [energy(state)] if with_energy else None
    diverged_at: int | None = None

    noise_iter = iter(noise_stream)
    for n in range(1, n_steps + 1):
        noise = next(noise_iter)
        if method == "ssav":
            try:
                state = ssav_step(model, state, h, noise)
            except AssumptionViolation as exc:
                raise AssumptionViolation(
                    exc.u, exc.radicand, f"step {n} (t={n * h:.6g})"
                ) from exc
        else:
            if noise.wiener_increment is None:
                raise ValueError("EM runs need a noise stream with Wiener increments")
            v_next, u_next = em_step(model, state.v, state.u, h, noise.wiener_increment)
            state = AugmentedState(v=v_next, u=u_next, rho=state.rho)
            if diverged_at is None and not (
                np.all(np.isfinite(v_next)) and np.all(np.isfinite(u_next))
            ):
                diverged_at = n
        if n % record_every == 0 or n == n_steps:
            times.append(n * h)
            states.append(state)
            if energies is not None:
                with np.errstate(over="ignore", invalid="ignore"):
                    energies.append(energy(state))

    return TrajectoryRecord(
        times=np.asarray(times),
        states=states,
        energies=np.asarray(energies) if energies is not None else None,
        diverged_at=diverged_at,
    )
