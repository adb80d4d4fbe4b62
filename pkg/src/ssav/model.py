"""Problem definitions for kinetic Langevin dynamics.

A model bundles the SDE parameters

    dv = -kappa * grad(Phi)(u) dt - gamma * v dt + Gamma dW,
    du = v dt,

with a potential Phi, the auxiliary-variable shift alpha and the energy
offset c_h used by the splitting SAV integrator.  The three benchmark
potentials ship with their invariant densities, which are exact whenever
Gamma = sqrt(2*kappa*gamma) * I.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import quad

from .quadrature import tensor_gl_integral_2d

__all__ = [
    "Potential",
    "AnalyticDensity",
    "ModelSpec",
    "builtin_gaussian_mixture",
    "builtin_double_well",
    "builtin_bimodal",
    "bimodal_density",
    "grad_check",
    "sav_floor_check",
    "default_floor_probes",
    "hamiltonian",
    "modified_energy",
    "trace_norm",
    "model_from_dict",
    "load_model",
]


@dataclass(frozen=True)
class Potential:
    """A potential as a value/gradient closure pair.

    Both callables are vectorized: ``value`` maps (..., m) -> (...) and
    ``gradient`` maps (..., m) -> (..., m).  Consistency of the pair is the
    caller's responsibility; :func:`grad_check` verifies it numerically.
    """

    value: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    label: str


@dataclass(frozen=True)
class AnalyticDensity:
    """Invariant-measure reference for a benchmark model.

    ``marginal_v`` is the normalized momentum density (a centered Gaussian
    with per-coordinate variance kappa).  ``marginal_u`` is the position
    density, possibly unnormalized; ``normalizer_u`` is its mass (1.0 when
    already normalized, None when no desk-scale normalizer exists, i.e.
    dim > 2).  ``v_box``/``u_box`` bound the numerically relevant support
    per coordinate and set the quadrature and histogram ranges.

    Valid as the invariant density of the dynamics only when
    Gamma = sqrt(2*kappa*gamma) * I.
    """

    marginal_v: Callable[[np.ndarray], np.ndarray]
    marginal_u: Callable[[np.ndarray], np.ndarray]
    normalizer_u: float | None
    u_box: tuple[float, float] = (-10.0, 10.0)
    v_box: tuple[float, float] = (-12.0, 12.0)


@dataclass(frozen=True)
class ModelSpec:
    """Full problem definition: dimensions, SDE coefficients and potential."""

    dim: int
    kappa: float
    gamma: float
    noise_matrix: np.ndarray
    alpha: float
    c_h: float
    potential: Potential
    density: AnalyticDensity | None = None
    label: str = field(default="")

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValueError(f"dim must be a positive integer, got {self.dim}")
        for name in ("kappa", "gamma", "alpha", "c_h"):
            val = getattr(self, name)
            if not (val > 0):
                raise ValueError(f"{name} must be positive, got {val}")
        noise = np.atleast_2d(np.asarray(self.noise_matrix, dtype=float))
        if noise.shape != (self.dim, self.dim):
            raise ValueError(
                f"noise_matrix must be {self.dim}x{self.dim}, got {noise.shape}"
            )
        object.__setattr__(self, "noise_matrix", noise)
        if not self.label:
            object.__setattr__(self, "label", self.potential.label)

    @property
    def is_isotropic_noise(self) -> bool:
        return bool(np.allclose(self.noise_matrix, self.noise_matrix[0, 0] * np.eye(self.dim)))

    def apply_noise_matrix(self, xi: np.ndarray) -> np.ndarray:
        """Gamma @ xi for batched xi of shape (..., m)."""
        if self.is_isotropic_noise:
            return self.noise_matrix[0, 0] * xi
        return xi @ self.noise_matrix.T

    def matches_canonical_noise(self, rtol: float = 1e-12) -> bool:
        """True iff Gamma = sqrt(2*kappa*gamma) * I, when the analytic densities apply."""
        target = math.sqrt(2.0 * self.kappa * self.gamma) * np.eye(self.dim)
        return bool(np.allclose(self.noise_matrix, target, rtol=rtol, atol=0.0))


def trace_norm(a: np.ndarray) -> float:
    """sqrt(tr(A^T A)), the matrix norm entering the energy evolution bound."""
    a = np.asarray(a, dtype=float)
    return float(np.sqrt(np.sum(a * a)))


def hamiltonian(model: ModelSpec, v: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Total energy |v|^2/2 + kappa*Phi(u) + c_h."""
    v = np.asarray(v, dtype=float)
    u = np.asarray(u, dtype=float)
    return 0.5 * np.sum(v * v, axis=-1) + model.kappa * model.potential.value(u) + model.c_h


def modified_energy(model: ModelSpec, state) -> np.ndarray:
    """Augmented energy |v|^2/2 + alpha*|u|^2 + rho^2.

    Equals :func:`hamiltonian` whenever rho = sqrt(kappa*Phi(u) + c_h - alpha*|u|^2),
    and is the quantity exactly conserved by the deterministic substep.
    """
    v, u, rho = state.v, state.u, state.rho
    return (
        0.5 * np.sum(v * v, axis=-1)
        + model.alpha * np.sum(u * u, axis=-1)
        + np.square(rho)
    )


# --------------------------------------------------------------------------
# builtin potentials


def builtin_gaussian_mixture(
    iota: float, sigma: float, kappa: float = 2.0
) -> tuple[Potential, AnalyticDensity]:
    """1-D Gaussian-mixture potential and its normalized invariant density.

    Phi(u) = (u - iota)^2 / (2 sigma^2) - log(1/3 + (2/3) exp(-2 u iota / sigma^2)),
    whose Gibbs density exp(-Phi) is the two-component normal mixture with
    weights 1/3 at +iota and 2/3 at -iota, common scale sigma.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    s2 = float(sigma) ** 2
    iota = float(iota)

    def value(u: np.ndarray) -> np.ndarray:
        x = np.asarray(u, dtype=float)[..., 0]
        return (x - iota) ** 2 / (2.0 * s2) - np.log(
            1.0 / 3.0 + (2.0 / 3.0) * np.exp(-2.0 * x * iota / s2)
        )

    def gradient(u: np.ndarray) -> np.ndarray:
        x = np.asarray(u, dtype=float)[..., 0]
        g = (x - iota) / s2 + (4.0 * iota / s2) / (np.exp(2.0 * iota * x / s2) + 2.0)
        return g[..., None]

    potential = Potential(value, gradient, "gaussian_mixture")

    def marginal_v(v: np.ndarray) -> np.ndarray:
        y = np.asarray(v, dtype=float)[..., 0]
        return np.exp(-y * y / (2.0 * kappa)) / math.sqrt(2.0 * math.pi * kappa)

    def marginal_u(u: np.ndarray) -> np.ndarray:
        x = np.asarray(u, dtype=float)[..., 0]
        norm = 1.0 / math.sqrt(2.0 * math.pi * s2)
        return norm * (
            (1.0 / 3.0) * np.exp(-((x - iota) ** 2) / (2.0 * s2))
            + (2.0 / 3.0) * np.exp(-((x + iota) ** 2) / (2.0 * s2))
        )

    density = AnalyticDensity(marginal_v, marginal_u, normalizer_u=1.0)
    return potential, density


def builtin_double_well(dim: int, kappa: float = 1.0) -> tuple[Potential, AnalyticDensity]:
    """Double-well potential |u|^4/4 - |u|^2/2 in any dimension.

    The position density exp(-Phi) is normalized by 1-D/2-D quadrature for
    dim <= 2; for larger dim no normalizer is computed and density studies
    are restricted to statistics that do not need one.
    """
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")

    def value(u: np.ndarray) -> np.ndarray:
        r2 = np.sum(np.square(np.asarray(u, dtype=float)), axis=-1)
        return 0.25 * r2 * r2 - 0.5 * r2

    def gradient(u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        r2 = np.sum(u * u, axis=-1)
        return (r2 - 1.0)[..., None] * u

    potential = Potential(value, gradient, f"double_well_{dim}")

    def marginal_v(v: np.ndarray) -> np.ndarray:
        y = np.asarray(v, dtype=float)
        r2 = np.sum(y * y, axis=-1)
        return np.exp(-r2 / (2.0 * kappa)) / (2.0 * math.pi * kappa) ** (dim / 2.0)

    def marginal_u(u: np.ndarray) -> np.ndarray:
        return np.exp(-value(u))

    box = (-8.0, 8.0)
    if dim == 1:
        normalizer, _ = quad(lambda x: math.exp(-(x**4 / 4.0 - x**2 / 2.0)), *box)
    elif dim == 2:
        normalizer = tensor_gl_integral_2d(marginal_u, box, n=200)
    else:
        normalizer = None

    density = AnalyticDensity(marginal_v, marginal_u, normalizer_u=normalizer, u_box=box)
    return potential, density


def builtin_bimodal() -> Potential:
    """2-D bimodal potential (u1^2 u2^2 + u1^2 + u2^2 - 8(u1+u2)) / 2."""

    def value(u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        u1, u2 = u[..., 0], u[..., 1]
        return 0.5 * (u1 * u1 * u2 * u2 + u1 * u1 + u2 * u2 - 8.0 * (u1 + u2))

    def gradient(u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        u1, u2 = u[..., 0], u[..., 1]
        return np.stack([u1 * u2 * u2 + u1 - 4.0, u1 * u1 * u2 + u2 - 4.0], axis=-1)

    return Potential(value, gradient, "bimodal")


# Box for the bimodal quadrature reference.  exp(-Phi) has its modes near
# (4, 0.8)/(0.8, 4); truncation outside this box is ~4e-16 of the total mass
# (a [-1, 6]^2 box would already miss ~0.8%).
_BIMODAL_BOX = (-4.0, 12.0)


def bimodal_density(kappa: float = 0.1) -> AnalyticDensity:
    """Quadrature-normalized invariant density for the bimodal potential.

    The position density has no closed-form normalizer; the mass is computed
    with a 400-node tensor-product Gauss-Legendre rule on a box that carries
    all but ~1e-15 of it.
    """
    potential = builtin_bimodal()
    dim = 2

    def marginal_v(v: np.ndarray) -> np.ndarray:
        y = np.asarray(v, dtype=float)
        r2 = np.sum(y * y, axis=-1)
        return np.exp(-r2 / (2.0 * kappa)) / (2.0 * math.pi * kappa) ** (dim / 2.0)

    def marginal_u(u: np.ndarray) -> np.ndarray:
        return np.exp(-potential.value(u))

    normalizer = tensor_gl_integral_2d(marginal_u, _BIMODAL_BOX, n=400)
    return AnalyticDensity(marginal_v, marginal_u, normalizer_u=normalizer, u_box=_BIMODAL_BOX)


# --------------------------------------------------------------------------
# validation helpers


def grad_check(
    potential: Potential,
    points: Sequence[np.ndarray] | np.ndarray,
    eps: float,
) -> float:
    """Worst relative mismatch between central differences and the gradient.

    Returns max over points and coordinates of
    |(Phi(x+eps e_i) - Phi(x-eps e_i))/(2 eps) - grad_i(x)| / (1 + |grad_i(x)|).
    """
    if not (0.0 < eps <= 1e-3):
        raise ValueError(f"eps must lie in (0, 1e-3], got {eps}")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n, m = pts.shape
    grad = potential.gradient(pts)
    worst = 0.0
    for i in range(m):
        shift = np.zeros(m)
        shift[i] = eps
        hi = potential.value(pts + shift)
        lo = potential.value(pts - shift)
        if not (np.all(np.isfinite(hi)) and np.all(np.isfinite(lo))):
            bad = int(np.argmax(~(np.isfinite(hi) & np.isfinite(lo))))
            raise ValueError(
                f"potential {potential.label!r} is non-finite near probe point "
                f"{pts[bad].tolist()} (coordinate {i})"
            )
        cd = (hi - lo) / (2.0 * eps)
        rel = np.abs(cd - grad[:, i]) / (1.0 + np.abs(grad[:, i]))
        worst = max(worst, float(rel.max()))
    return worst


def default_floor_probes(dim: int, box: float = 10.0, seed: int = 0) -> np.ndarray:
    """Probe set for the auxiliary-variable floor: a 201-point lattice per axis
    on [-box, box] for dim <= 2, else 10^4 seeded uniform points."""
    if dim == 1:
        return np.linspace(-box, box, 201)[:, None]
    if dim == 2:
        g = np.linspace(-box, box, 201)
        x1, x2 = np.meshgrid(g, g, indexing="ij")
        return np.stack([x1.ravel(), x2.ravel()], axis=-1)
    rng = np.random.default_rng(seed)
    return rng.uniform(-box, box, size=(10_000, dim))


def sav_floor_check(
    model: ModelSpec, probe_points: Sequence[np.ndarray] | np.ndarray
) -> tuple[bool, float]:
    """Probe kappa*Phi(x) + c_h - alpha*|x|^2 >= 1 over the given points.

    Probe-based falsification only; returns (ok, min value over probes).
    """
    pts = np.atleast_2d(np.asarray(probe_points, dtype=float))
    if pts.shape[0] == 0:
        raise ValueError("probe_points must be nonempty")
    vals = (
        model.kappa * model.potential.value(pts)
        + model.c_h
        - model.alpha * np.sum(pts * pts, axis=-1)
    )
    min_val = float(vals.min())
    return min_val >= 1.0, min_val


# --------------------------------------------------------------------------
# config loading

_GAUSSIAN_MIXTURE_DEFAULTS = {"iota": 1.0, "sigma": 0.5}


def _build_potential_and_density(
    name: str, params: dict, dim: int, kappa: float
) -> tuple[Potential, AnalyticDensity | None]:
    if name == "gaussian_mixture":
        if dim != 1:
            raise ValueError("gaussian_mixture potential is 1-D")
        p = {**_GAUSSIAN_MIXTURE_DEFAULTS, **params}
        return builtin_gaussian_mixture(p["iota"], p["sigma"], kappa=kappa)
    if name == "double_well":
        return builtin_double_well(dim, kappa=kappa)
    if name == "bimodal":
        if dim != 2:
            raise ValueError("bimodal potential is 2-D")
        if params:
            raise ValueError("bimodal potential takes no parameters")
        return builtin_bimodal(), bimodal_density(kappa=kappa)
    raise ValueError(f"unknown potential {name!r}")


def model_from_dict(cfg: dict) -> ModelSpec:
    """Build a ModelSpec from a JSON-compatible mapping.

    Expected keys: dim, kappa, gamma, noise_matrix (a scalar c is shorthand
    for c*I), alpha, c_h, potential.name, potential.params.
    """
    try:
        dim = int(cfg["dim"])
        kappa = float(cfg["kappa"])
        gamma = float(cfg["gamma"])
        alpha = float(cfg["alpha"])
        c_h = float(cfg["c_h"])
        pot_cfg = cfg["potential"]
        name = pot_cfg["name"]
    except KeyError as exc:
        raise ValueError(f"config is missing required key {exc.args[0]!r}") from exc
    noise = cfg.get("noise_matrix", None)
    if noise is None:
        raise ValueError("config is missing required key 'noise_matrix'")
    if np.isscalar(noise):
        noise = float(noise) * np.eye(dim)
    else:
        noise = np.asarray(noise, dtype=float)
    potential, density = _build_potential_and_density(
        name, dict(pot_cfg.get("params", {})), dim, kappa
    )
    return ModelSpec(
        dim=dim,
        kappa=kappa,
        gamma=gamma,
        noise_matrix=noise,
        alpha=alpha,
        c_h=c_h,
        potential=potential,
        density=density,
        label=str(cfg.get("label", name)),
    )


def load_model(path: str | Path) -> ModelSpec:
    """Load a ModelSpec from a JSON config file."""
    with open(path, "r", encoding="utf-8") as fh:
        cfg = json.load(fh)
    return model_from_dict(cfg)
