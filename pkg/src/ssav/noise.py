"""Seeded noise hierarchy for common-random-number coupling.

For a fine mesh of 2^L intervals of width delta, each interval i carries a
raw pair (dW_i, J_i) per coordinate, where J_i is the pre-noise-matrix OU
integral int exp(-gamma*(end_i - s)) dW_s over the interval.  Per coordinate
the pair is bivariate Gaussian with covariance

    [[delta,                (1-exp(-gamma*delta))/gamma],
     [(1-exp(-gamma*delta))/gamma, (1-exp(-2*gamma*delta))/(2*gamma)]],

independent across intervals and coordinates.  A coarse-step OU integral is
the exponentially weighted sum of its fine J_i, which has exactly the coarse
law, so integrators at different stepsizes can be driven by the same
underlying Brownian path.

Generation is counter-based (Philox keyed by (seed, path_index), one counter
block per chunk of intervals), so any sub-range of pairs can be produced
lazily and reproducibly: identical (seed, path_index) gives bitwise-identical
pairs regardless of access pattern.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "AlignmentError",
    "fine_pair_covariance",
    "NoisePlan",
    "sample_fine_pairs",
    "compose_ou",
    "compose_increment",
]

# Intervals per counter block; each block gets 2^64 Philox ticks, far more
# than one chunk of draws can consume, so blocks never overlap.
_CHUNK = 4096


class AlignmentError(ValueError):
    """A requested interval endpoint does not lie on the fine grid."""


def fine_pair_covariance(gamma: float, delta: float) -> tuple[float, float, float]:
    """Per-coordinate (var dW, cov(dW, J), var J) over an interval of width delta."""
    var_dw = delta
    cov = -math.expm1(-gamma * delta) / gamma
    var_j = -math.expm1(-2.0 * gamma * delta) / (2.0 * gamma)
    return var_dw, cov, var_j


class NoisePlan:
    """Lazily generated fine-level noise pairs for one sample path.

    Parameters are the RNG key (seed, path_index), the OU rate gamma, the
    coordinate count m, the fine level L (2^L intervals) and the horizon T.
    """

    def __init__(
        self,
        seed: int,
        path_index: int,
        gamma: float,
        m: int,
        level: int,
        horizon: float = 1.0,
    ):
        if level < 0:
            raise ValueError(f"level must be >= 0, got {level}")
        if not gamma > 0:
            raise ValueError(f"gamma must be positive, got {gamma}")
        self.seed = int(seed)
        self.path_index = int(path_index)
        self.gamma = float(gamma)
        self.m = int(m)
        self.level = int(level)
        self.horizon = float(horizon)
        self.n_fine = 1 << level
        self.delta = self.horizon / self.n_fine
        var_dw, cov, var_j = fine_pair_covariance(self.gamma, self.delta)
        # Cholesky factor of the pair covariance: dW = l11*z0 and
        # J = l21*z0 + l22*z1, so dropping J leaves a plain Wiener stream.
        self._l11 = math.sqrt(var_dw)
        self._l21 = cov / self._l11
        self._l22 = math.sqrt(max(var_j - self._l21 * self._l21, 0.0))
        self._chunks: dict[int, np.ndarray] = {}

    def _chunk(self, index: int) -> np.ndarray:
        cached = self._chunks.get(index)
        if cached is not None:
            return cached
        key = np.array(
            [np.uint64(self.seed & 0xFFFFFFFFFFFFFFFF), np.uint64(self.path_index)],
            dtype=np.uint64,
        )
        bitgen = np.random.Philox(key=key)
        bitgen.advance(index << 64)
        n = min(_CHUNK, self.n_fine - index * _CHUNK)
        z = np.random.Generator(bitgen).standard_normal((n, self.m, 2))
        self._chunks[index] = z
        return z

    def fine_pairs(self, i0: int, i1: int) -> tuple[np.ndarray, np.ndarray]:
        """Raw pairs (dW, J) for fine intervals [i0, i1), shapes (i1-i0, m)."""
        if not (0 <= i0 <= i1 <= self.n_fine):
            raise IndexError(f"interval range [{i0}, {i1}) outside [0, {self.n_fine})")
        parts = []
        for c in range(i0 // _CHUNK, (max(i1, i0 + 1) - 1) // _CHUNK + 1):
            z = self._chunk(c)
            lo = max(i0 - c * _CHUNK, 0)
            hi = min(i1 - c * _CHUNK, z.shape[0])
            if hi > lo:
                parts.append(z[lo:hi])
        z = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=0)
        dw = self._l11 * z[..., 0]
        j = self._l21 * z[..., 0] + self._l22 * z[..., 1]
        return dw, j

    def _grid_index(self, t: float) -> int:
        ratio = t / self.delta
        idx = int(round(ratio))
        if not (abs(ratio - idx) <= 1e-9 * max(1.0, abs(ratio))):
            raise AlignmentError(
                f"time {t!r} is not on the fine grid of width {self.delta!r}"
            )
        if not (0 <= idx <= self.n_fine):
            raise AlignmentError(f"time {t!r} outside horizon [0, {self.horizon}]")
        return idx


def sample_fine_pairs(
    seed: int, path_index: int, gamma: float, m: int, level: int, horizon: float = 1.0
) -> NoisePlan:
    """Build the seeded fine-level plan; pairs are generated on first access."""
    return NoisePlan(seed, path_index, gamma, m, level, horizon)


def compose_ou(plan: NoisePlan, gamma: float, t_a: float, t_c: float) -> np.ndarray:
    """Raw OU integral over [t_a, t_c] composed from the fine-level pairs:

        int_{t_a}^{t_c} exp(-gamma*(t_c - s)) dW_s
            = sum_i exp(-gamma*(t_c - end_i)) * J_i.

    Both endpoints must lie on the fine grid.  The weighted sum runs in
    increasing-time order; weight exponents come from integer grid offsets,
    avoiding cancellation in t_c - end_i.  The caller applies the noise
    matrix.
    """
    i0, i1 = plan._grid_index(t_a), plan._grid_index(t_c)
    if i1 <= i0:
        raise AlignmentError(f"empty or reversed interval [{t_a}, {t_c}]")
    _, j = plan.fine_pairs(i0, i1)
    offsets = np.arange(i1 - i0 - 1, -1, -1, dtype=float)
    weights = np.exp(-gamma * plan.delta * offsets)
    return np.sum(weights[:, None] * j, axis=0)


def compose_increment(plan: NoisePlan, t_a: float, t_c: float) -> np.ndarray:
    """Brownian increment over [t_a, t_c]: the sum of the fine dW_i."""
    i0, i1 = plan._grid_index(t_a), plan._grid_index(t_c)
    if i1 <= i0:
        raise AlignmentError(f"empty or reversed interval [{t_a}, {t_c}]")
    dw, _ = plan.fine_pairs(i0, i1)
    return np.sum(dw, axis=0)
