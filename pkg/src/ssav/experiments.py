"""Benchmark harness: convergence-order studies, energy diagnostics and
invariant-measure sampling with statistical acceptance checks.

Every study is a pure function of its configuration and seed: path batching,
noise streams and reductions are fixed by the inputs alone, so reruns are
bitwise identical.  Monte Carlo ensembles are advanced as whole batches
(states of shape (M, m)) rather than path by path.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.integrate import dblquad

from .integrators import (
    StepNoise,
    em_step,
    ou_decay,
    ou_integral_std,
    ssav_deterministic_substep,
    ssav_step,
)
from .model import AnalyticDensity, ModelSpec, modified_energy, trace_norm
from .noise import NoisePlan
from .quadrature import cdf_from_pdf_grid, gl_nodes
from .sav_core import AugmentedState, initial_state, rho_init

__all__ = [
    "FitError",
    "TestFunction",
    "FINITE_TIME_TEST_FUNCTIONS",
    "LONGTIME_TEST_FUNCTIONS",
    "StudyConfig",
    "StudyRow",
    "StudyResult",
    "EvolutionRow",
    "EvolutionResult",
    "MomentResult",
    "ProbeResult",
    "LongtimeResult",
    "HistogramRow",
    "DensityResult",
    "SLOPE_WINDOWS",
    "default_init",
    "slope_fit",
    "coupled_endpoints",
    "strong_error_study",
    "energy_error_study",
    "weak_error_study",
    "energy_identity_suite",
    "energy_evolution_study",
    "moment_growth_study",
    "exp_integrability_probe",
    "longtime_weak_study",
    "density_study",
    "expectation_under_invariant",
    "marginal_u_cdf",
    "ks_statistic",
    "ks_critical_value",
    "rejection_sample_u",
    "sample_invariant",
    "write_convergence_csv",
    "write_evolution_csv",
    "write_histogram_csv",
    "write_samples_csv",
    "write_sidecar_json",
]


class FitError(RuntimeError):
    """Too few usable points for a log-log slope fit."""


# Slope acceptance windows.  The theory asserts order one; the windows allow
# for Monte Carlo noise at the default path counts.
SLOPE_WINDOWS = {
    "strong": (0.85, 1.15),
    "energy": (0.85, 1.15),
    "weak": (0.7, 1.3),
}

# Stream tags keep independent uses on independent Philox key-spaces.
_STREAM_DIRECT = 101
_STREAM_IDENTITY = 202

# Ensembles are advanced in this many fixed sub-batches so that --threads can
# map over them; the split depends only on M, never on the thread count.
_DIRECT_SUBBATCHES = 8

# Memory budget for the per-batch fine-noise array of coupled runs (bytes).
_COUPLED_NOISE_BUDGET = 256 * 2**20


@dataclass(frozen=True)
class TestFunction:
    """Named observable of the full state x = (v, u) in R^{2m}."""

    __test__ = False  # not a pytest class, despite the name

    name: str
    map: Callable[[np.ndarray], np.ndarray]

    def __call__(self, v: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.map(np.concatenate([v, u], axis=-1))


def _norm(x: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(x * x, axis=-1))


FINITE_TIME_TEST_FUNCTIONS = {
    "phi1": TestFunction("phi1", lambda x: 20.0 * np.sin(1.0 + _norm(x))),
    "phi2": TestFunction("phi2", lambda x: _norm(x) ** 3),
    "phi3": TestFunction("phi3", lambda x: np.exp(_norm(x))),
}

LONGTIME_TEST_FUNCTIONS = {
    "phi1": TestFunction("phi1", lambda x: 2.0 * np.sin(1.0 + _norm(x))),
    "phi2": TestFunction("phi2", lambda x: 2.0 * np.sum(x * x, axis=-1)),
}


def default_init(dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic start: v0 = u0 = (1,...,1)/sqrt(m), so |v0| = |u0| = 1."""
    x = np.ones(dim) / math.sqrt(dim)
    return x, x.copy()


@dataclass(frozen=True)
class StudyConfig:
    """Shared configuration of the coupled convergence studies."""

    model: ModelSpec
    horizon: float = 1.0
    k_range: tuple[int, ...] = (6, 7, 8, 9, 10, 11)
    k_ref: int = 14
    n_paths: int = 1000
    seed: int = 0
    test_functions: tuple[str, ...] = ("phi1", "phi2", "phi3")
    init: tuple[np.ndarray, np.ndarray] | None = None
    threads: int = 1

    def __post_init__(self) -> None:
        if not self.k_range:
            raise ValueError("k_range must be nonempty")
        if self.k_ref <= max(self.k_range):
            raise ValueError(
                f"k_ref={self.k_ref} must exceed max(k_range)={max(self.k_range)}"
            )
        if self.n_paths < 2:
            raise ValueError(f"n_paths must be >= 2, got {self.n_paths}")
        if sorted(set(self.k_range)) != list(self.k_range):
            raise ValueError("k_range must be strictly increasing")

    def initial_point(self) -> tuple[np.ndarray, np.ndarray]:
        return self.init if self.init is not None else default_init(self.model.dim)


@dataclass(frozen=True)
class StudyRow:
    k: int
    h: float
    error: float
    stderr: float
    excluded: int = 0


@dataclass(frozen=True)
class StudyResult:
    kind: str
    rows: tuple[StudyRow, ...]
    fitted_slope: float | None
    slope_stderr: float | None
    metadata: dict = field(default_factory=dict)

    def slope_in_window(self) -> bool | None:
        window = SLOPE_WINDOWS.get(self.kind.split(":")[0])
        if window is None or self.fitted_slope is None:
            return None
        return window[0] <= self.fitted_slope <= window[1]


@dataclass(frozen=True)
class EvolutionRow:
    t: float
    value: float
    bound: float
    stderr: float


@dataclass(frozen=True)
class EvolutionResult:
    rows: tuple[EvolutionRow, ...]
    flagged: tuple[float, ...]
    metadata: dict = field(default_factory=dict)


@dataclass(frozen=True)
class MomentResult:
    rows: dict[int, tuple[EvolutionRow, ...]]
    exponents: dict[int, float | None]
    h0: float
    metadata: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ProbeResult:
    rows: tuple[EvolutionRow, ...]
    bound: float
    ok: bool
    overflow_paths: int
    metadata: dict = field(default_factory=dict)


@dataclass(frozen=True)
class LongtimeResult:
    rows: tuple[EvolutionRow, ...]
    truth: float
    head_avg: float
    tail_avg: float
    head_tail_se: float
    metadata: dict = field(default_factory=dict)


@dataclass(frozen=True)
class HistogramRow:
    bin_left: float
    bin_right: float
    count: int
    reference_density: float


@dataclass(frozen=True)
class DensityResult:
    ks: dict[int, float]
    nan_count: int
    histograms: dict[int, tuple[HistogramRow, ...]]
    n_paths: int
    endpoint_v: np.ndarray
    endpoint_u: np.ndarray
    endpoint_rho: np.ndarray
    metadata: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# generic machinery


def _map_batches(fn: Callable, items: Sequence, threads: int) -> list:
    """Apply fn to items, optionally on a thread pool; results in item order."""
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _path_ranges(n_paths: int, batch: int) -> list[tuple[int, int]]:
    return [(p, min(p + batch, n_paths)) for p in range(0, n_paths, batch)]


def _direct_ranges(n_paths: int) -> list[tuple[int, int]]:
    batch = max(1, -(-n_paths // _DIRECT_SUBBATCHES))
    return _path_ranges(n_paths, batch)


def _batch_rng(seed: int, stream: int, p0: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence(entropy=(seed, stream, p0)))
    )


def slope_fit(rows: Iterable[tuple[float, float]]) -> tuple[float, float]:
    """Ordinary least squares of log2(error) against log2(h).

    Rows with non-positive error are excluded with a warning; fewer than
    three usable rows raise FitError.
    """
    usable = []
    for h, err in rows:
        if err > 0 and np.isfinite(err):
            usable.append((h, err))
        else:
            warnings.warn(
                f"slope_fit: excluding row with non-positive error {err!r} at h={h!r}",
                RuntimeWarning,
                stacklevel=2,
            )
    if len(usable) < 3:
        raise FitError(f"need >= 3 usable rows for a slope fit, got {len(usable)}")
    x = np.log2([h for h, _ in usable])
    y = np.log2([e for _, e in usable])
    xbar, ybar = x.mean(), y.mean()
    sxx = float(np.sum((x - xbar) ** 2))
    slope = float(np.sum((x - xbar) * (y - ybar)) / sxx)
    resid = y - (ybar + slope * (x - xbar))
    dof = len(usable) - 2
    stderr = float(np.sqrt(np.sum(resid**2) / dof / sxx)) if dof > 0 else float("nan")
    return slope, stderr


def ks_statistic(samples: np.ndarray, cdf: Callable[[np.ndarray], np.ndarray]) -> float:
    """Exact one-sample Kolmogorov-Smirnov statistic against a reference CDF."""
    x = np.sort(np.asarray(samples, dtype=float))
    n = x.size
    if n == 0:
        raise ValueError("no samples")
    f = np.asarray(cdf(x), dtype=float)
    grid = np.arange(1, n + 1) / n
    return float(max(np.max(grid - f), np.max(f - (grid - 1.0 / n))))


def ks_critical_value(n: int, confidence: float = 0.99) -> float:
    """Asymptotic KS critical value c(alpha)/sqrt(n); c(0.01) = 1.63."""
    c = {0.99: 1.63, 0.95: 1.36, 0.90: 1.22}.get(confidence)
    if c is None:
        raise ValueError(f"unsupported confidence {confidence}")
    return c / math.sqrt(n)


# --------------------------------------------------------------------------
# coupled convergence engine


@dataclass(frozen=True)
class CoupledEndpoints:
    """Terminal states of the reference run and each coarse run, all driven
    by the same underlying fine-level noise (common random numbers)."""

    config: StudyConfig
    reference: AugmentedState
    coarse: dict[int, AugmentedState]


def _run_level_batch(
    model: ModelSpec,
    j_fine: np.ndarray,
    k: int,
    k_ref: int,
    horizon: float,
    v0: np.ndarray,
    u0: np.ndarray,
) -> AugmentedState:
    """Advance one path batch at level k using composed fine OU integrals."""
    n = 1 << k
    stride = 1 << (k_ref - k)
    h = horizon / n
    delta = horizon / (1 << k_ref)
    n_paths = j_fine.shape[0]
    state = AugmentedState(
        v=np.broadcast_to(v0, (n_paths, model.dim)).copy(),
        u=np.broadcast_to(u0, (n_paths, model.dim)).copy(),
        rho=np.broadcast_to(rho_init(model, u0), (n_paths,)).copy(),
    )
    decay = ou_decay(model.gamma, h)
    # Same weights and increasing-time order as noise.compose_ou.
    offsets = np.arange(stride - 1, -1, -1, dtype=float)
    weights = np.exp(-model.gamma * delta * offsets)
    for step in range(n):
        tri = ssav_deterministic_substep(model, state, h)
        raw = np.sum(
            weights[None, :, None] * j_fine[:, step * stride : (step + 1) * stride, :],
            axis=1,
        )
        v_new = decay * tri.v + model.apply_noise_matrix(raw)
        state = AugmentedState(v=v_new, u=tri.u, rho=tri.rho)
    return state


def _coupled_batch_size(n_fine: int, dim: int) -> int:
    return max(1, _COUPLED_NOISE_BUDGET // (n_fine * dim * 16))


def coupled_endpoints(cfg: StudyConfig) -> CoupledEndpoints:
    """Simulate the reference level and every coarse level under shared noise.

    The fine-level OU integrals of each path come from its NoisePlan; coarse
    levels consume them through the exponential-weight composition, so the
    pathwise differences measure pure discretization error.
    """
    model = cfg.model
    n_fine = 1 << cfg.k_ref
    v0, u0 = cfg.initial_point()
    levels = [cfg.k_ref, *cfg.k_range]
    ranges = _path_ranges(cfg.n_paths, _coupled_batch_size(n_fine, model.dim))

    def run_range(rng_pair: tuple[int, int]) -> dict[int, AugmentedState]:
        p0, p1 = rng_pair
        j_fine = np.empty((p1 - p0, n_fine, model.dim))
        for i, path in enumerate(range(p0, p1)):
            plan = NoisePlan(
                cfg.seed, path, model.gamma, model.dim, cfg.k_ref, cfg.horizon
            )
            j_fine[i] = plan.fine_pairs(0, n_fine)[1]
        return {
            k: _run_level_batch(model, j_fine, k, cfg.k_ref, cfg.horizon, v0, u0)
            for k in levels
        }

    parts = _map_batches(run_range, ranges, cfg.threads)

    def concat(k: int) -> AugmentedState:
        return AugmentedState(
            v=np.concatenate([p[k].v for p in parts], axis=0),
            u=np.concatenate([p[k].u for p in parts], axis=0),
            rho=np.concatenate([p[k].rho for p in parts], axis=0),
        )

    return CoupledEndpoints(
        config=cfg,
        reference=concat(cfg.k_ref),
        coarse={k: concat(k) for k in cfg.k_range},
    )


def _try_slope_fit(rows: Sequence[StudyRow]) -> tuple[float | None, float | None]:
    """Slope fit that degrades to (None, None) when too few rows are usable
    (quick-mode runs report the rows without a verdict)."""
    try:
        return slope_fit([(r.h, r.error) for r in rows])
    except FitError:
        return None, None


def _rms_row(k: int, h: float, sq_errors: np.ndarray) -> StudyRow:
    mean_sq = float(np.mean(sq_errors))
    rms = math.sqrt(mean_sq)
    se_mean = float(np.std(sq_errors, ddof=1)) / math.sqrt(sq_errors.size)
    stderr = se_mean / (2.0 * rms) if rms > 0 else 0.0
    return StudyRow(k=k, h=h, error=rms, stderr=stderr)


def _study_metadata(cfg: StudyConfig) -> dict:
    return {
        "model": cfg.model.label,
        "seed": cfg.seed,
        "n_paths": cfg.n_paths,
        "horizon": cfg.horizon,
        "k_range": list(cfg.k_range),
        "k_ref": cfg.k_ref,
    }


def strong_error_study(
    cfg: StudyConfig, endpoints: CoupledEndpoints | None = None
) -> StudyResult:
    """Pathwise RMS endpoint error |(v,u)_h - (v,u)_ref| per stepsize, with a
    fitted log-log slope (order one expected)."""
    endpoints = endpoints or coupled_endpoints(cfg)
    ref = endpoints.reference
    rows = []
    for k in cfg.k_range:
        state = endpoints.coarse[k]
        sq = np.sum((state.v - ref.v) ** 2, axis=-1) + np.sum(
            (state.u - ref.u) ** 2, axis=-1
        )
        rows.append(_rms_row(k, cfg.horizon / (1 << k), sq))
    slope, stderr = _try_slope_fit(rows)
    return StudyResult(
        kind="strong",
        rows=tuple(rows),
        fitted_slope=slope,
        slope_stderr=stderr,
        metadata=_study_metadata(cfg),
    )


def energy_error_study(
    cfg: StudyConfig, endpoints: CoupledEndpoints | None = None
) -> StudyResult:
    """RMS endpoint error of the augmented energy against the reference run
    (the reference carries its own fine-level rho)."""
    endpoints = endpoints or coupled_endpoints(cfg)
    h_ref = modified_energy(cfg.model, endpoints.reference)
    rows = []
    for k in cfg.k_range:
        h_k = modified_energy(cfg.model, endpoints.coarse[k])
        rows.append(_rms_row(k, cfg.horizon / (1 << k), (h_k - h_ref) ** 2))
    slope, stderr = _try_slope_fit(rows)
    return StudyResult(
        kind="energy",
        rows=tuple(rows),
        fitted_slope=slope,
        slope_stderr=stderr,
        metadata=_study_metadata(cfg),
    )


def weak_error_study(
    cfg: StudyConfig, endpoints: CoupledEndpoints | None = None
) -> dict[str, StudyResult]:
    """|E[phi(Y_h)] - E[phi(X_ref)]| per stepsize for each test function.

    Runs on the same coupled paths as the strong study, which correlates the
    two estimators and sharpens the difference of means.  Paths on which an
    exponentially growing phi overflows are excluded and counted.
    """
    endpoints = endpoints or coupled_endpoints(cfg)
    ref = endpoints.reference
    results: dict[str, StudyResult] = {}
    for name in cfg.test_functions:
        phi = FINITE_TIME_TEST_FUNCTIONS[name]
        with np.errstate(over="ignore", invalid="ignore"):
            phi_ref = phi(ref.v, ref.u)
        rows = []
        for k in cfg.k_range:
            state = endpoints.coarse[k]
            with np.errstate(over="ignore", invalid="ignore"):
                phi_k = phi(state.v, state.u)
            good = np.isfinite(phi_k) & np.isfinite(phi_ref)
            excluded = int(phi_k.size - good.sum())
            diff = phi_k[good] - phi_ref[good]
            if diff.size >= 2:
                # stats of a nearly-overflowing observable may themselves
                # overflow to inf; that is data, not an error
                with np.errstate(over="ignore", invalid="ignore"):
                    error = float(abs(np.mean(diff)))
                    stderr = float(np.std(diff, ddof=1)) / math.sqrt(diff.size)
            else:
                error, stderr = float("nan"), float("nan")
            rows.append(
                StudyRow(
                    k=k,
                    h=cfg.horizon / (1 << k),
                    error=error,
                    stderr=stderr,
                    excluded=excluded,
                )
            )
        slope, stderr = _try_slope_fit(rows)
        results[name] = StudyResult(
            kind=f"weak:{name}",
            rows=tuple(rows),
            fitted_slope=slope,
            slope_stderr=stderr,
            metadata={**_study_metadata(cfg), "test_function": name},
        )
    return results


# --------------------------------------------------------------------------
# energy identity suite


def energy_identity_suite(
    model: ModelSpec,
    n_cases: int,
    state_sampler: Callable[[np.random.Generator, int], AugmentedState] | None = None,
    h_set: Sequence[float] | None = None,
    seed: int = 0,
) -> float:
    """Worst relative change of the augmented energy across the deterministic
    substep over random states and stepsizes: max |H' - H| / (1 + H)."""
    if n_cases < 1:
        raise ValueError("n_cases must be >= 1")
    if h_set is None:
        h_set = [2.0**-k for k in range(0, 11)]
    rng = _batch_rng(seed, _STREAM_IDENTITY, 0)
    per_h = max(1, -(-n_cases // len(h_set)))
    worst = 0.0
    for h in h_set:
        if state_sampler is None:
            v = rng.standard_normal((per_h, model.dim))
            u = rng.uniform(-3.0, 3.0, size=(per_h, model.dim))
            state = AugmentedState(v=v, u=u, rho=rho_init(model, u))
        else:
            state = state_sampler(rng, per_h)
        before = modified_energy(model, state)
        after = modified_energy(model, ssav_deterministic_substep(model, state, h))
        worst = max(worst, float(np.max(np.abs(after - before) / (1.0 + before))))
    return worst


# --------------------------------------------------------------------------
# direct-simulation engine (no coupling)


def _direct_ensemble(
    model: ModelSpec,
    method: str,
    h: float,
    n_steps: int,
    n_paths: int,
    seed: int,
    record_steps: Sequence[int],
    observables: dict[str, Callable[[AugmentedState, float], np.ndarray]],
    threads: int = 1,
    init: tuple[np.ndarray, np.ndarray] | AugmentedState | None = None,
    keep_endpoint: bool = False,
):
    """Advance M independent paths, accumulating observable sums at the
    recorded steps; returns per-time means and standard errors (and the
    endpoint states when requested).  Observables receive (state, t)."""
    record_steps = sorted(set(record_steps))
    record_index = {s: i for i, s in enumerate(record_steps)}
    names = list(observables)
    sd_j = ou_integral_std(model.gamma, h)
    sqrt_h = math.sqrt(h)

    def run_range(rng_pair: tuple[int, int]):
        p0, p1 = rng_pair
        b = p1 - p0
        rng = _batch_rng(seed, _STREAM_DIRECT, p0)
        if isinstance(init, AugmentedState):
            state = AugmentedState(
                v=init.v[p0:p1].copy(), u=init.u[p0:p1].copy(), rho=init.rho[p0:p1].copy()
            )
        else:
            v0, u0 = init if init is not None else default_init(model.dim)
            state = AugmentedState(
                v=np.broadcast_to(v0, (b, model.dim)).copy(),
                u=np.broadcast_to(u0, (b, model.dim)).copy(),
                rho=np.broadcast_to(rho_init(model, u0), (b,)).copy(),
            )
        sums = np.zeros((len(record_steps), len(names)))
        sumsq = np.zeros_like(sums)
        finite = np.zeros((len(record_steps), len(names)), dtype=np.int64)

        def record(step: int) -> None:
            i = record_index.get(step)
            if i is None:
                return
            for j, name in enumerate(names):
                with np.errstate(over="ignore", invalid="ignore"):
                    vals = np.asarray(observables[name](state, step * h), dtype=float)
                good = np.isfinite(vals)
                sums[i, j] = vals[good].sum()
                sumsq[i, j] = np.square(vals[good]).sum()
                finite[i, j] = int(good.sum())

        record(0)
        for step in range(1, n_steps + 1):
            if method == "ssav":
                xi = rng.standard_normal((b, model.dim))
                noise = StepNoise(ou_integral=model.apply_noise_matrix(sd_j * xi))
                state = ssav_step(model, state, h, noise)
            else:
                dw = sqrt_h * rng.standard_normal((b, model.dim))
                v_new, u_new = em_step(model, state.v, state.u, h, dw)
                state = AugmentedState(v=v_new, u=u_new, rho=state.rho)
            record(step)
        endpoint = state if keep_endpoint else None
        return sums, sumsq, finite, endpoint

    parts = _map_batches(run_range, _direct_ranges(n_paths), threads)
    sums = np.sum([p[0] for p in parts], axis=0)
    sumsq = np.sum([p[1] for p in parts], axis=0)
    finite = np.sum([p[2] for p in parts], axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = sums / finite
        var = np.maximum(sumsq / finite - means**2, 0.0)
        ses = np.sqrt(var / np.maximum(finite - 1, 1))
    times = np.asarray(record_steps, dtype=float) * h
    out = {
        name: (means[:, j], ses[:, j], finite[:, j]) for j, name in enumerate(names)
    }
    endpoint = None
    if keep_endpoint:
        endpoint = AugmentedState(
            v=np.concatenate([p[3].v for p in parts], axis=0),
            u=np.concatenate([p[3].u for p in parts], axis=0),
            rho=np.concatenate([p[3].rho for p in parts], axis=0),
        )
    return times, out, endpoint


def _record_steps(n_steps: int, target_rows: int = 200) -> list[int]:
    every = max(1, n_steps // target_rows)
    steps = list(range(0, n_steps + 1, every))
    if steps[-1] != n_steps:
        steps.append(n_steps)
    return steps


def energy_evolution_study(
    model: ModelSpec,
    h: float,
    horizon: float,
    n_paths: int,
    seed: int = 0,
    init: tuple[np.ndarray, np.ndarray] | None = None,
    threads: int = 1,
) -> EvolutionResult:
    """Empirical E[H(v_n, u_n, rho_n)] against the linear drift bound
    H_0 + |Gamma|^2 t / 2; times where the mean exceeds the bound by more
    than 4 standard errors are flagged."""
    n_steps = int(round(horizon / h))
    v0, u0 = init if init is not None else default_init(model.dim)
    h0 = float(modified_energy(model, initial_state(model, v0, u0)))
    gamma_sq = trace_norm(model.noise_matrix) ** 2
    times, obs, _ = _direct_ensemble(
        model,
        "ssav",
        h,
        n_steps,
        n_paths,
        seed,
        _record_steps(n_steps),
        {"H": lambda s, t: modified_energy(model, s)},
        threads=threads,
        init=(v0, u0),
    )
    means, ses, _ = obs["H"]
    rows = []
    flagged = []
    # tiny absolute slack so that zero-variance (deterministic) runs are not
    # flagged on accumulated float rounding
    float_slack = 1e-9 * (1.0 + abs(h0))
    for t, mean, se in zip(times, means, ses):
        bound = h0 + 0.5 * gamma_sq * t
        rows.append(EvolutionRow(t=float(t), value=float(mean), bound=bound, stderr=float(se)))
        if mean > bound + 4.0 * se + float_slack:
            flagged.append(float(t))
    return EvolutionResult(
        rows=tuple(rows),
        flagged=tuple(flagged),
        metadata={"model": model.label, "seed": seed, "n_paths": n_paths, "h": h},
    )


def moment_growth_study(
    model: ModelSpec,
    p_list: Sequence[int],
    horizon: float,
    h: float,
    n_paths: int,
    seed: int = 0,
    threads: int = 1,
) -> MomentResult:
    """Empirical E[H^p] along the run; for each p, fits the growth exponent of
    E[H^p] - H_0^p in t over the second half of the horizon (expected <= p)."""
    if any(p not in (1, 2, 3) for p in p_list):
        raise ValueError("p_list entries must be in {1, 2, 3}")
    n_steps = int(round(horizon / h))
    v0, u0 = default_init(model.dim)
    h0 = float(modified_energy(model, initial_state(model, v0, u0)))
    observables = {
        f"H{p}": (lambda s, t, p=p: modified_energy(model, s) ** p) for p in p_list
    }
    times, obs, _ = _direct_ensemble(
        model, "ssav", h, n_steps, n_paths, seed,
        _record_steps(n_steps), observables, threads=threads, init=(v0, u0),
    )
    rows: dict[int, tuple[EvolutionRow, ...]] = {}
    exponents: dict[int, float | None] = {}
    for p in p_list:
        means, ses, _ = obs[f"H{p}"]
        rows[p] = tuple(
            EvolutionRow(t=float(t), value=float(m), bound=float("nan"), stderr=float(s))
            for t, m, s in zip(times, means, ses)
        )
        mask = (times >= horizon / 2) & (times > 0)
        excess = means[mask] - h0**p
        tt = times[mask]
        # growth below the float-rounding floor is "no growth", not a slope
        good = excess > 1e-9 * h0**p
        if good.sum() >= 3:
            x = np.log(tt[good])
            y = np.log(excess[good])
            exponents[p] = float(np.polyfit(x, y, 1)[0])
        else:
            exponents[p] = None
    return MomentResult(
        rows=rows,
        exponents=exponents,
        h0=h0,
        metadata={"model": model.label, "seed": seed, "n_paths": n_paths, "h": h},
    )


def exp_integrability_probe(
    model: ModelSpec,
    delta: float,
    lam: float,
    horizon: float,
    h: float,
    n_paths: int,
    seed: int = 0,
    threads: int = 1,
) -> ProbeResult:
    """Empirical E[exp(e^{-lam t} delta H_t)] against its analytic bound
    exp(delta/2 |Gamma|^2 (T if lam = 0 else 1/lam)) * exp(delta H_0).

    Heavy-tailed estimator: diagnostic only.  Overflowing paths are excluded
    and counted, marking the probe inconclusive.
    """
    gamma_sq = trace_norm(model.noise_matrix) ** 2
    if lam < max(delta * gamma_sq - 2.0 * model.gamma, 0.0):
        raise ValueError(
            f"lam={lam} below the admissible floor "
            f"max(delta*|Gamma|^2 - 2*gamma, 0) = {max(delta * gamma_sq - 2 * model.gamma, 0.0)}"
        )
    n_steps = int(round(horizon / h))
    v0, u0 = default_init(model.dim)
    h0 = float(modified_energy(model, initial_state(model, v0, u0)))
    bound = math.exp(
        0.5 * delta * gamma_sq * (horizon if lam == 0.0 else 1.0 / lam)
    ) * math.exp(delta * h0)

    def exp_stat(s: AugmentedState, t: float) -> np.ndarray:
        with np.errstate(over="ignore"):
            return np.exp(math.exp(-lam * t) * delta * modified_energy(model, s))

    record_steps = _record_steps(n_steps)
    times, obs, _ = _direct_ensemble(
        model, "ssav", h, n_steps, n_paths, seed,
        record_steps, {"expH": exp_stat}, threads=threads, init=(v0, u0),
    )
    means, ses, finite = obs["expH"]
    overflow = int(n_paths * len(record_steps) - finite.sum())
    rows = tuple(
        EvolutionRow(t=float(t), value=float(m), bound=bound, stderr=float(s))
        for t, m, s in zip(times, means, ses)
    )
    float_slack = 1e-9 * (1.0 + bound)
    ok = all(r.value <= r.bound + 4.0 * r.stderr + float_slack for r in rows)
    return ProbeResult(
        rows=rows,
        bound=bound,
        ok=ok,
        overflow_paths=overflow,
        metadata={
            "model": model.label, "seed": seed, "n_paths": n_paths,
            "delta": delta, "lam": lam, "h": h,
        },
    )


# --------------------------------------------------------------------------
# invariant-measure machinery


def expectation_under_invariant(
    model: ModelSpec, phi: TestFunction, tol: float = 1e-10
) -> float:
    """Quadrature ground truth for int phi d(mu_inf) on 1-D models,
    exploiting the product structure mu_inf = density_v(v) * density_u(u)."""
    density = model.density
    if model.dim != 1 or density is None or density.normalizer_u is None:
        raise ValueError("quadrature ground truth needs a 1-D model with a density")
    z = density.normalizer_u

    def integrand(v: float, u: float) -> float:
        point_v = np.array([v])
        point_u = np.array([u])
        val = phi.map(np.array([v, u]))
        return float(val) * float(density.marginal_v(point_v)) * float(
            density.marginal_u(point_u)
        ) / z

    result, err = dblquad(
        integrand,
        density.u_box[0],
        density.u_box[1],
        density.v_box[0],
        density.v_box[1],
        epsabs=tol,
        epsrel=tol,
    )
    if not np.isfinite(result):
        raise RuntimeError(f"quadrature for {phi.name} failed (result {result})")
    return float(result)


def marginal_u_cdf(
    density: AnalyticDensity, coord: int, dim: int, grid_n: int = 8001
) -> Callable[[np.ndarray], np.ndarray]:
    """CDF of one position coordinate, by cumulative quadrature of the
    (possibly 2-D) reference density."""
    if density.normalizer_u is None:
        raise ValueError("density has no normalizer; marginal CDF unavailable")
    lo, hi = density.u_box
    grid = np.linspace(lo, hi, grid_n)
    if dim == 1:
        pdf = density.marginal_u(grid[:, None])
    elif dim == 2:
        nodes, wts = gl_nodes(lo, hi, 400)
        xx, yy = np.meshgrid(grid, nodes, indexing="ij")
        if coord == 0:
            pts = np.stack([xx, yy], axis=-1)
        else:
            pts = np.stack([yy, xx], axis=-1)
        pdf = density.marginal_u(pts) @ wts
    else:
        raise ValueError("marginal CDFs are available for dim <= 2 only")
    return cdf_from_pdf_grid(grid, pdf)


def rejection_sample_u(
    density: AnalyticDensity, dim: int, n: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw exact samples of the position marginal by rejection from a
    uniform envelope on the density's support box (dim <= 2)."""
    if dim > 2:
        raise ValueError("rejection sampling supported for dim <= 2 only")
    lo, hi = density.u_box
    if dim == 1:
        probe = np.linspace(lo, hi, 2001)[:, None]
    else:
        g = np.linspace(lo, hi, 301)
        x1, x2 = np.meshgrid(g, g, indexing="ij")
        probe = np.stack([x1.ravel(), x2.ravel()], axis=-1)
    bound = 1.1 * float(np.max(density.marginal_u(probe)))
    out = np.empty((n, dim))
    filled = 0
    while filled < n:
        m = max(1024, 2 * (n - filled))
        cand = rng.uniform(lo, hi, size=(m, dim))
        accept = rng.uniform(0.0, bound, size=m) < density.marginal_u(cand)
        take = cand[accept][: n - filled]
        out[filled : filled + take.shape[0]] = take
        filled += take.shape[0]
    return out


def sample_invariant(
    model: ModelSpec, n: int, rng: np.random.Generator
) -> AugmentedState:
    """Exact draws from the invariant measure (v Gaussian, u by rejection).

    Meaningful only when Gamma = sqrt(2*kappa*gamma) * I; a warning is issued
    otherwise.
    """
    if model.density is None:
        raise ValueError("model has no analytic density to sample from")
    if not model.matches_canonical_noise(rtol=1e-9):
        warnings.warn(
            "noise matrix is not sqrt(2*kappa*gamma)*I; the analytic density "
            "is not the invariant measure of this model",
            RuntimeWarning,
            stacklevel=2,
        )
    v = math.sqrt(model.kappa) * rng.standard_normal((n, model.dim))
    u = rejection_sample_u(model.density, model.dim, n, rng)
    return AugmentedState(v=v, u=u, rho=rho_init(model, u))


def longtime_weak_study(
    model: ModelSpec,
    h: float,
    t_max: float,
    n_paths: int,
    test_functions: Sequence[str],
    seed: int = 0,
    init: tuple[np.ndarray, np.ndarray] | AugmentedState | None = None,
    threads: int = 1,
) -> dict[str, LongtimeResult]:
    """|E[phi(X_t)] - int phi d(mu_inf)| along the run, with the ground truth
    from adaptive quadrature against the analytic density (1-D models)."""
    if model.dim != 1:
        raise ValueError("long-time weak study needs dim = 1 (quadrature truth)")
    n_steps = int(round(t_max / h))
    record_steps = _record_steps(n_steps, target_rows=240)
    phis = {name: LONGTIME_TEST_FUNCTIONS[name] for name in test_functions}
    truths = {name: expectation_under_invariant(model, phi) for name, phi in phis.items()}
    observables = {
        name: (lambda s, t, phi=phi: phi(s.v, s.u)) for name, phi in phis.items()
    }
    times, obs, _ = _direct_ensemble(
        model, "ssav", h, n_steps, n_paths, seed,
        record_steps, observables, threads=threads, init=init,
    )
    out: dict[str, LongtimeResult] = {}
    for name in phis:
        means, ses, _ = obs[name]
        truth = truths[name]
        rows = tuple(
            EvolutionRow(
                t=float(t), value=float(abs(m - truth)), bound=truth, stderr=float(s)
            )
            for t, m, s in zip(times, means, ses)
        )
        head = [r for r in rows if r.t <= 2.0]
        tail = [r for r in rows if 20.0 <= r.t <= 30.0] or [rows[-1]]
        head_avg = float(np.mean([r.value for r in head]))
        tail_avg = float(np.mean([r.value for r in tail]))
        head_tail_se = math.sqrt(
            float(np.mean([r.stderr for r in head])) ** 2
            + float(np.mean([r.stderr for r in tail])) ** 2
        )
        out[name] = LongtimeResult(
            rows=rows,
            truth=truth,
            head_avg=head_avg,
            tail_avg=tail_avg,
            head_tail_se=head_tail_se,
            metadata={
                "model": model.label, "seed": seed, "n_paths": n_paths,
                "h": h, "t_max": t_max, "test_function": name,
            },
        )
    return out


def density_study(
    model: ModelSpec,
    horizon: float,
    h: float,
    n_paths: int,
    method: str = "ssav",
    reference: AnalyticDensity | None = None,
    bins: int = 80,
    seed: int = 0,
    threads: int = 1,
    init: tuple[np.ndarray, np.ndarray] | None = None,
) -> DensityResult:
    """Endpoint sampling run: histograms of the position marginals, exact KS
    statistics against the reference CDFs (dim <= 2), and the count of
    diverged paths (divergence is data, not an error)."""
    if method not in ("ssav", "em"):
        raise ValueError(f"method must be 'ssav' or 'em', got {method!r}")
    reference = reference if reference is not None else model.density
    n_steps = int(round(horizon / h))
    _, _, endpoint = _direct_ensemble(
        model, method, h, n_steps, n_paths, seed,
        [n_steps], {}, threads=threads, init=init, keep_endpoint=True,
    )
    v, u = endpoint.v, endpoint.u
    rho = endpoint.rho if method == "ssav" else np.full(n_paths, np.nan)
    finite = np.all(np.isfinite(v), axis=-1) & np.all(np.isfinite(u), axis=-1)
    nan_count = int(n_paths - finite.sum())
    u_good = u[finite]

    histograms: dict[int, tuple[HistogramRow, ...]] = {}
    ks: dict[int, float] = {}
    can_reference = (
        reference is not None
        and reference.normalizer_u is not None
        and model.dim <= 2
    )
    if can_reference and not model.matches_canonical_noise(rtol=1e-9):
        warnings.warn(
            "noise matrix is not sqrt(2*kappa*gamma)*I; KS is measured against "
            "a density that is not this model's invariant measure",
            RuntimeWarning,
            stacklevel=2,
        )
    box = reference.u_box if reference is not None else (-10.0, 10.0)
    edges = np.linspace(box[0], box[1], bins + 1)

    def hist_rows(values: np.ndarray, ref_pdf: np.ndarray) -> tuple[HistogramRow, ...]:
        counts, _ = np.histogram(values, bins=edges)
        return tuple(
            HistogramRow(
                bin_left=float(edges[i]),
                bin_right=float(edges[i + 1]),
                count=int(counts[i]),
                reference_density=float(ref_pdf[i]),
            )
            for i in range(bins)
        )

    if model.dim <= 2:
        for coord in range(model.dim):
            if can_reference:
                cdf = marginal_u_cdf(reference, coord, model.dim)
                if u_good.shape[0] >= 2:
                    ks[coord] = ks_statistic(u_good[:, coord], cdf)
                cdf_edges = cdf(edges)
                ref_pdf = (cdf_edges[1:] - cdf_edges[:-1]) / np.diff(edges)
            else:
                ref_pdf = np.full(bins, np.nan)
            histograms[coord] = hist_rows(u_good[:, coord], ref_pdf)
    else:
        # High-dimensional runs keep only the radial statistic |u|.
        histograms[-1] = hist_rows(_norm(u_good), np.full(bins, np.nan))
    return DensityResult(
        ks=ks,
        nan_count=nan_count,
        histograms=histograms,
        n_paths=n_paths,
        endpoint_v=v,
        endpoint_u=u,
        endpoint_rho=rho,
        metadata={
            "model": model.label, "seed": seed, "n_paths": n_paths,
            "method": method, "h": h, "horizon": horizon,
        },
    )


# --------------------------------------------------------------------------
# CSV / JSON output

def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _write_rows(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(x) for x in row) + "\n")


def write_convergence_csv(path, result: StudyResult) -> None:
    _write_rows(
        path,
        ["k", "h", "error", "stderr"],
        [(r.k, r.h, r.error, r.stderr) for r in result.rows],
    )


def write_evolution_csv(path, rows: Sequence[EvolutionRow]) -> None:
    _write_rows(
        path,
        ["t", "value", "bound", "stderr"],
        [(r.t, r.value, r.bound, r.stderr) for r in rows],
    )


def write_histogram_csv(path, rows: Sequence[HistogramRow]) -> None:
    _write_rows(
        path,
        ["bin_left", "bin_right", "count", "reference_density"],
        [(r.bin_left, r.bin_right, r.count, r.reference_density) for r in rows],
    )


def write_samples_csv(path, v: np.ndarray, u: np.ndarray, rho: np.ndarray) -> None:
    dim = v.shape[-1]
    header = (
        ["path_index"]
        + [f"v{i}" for i in range(dim)]
        + [f"u{i}" for i in range(dim)]
        + ["rho", "diverged"]
    )
    finite = np.all(np.isfinite(v), axis=-1) & np.all(np.isfinite(u), axis=-1)
    rows = [
        (p, *v[p], *u[p], rho[p], int(not finite[p])) for p in range(v.shape[0])
    ]
    _write_rows(path, header, rows)


def write_sidecar_json(path, payload: dict) -> None:
    import json

    def default(obj):
        if isinstance(obj, (np.floating, np.integer)):
            return obj.item()
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        raise TypeError(f"not JSON serializable: {type(obj)}")

    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=default)
        fh.write("\n")
