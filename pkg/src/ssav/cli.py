"""Command-line interface: model validation, single-trajectory simulation,
convergence/energy/sampling studies, and endpoint sampling.

Every run writes a manifest.json next to its outputs; manifests from
identical invocations differ only in wall-clock fields.  Exit codes:
0 pass, 1 verdict fail, 2 runtime or assumption error, 64 usage.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, experiments
from .experiments import (
    StudyConfig,
    density_study,
    energy_error_study,
    energy_evolution_study,
    energy_identity_suite,
    exp_integrability_probe,
    longtime_weak_study,
    moment_growth_study,
    strong_error_study,
    weak_error_study,
    write_convergence_csv,
    write_evolution_csv,
    write_histogram_csv,
    write_samples_csv,
    write_sidecar_json,
)
from .integrators import direct_noise_stream, run_trajectory
from .model import (
    ModelSpec,
    default_floor_probes,
    grad_check,
    model_from_dict,
    sav_floor_check,
    trace_norm,
)
from .sav_core import AssumptionViolation, initial_state, sav_radicand
from .quadrature import gl_nodes

EXIT_OK = 0
EXIT_VERDICT_FAIL = 1
EXIT_RUNTIME = 2
EXIT_USAGE = 64

STUDY_KINDS = (
    "strong",
    "weak",
    "energy",
    "energy-evolution",
    "longtime",
    "moments",
    "expint",
)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # exit 64 on usage problems
        raise _UsageError(message)


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seed: int
    version: str
    wall_clock_s: float
    outputs: list[str] = field(default_factory=list)
    verdicts: dict = field(default_factory=dict)

    def write(self, out_dir: Path) -> None:
        payload = asdict(self)
        with open(out_dir / "manifest.json", "w", encoding="utf-8", newline="\n") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _load_config(path: str) -> tuple[ModelSpec, dict]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise _UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise _UsageError(f"malformed config {path}: {exc.msg} at line {exc.lineno} column {exc.colno}")
    try:
        return model_from_dict(raw), raw
    except (ValueError, TypeError, KeyError) as exc:
        raise _UsageError(f"invalid config {path}: {exc}")


def _out_dir(args, default_leaf: str) -> Path:
    out = Path(args.out) if args.out else Path("ssav_out") / default_leaf
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_k_range(text: str) -> tuple[int, ...]:
    try:
        lo, hi = text.split("..")
        lo_i, hi_i = int(lo), int(hi)
    except ValueError:
        raise _UsageError(f"--k-range must look like '6..11', got {text!r}")
    if hi_i < lo_i:
        raise _UsageError(f"--k-range must be increasing, got {text!r}")
    return tuple(range(lo_i, hi_i + 1))


def _resolve_h(args, default_exp: int) -> float:
    if getattr(args, "h", None) is not None:
        if args.h <= 0:
            raise _UsageError("--h must be positive")
        return args.h
    exp = getattr(args, "h_exp", None)
    return 2.0 ** -(exp if exp is not None else default_exp)


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    return max(1, int(os.environ.get("SSAV_THREADS", "1")))


# --------------------------------------------------------------------------
# check


def cmd_check(args) -> int:
    model, raw = _load_config(args.config)
    out = _out_dir(args, "check")
    t0 = time.monotonic()
    rng = np.random.default_rng(args.seed)
    rows = []
    verdicts: dict = {}

    probes = default_floor_probes(model.dim)
    ok_floor, floor_min = sav_floor_check(model, probes)
    rows.append(("sav_floor_min", floor_min, ">= 1", ok_floor))
    verdicts["sav_floor"] = bool(ok_floor)
    if not ok_floor:
        vals = sav_radicand(model, probes)
        worst = probes[int(np.argmin(vals))]
        _print_table(rows)
        print(f"floor violated at probe point {worst.tolist()} (value {floor_min:.6g})")
        _finish(args, out, raw, verdicts, t0, "check")
        return EXIT_RUNTIME

    gc_points = rng.uniform(-3.0, 3.0, size=(100, model.dim))
    gc = grad_check(model.potential, gc_points, eps=1e-5)
    rows.append(("grad_check_max_rel", gc, "<= 1e-6", gc <= 1e-6))
    verdicts["grad_check"] = bool(gc <= 1e-6)

    try:
        viol = energy_identity_suite(model, n_cases=20_000, seed=args.seed)
    except AssumptionViolation as exc:
        print(f"energy identity suite aborted: {exc}")
        _finish(args, out, raw, verdicts, t0, "check")
        return EXIT_RUNTIME
    rows.append(("energy_identity_max_rel", viol, "<= 1e-10", viol <= 1e-10))
    verdicts["energy_identity"] = bool(viol <= 1e-10)

    if model.density is not None and model.density.normalizer_u is not None:
        mass = _density_mass(model)
        rows.append(("density_mass", mass, "~ 1 (1e-6)", abs(mass - 1.0) <= 1e-6))
        verdicts["density_mass"] = bool(abs(mass - 1.0) <= 1e-6)

    _print_table(rows)
    _finish(args, out, raw, verdicts, t0, "check")
    return EXIT_OK if all(verdicts.values()) else EXIT_VERDICT_FAIL


def _density_mass(model: ModelSpec) -> float:
    density = model.density
    lo, hi = density.u_box
    if model.dim == 1:
        from scipy.integrate import quad

        mass, _ = quad(lambda x: float(density.marginal_u(np.array([x]))), lo, hi,
                       epsabs=1e-10, epsrel=1e-10, limit=200)
    else:
        nodes, wts = gl_nodes(lo, hi, 300)
        x1, x2 = np.meshgrid(nodes, nodes, indexing="ij")
        vals = density.marginal_u(np.stack([x1, x2], axis=-1))
        mass = float(wts @ vals @ wts)
    return mass / density.normalizer_u


def _print_table(rows) -> None:
    width = max(len(r[0]) for r in rows) + 2
    for name, value, threshold, ok in rows:
        status = "PASS" if ok else "FAIL"
        print(f"{name:<{width}} {value: .6e}  {threshold:<12} {status}")


def _finish(args, out: Path, raw_config: dict, verdicts: dict, t0: float, command: str,
            outputs: list[str] | None = None) -> None:
    manifest = RunManifest(
        command=command,
        argv=list(getattr(args, "_argv", [])),
        config=raw_config,
        seed=args.seed,
        version=__version__,
        wall_clock_s=time.monotonic() - t0,
        outputs=outputs or [],
        verdicts=verdicts,
    )
    manifest.write(out)


# --------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    model, raw = _load_config(args.config)
    out = _out_dir(args, "simulate")
    t0 = time.monotonic()
    h = _resolve_h(args, default_exp=7)
    v0, u0 = experiments.default_init(model.dim)
    init = initial_state(model, v0, u0)
    stream = direct_noise_stream(
        model, h, args.steps, np.random.default_rng(args.seed),
        with_increments=(args.method == "em"),
    )
    try:
        record = run_trajectory(
            model, init, h, args.steps, stream,
            record_every=args.record_every, method=args.method,
        )
    except AssumptionViolation as exc:
        print(f"simulation aborted: {exc}")
        _finish(args, out, raw, {"error": str(exc)}, t0, "simulate")
        return EXIT_RUNTIME
    path = out / "trajectory.csv"
    dim = model.dim
    header = ["t"] + [f"v{i}" for i in range(dim)] + [f"u{i}" for i in range(dim)] + ["rho", "energy"]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for i, t in enumerate(record.times):
            s = record.states[i]
            energy = record.energies[i] if record.energies is not None else float("nan")
            vals = [t, *np.atleast_1d(s.v), *np.atleast_1d(s.u), float(s.rho), float(energy)]
            fh.write(",".join(repr(float(x)) for x in vals) + "\n")
    verdicts = {"diverged_at": record.diverged_at}
    print(f"wrote {path} ({len(record.times)} rows)"
          + (f", diverged at step {record.diverged_at}" if record.diverged_at else ""))
    _finish(args, out, raw, verdicts, t0, "simulate", outputs=[path.name])
    return EXIT_OK


# --------------------------------------------------------------------------
# study


def cmd_study(args) -> int:
    model, raw = _load_config(args.config)
    out = _out_dir(args, f"study_{args.kind}")
    t0 = time.monotonic()
    threads = _threads(args)
    outputs: list[str] = []
    verdicts: dict = {}

    try:
        if args.kind in ("strong", "energy", "weak"):
            verdicts, outputs = _run_convergence_study(args, model, out, threads)
        elif args.kind == "energy-evolution":
            horizon = args.horizon if args.horizon is not None else 10.0
            res = energy_evolution_study(
                model, _resolve_h(args, 6), horizon,
                args.paths if args.paths else 5000, seed=args.seed, threads=threads,
            )
            write_evolution_csv(out / "evolution.csv", res.rows)
            outputs = ["evolution.csv"]
            verdicts = {"flagged_times": list(res.flagged), "pass": not res.flagged}
            print(f"energy law: {len(res.flagged)} flagged times "
                  f"-> {'PASS' if not res.flagged else 'FAIL'}")
        elif args.kind == "longtime":
            res = longtime_weak_study(
                model, _resolve_h(args, 9), args.t_max,
                args.paths if args.paths else 5000,
                test_functions=tuple(args.phi or ("phi1", "phi2")),
                seed=args.seed, threads=threads,
            )
            all_ok = True
            for name, r in res.items():
                write_evolution_csv(out / f"longtime_{name}.csv", r.rows)
                outputs.append(f"longtime_{name}.csv")
                final = r.rows[-1]
                ok_final = final.value <= 0.02 + 3.0 * final.stderr
                ok_shape = r.tail_avg <= r.head_avg + 3.0 * r.head_tail_se
                verdicts[name] = {
                    "final_error": final.value,
                    "final_ok": bool(ok_final),
                    "head_avg": r.head_avg,
                    "tail_avg": r.tail_avg,
                    "shape_ok": bool(ok_shape),
                }
                all_ok &= ok_final and ok_shape
                print(f"{name}: |error({final.t:g})| = {final.value:.4g} "
                      f"(limit {0.02 + 3 * final.stderr:.4g}), head {r.head_avg:.4g} "
                      f"tail {r.tail_avg:.4g} -> {'PASS' if ok_final and ok_shape else 'FAIL'}")
            verdicts["pass"] = bool(all_ok)
        elif args.kind == "moments":
            horizon = args.horizon if args.horizon is not None else 50.0
            res = moment_growth_study(
                model, args.p or [2], horizon, _resolve_h(args, 6),
                args.paths if args.paths else 2000, seed=args.seed, threads=threads,
            )
            all_ok = True
            for p, rows in res.rows.items():
                write_evolution_csv(out / f"moments_p{p}.csv", rows)
                outputs.append(f"moments_p{p}.csv")
                exponent = res.exponents[p]
                ok = exponent is None or exponent <= p + 0.3
                verdicts[f"p{p}"] = {"exponent": exponent, "pass": bool(ok)}
                all_ok &= ok
                shown = "n/a (no growth)" if exponent is None else f"{exponent:.3f}"
                print(f"p={p}: growth exponent {shown} (limit {p + 0.3}) "
                      f"-> {'PASS' if ok else 'FAIL'}")
            verdicts["pass"] = bool(all_ok)
        elif args.kind == "expint":
            gamma_sq = trace_norm(model.noise_matrix) ** 2
            lam = args.lam if args.lam is not None else args.delta * gamma_sq
            horizon = args.horizon if args.horizon is not None else 5.0
            res = exp_integrability_probe(
                model, args.delta, lam, horizon, _resolve_h(args, 6),
                args.paths if args.paths else 10_000, seed=args.seed, threads=threads,
            )
            write_evolution_csv(out / "expint.csv", res.rows)
            outputs = ["expint.csv"]
            verdicts = {
                "pass": bool(res.ok),
                "diagnostic_only": True,
                "overflow_paths": res.overflow_paths,
            }
            print(f"exp-integrability probe: bound {res.bound:.6g}, "
                  f"{'below bound' if res.ok else 'EXCEEDED (diagnostic only)'}"
                  f", overflow paths {res.overflow_paths}")
    except AssumptionViolation as exc:
        print(f"study aborted: {exc}")
        _finish(args, out, raw, {"error": str(exc)}, t0, f"study {args.kind}")
        return EXIT_RUNTIME

    write_sidecar_json(out / "study.json", {
        "kind": args.kind, "config": raw, "seed": args.seed, "verdicts": verdicts,
    })
    outputs.append("study.json")
    _finish(args, out, raw, verdicts, t0, f"study {args.kind}", outputs=outputs)
    gating = verdicts.get("pass", True) or args.kind == "expint"
    return EXIT_OK if gating else EXIT_VERDICT_FAIL


def _run_convergence_study(args, model, out: Path, threads: int):
    k_range = _parse_k_range(args.k_range) if args.k_range else (6, 7, 8, 9, 10, 11)
    k_ref = args.k_ref if args.k_ref is not None else 14
    default_paths = 5000 if args.kind == "weak" else 1000
    phis = tuple(args.phi) if args.phi else (
        ("phi1", "phi2", "phi3") if model.dim == 1 else ("phi1", "phi2")
    )
    cfg = StudyConfig(
        model=model,
        horizon=args.horizon if args.horizon is not None else 1.0,
        k_range=k_range,
        k_ref=k_ref,
        n_paths=args.paths if args.paths else default_paths,
        seed=args.seed,
        test_functions=phis,
        threads=threads,
    )
    assess = len(k_range) >= 4
    outputs: list[str] = []
    verdicts: dict = {}
    if args.kind == "weak":
        results = weak_error_study(cfg)
        for name, res in results.items():
            write_convergence_csv(out / f"weak_{name}.csv", res)
            outputs.append(f"weak_{name}.csv")
            _report_slope(res, assess, verdicts, gate=(name == "phi1"))
        verdicts["pass"] = verdicts.get("weak:phi1", {}).get("pass", True)
    else:
        study = strong_error_study if args.kind == "strong" else energy_error_study
        res = study(cfg)
        write_convergence_csv(out / f"{args.kind}.csv", res)
        outputs.append(f"{args.kind}.csv")
        _report_slope(res, assess, verdicts, gate=True)
        verdicts["pass"] = verdicts[res.kind]["pass"]
    return verdicts, outputs


def _report_slope(res, assess: bool, verdicts: dict, gate: bool) -> None:
    window = experiments.SLOPE_WINDOWS[res.kind.split(":")[0]]
    in_window = res.slope_in_window()
    verdict = {"slope": res.fitted_slope, "stderr": res.slope_stderr, "window": window}
    assess = assess and res.fitted_slope is not None
    if assess:
        verdict["pass"] = bool(in_window) if gate else True
        status = "PASS" if in_window else "FAIL"
    else:
        verdict["pass"] = True
        status = "not assessed (too few points)"
    verdicts[res.kind] = verdict
    slope_txt = "n/a" if res.fitted_slope is None else f"{res.fitted_slope:.4f}"
    err_txt = "n/a" if res.slope_stderr is None else f"{res.slope_stderr:.4f}"
    print(f"{res.kind}: slope {slope_txt} (stderr {err_txt}), "
          f"window {window} -> {status}")


# --------------------------------------------------------------------------
# sample


def cmd_sample(args) -> int:
    model, raw = _load_config(args.config)
    out = _out_dir(args, f"sample_{args.method}")
    t0 = time.monotonic()
    h = _resolve_h(args, default_exp=7)
    try:
        res = density_study(
            model, args.T, h, args.paths, method=args.method,
            bins=args.bins, seed=args.seed, threads=_threads(args),
        )
    except AssumptionViolation as exc:
        print(f"sampling aborted: {exc}")
        _finish(args, out, raw, {"error": str(exc)}, t0, "sample")
        return EXIT_RUNTIME
    outputs = ["samples.csv"]
    write_samples_csv(out / "samples.csv", res.endpoint_v, res.endpoint_u, res.endpoint_rho)
    for coord, rows in res.histograms.items():
        name = f"histogram_u{coord}.csv" if coord >= 0 else "histogram_radial.csv"
        write_histogram_csv(out / name, rows)
        outputs.append(name)
    if model.dim == 2 and model.density is not None and model.density.normalizer_u is not None:
        outputs.append(_write_reference_grid(model, out))
    verdicts = {"nan_count": res.nan_count,
                "ks": {f"u{c}": v for c, v in res.ks.items()}}
    for coord, stat in res.ks.items():
        print(f"KS(u{coord}) = {stat:.4f}")
    print(f"diverged paths: {res.nan_count} of {res.n_paths}")
    write_sidecar_json(out / "study.json", {
        "kind": f"sample_{args.method}", "config": raw, "seed": args.seed,
        "h": h, "T": args.T, "verdicts": verdicts,
    })
    outputs.append("study.json")
    _finish(args, out, raw, verdicts, t0, "sample", outputs=outputs)
    return EXIT_OK


def _write_reference_grid(model: ModelSpec, out: Path, n: int = 201) -> str:
    density = model.density
    lo, hi = density.u_box
    grid = np.linspace(lo, hi, n)
    x1, x2 = np.meshgrid(grid, grid, indexing="ij")
    vals = density.marginal_u(np.stack([x1, x2], axis=-1)) / density.normalizer_u
    path = out / "reference_density_2d.csv"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("u0,u1,density\n")
        for i in range(n):
            for j in range(n):
                fh.write(f"{float(grid[i])!r},{float(grid[j])!r},{float(vals[i, j])!r}\n")
    return path.name


# --------------------------------------------------------------------------
# entry point


def _build_parser() -> _Parser:
    parser = _Parser(prog="ssav", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="model config JSON")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads (default: SSAV_THREADS or 1)")

    p_check = sub.add_parser("check", help="validate a model config")
    common(p_check)

    p_sim = sub.add_parser("simulate", help="run one trajectory")
    common(p_sim)
    p_sim.add_argument("--method", choices=("ssav", "em"), default="ssav")
    p_sim.add_argument("--steps", type=int, default=1024)
    p_sim.add_argument("--record-every", type=int, default=1)
    p_sim.add_argument("--h", type=float, default=None)
    p_sim.add_argument("--h-exp", type=int, default=None, help="h = 2^-K")

    p_study = sub.add_parser("study", help="run a benchmark study")
    p_study.add_argument("kind", choices=STUDY_KINDS)
    common(p_study)
    p_study.add_argument("--paths", type=int, default=None)
    p_study.add_argument("--k-range", default=None, help="e.g. 6..11")
    p_study.add_argument("--k-ref", type=int, default=None)
    p_study.add_argument("--horizon", type=float, default=None)
    p_study.add_argument("--h", type=float, default=None)
    p_study.add_argument("--h-exp", type=int, default=None)
    p_study.add_argument("--t-max", type=float, default=30.0)
    p_study.add_argument("--phi", nargs="*", default=None)
    p_study.add_argument("--p", type=int, nargs="*", default=None)
    p_study.add_argument("--delta", type=float, default=1e-3)
    p_study.add_argument("--lam", type=float, default=None)

    p_sample = sub.add_parser("sample", help="endpoint sampling run")
    common(p_sample)
    p_sample.add_argument("--method", choices=("ssav", "em"), default="ssav")
    p_sample.add_argument("--T", type=float, default=500.0)
    p_sample.add_argument("--h", type=float, default=None)
    p_sample.add_argument("--h-exp", type=int, default=None)
    p_sample.add_argument("--paths", type=int, default=5000)
    p_sample.add_argument("--bins", type=int, default=80)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    actual_argv = list(argv) if argv is not None else list(sys.argv[1:])
    try:
        args = parser.parse_args(argv)
        args._argv = actual_argv
        if args.command == "check":
            return cmd_check(args)
        if args.command == "simulate":
            return cmd_simulate(args)
        if args.command == "study":
            return cmd_study(args)
        if args.command == "sample":
            return cmd_sample(args)
        raise _UsageError(f"unknown command {args.command!r}")
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AssumptionViolation as exc:
        print(f"assumption violated: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # runtime errors map to exit 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
