"""Figure renderers for the benchmark CSV outputs.

Four kinds: log-log convergence plots with an order-one reference line,
time-evolution curves with bounds, 1-D density overlays, and 2-D density
heatmaps.  Rendering is deterministic: fixed style, fixed PNG metadata, no
timestamps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .schema import SchemaError, load_csv, load_samples_csv

KINDS = ("convergence", "evolution", "density1d", "density2d")

_STYLE = {
    "figure.figsize": (6.4, 4.8),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.fontsize": 9,
}

_PNG_METADATA = {"Software": "ssav-figures"}


@dataclass(frozen=True)
class FigureSpec:
    inputs: tuple[str, ...]
    kind: str
    output: str
    title: str = ""
    xlabel: str = ""
    ylabel: str = ""
    labels: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not self.inputs:
            raise ValueError("at least one input CSV is required")
        for path in self.inputs:
            if not Path(path).exists():
                raise FileNotFoundError(path)


def reference_line(h: np.ndarray, anchor_error: float, slope: float = 1.0) -> np.ndarray:
    """Order-`slope` reference curve anchored at the largest-h point.

    Built in log2 space, so the log-log slope of the returned points is the
    requested slope by construction.
    """
    log_h = np.log2(np.asarray(h, dtype=float))
    anchor = log_h.max()  # largest stepsize anchors the line
    return np.exp2(np.log2(anchor_error) + slope * (log_h - anchor))


def _series_label(path: str, index: int, labels: tuple[str, ...]) -> str:
    if index < len(labels):
        return labels[index]
    return Path(path).stem


def _render_convergence(spec: FigureSpec, ax) -> None:
    first = True
    for i, path in enumerate(spec.inputs):
        data = load_csv(path, "convergence")
        ax.errorbar(
            data["h"], data["error"], yerr=2 * data["stderr"],
            marker="o", capsize=2, label=_series_label(path, i, spec.labels),
        )
        if first:
            anchor = float(data["error"][np.argmax(data["h"])])
            ref = reference_line(data["h"], anchor, slope=1.0)
            ax.plot(data["h"], ref, "k--", linewidth=1, label="order 1")
            first = False
    ax.set_xscale("log", base=2)
    ax.set_yscale("log", base=2)
    ax.set_xlabel(spec.xlabel or "stepsize h")
    ax.set_ylabel(spec.ylabel or "error")
    ax.legend()


def _render_evolution(spec: FigureSpec, ax) -> None:
    for i, path in enumerate(spec.inputs):
        data = load_csv(path, "evolution")
        label = _series_label(path, i, spec.labels)
        ax.plot(data["t"], data["value"], label=label)
        band = 2 * data["stderr"]
        ax.fill_between(data["t"], data["value"] - band, data["value"] + band, alpha=0.2)
        bound = data["bound"]
        if np.all(np.isfinite(bound)) and not np.allclose(bound, bound[0]):
            ax.plot(data["t"], bound, "k--", linewidth=1, label=f"{label} bound")
    ax.set_xlabel(spec.xlabel or "t")
    ax.set_ylabel(spec.ylabel or "value")
    ax.legend()


def _render_density1d(spec: FigureSpec, ax) -> None:
    for i, path in enumerate(spec.inputs):
        data = load_csv(path, "histogram")
        left, right = data["bin_left"], data["bin_right"]
        widths = right - left
        total = data["count"].sum()
        density = data["count"] / (total * widths) if total > 0 else data["count"]
        ax.bar(left, density, width=widths, align="edge", alpha=0.45,
               label=_series_label(path, i, spec.labels))
        ref = data["reference_density"]
        if np.all(np.isfinite(ref)):
            centers = 0.5 * (left + right)
            ax.plot(centers, ref, "k-", linewidth=1.2,
                    label="reference" if i == 0 else None)
    ax.set_xlabel(spec.xlabel or "u")
    ax.set_ylabel(spec.ylabel or "density")
    ax.legend()


def _render_density2d(spec: FigureSpec, ax, fig) -> None:
    path = spec.inputs[0]
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    if header == ["u0", "u1", "density"]:
        data = load_csv(path, "density_grid")
        n = int(round(np.sqrt(data["u0"].size)))
        grid_x = data["u0"].reshape(n, n)
        grid_y = data["u1"].reshape(n, n)
        dens = data["density"].reshape(n, n)
        mesh = ax.pcolormesh(grid_x, grid_y, dens, shading="auto")
    else:
        data = load_samples_csv(path)
        if "u1" not in data:
            raise SchemaError(f"{path}: density2d needs a 2-D run (missing column u1)")
        good = data["diverged"] == 0
        if good.sum() == 0:
            raise SchemaError(f"{path}: all paths diverged; nothing to render")
        counts, xe, ye = np.histogram2d(data["u0"][good], data["u1"][good], bins=60,
                                        density=True)
        mesh = ax.pcolormesh(xe, ye, counts.T, shading="auto")
    fig.colorbar(mesh, ax=ax, label="density")
    ax.set_xlabel(spec.xlabel or "u0")
    ax.set_ylabel(spec.ylabel or "u1")


def render(spec: FigureSpec) -> Path:
    """Render the figure described by spec and write the image file."""
    with matplotlib.rc_context(_STYLE):
        fig, ax = plt.subplots()
        try:
            if spec.kind == "convergence":
                _render_convergence(spec, ax)
            elif spec.kind == "evolution":
                _render_evolution(spec, ax)
            elif spec.kind == "density1d":
                _render_density1d(spec, ax)
            else:
                _render_density2d(spec, ax, fig)
            if spec.title:
                ax.set_title(spec.title)
            out = Path(spec.output)
            out.parent.mkdir(parents=True, exist_ok=True)
            fig.savefig(out, metadata=_PNG_METADATA if out.suffix == ".png" else None)
        finally:
            plt.close(fig)
    return Path(spec.output)
