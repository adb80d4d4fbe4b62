"""Small deterministic quadrature helpers shared by the model and the studies."""

from __future__ import annotations

from typing import Callable

import numpy as np
from numpy.polynomial.legendre import leggauss


def gl_nodes(a: float, b: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights mapped to the interval [a, b]."""
    x, w = leggauss(n)
    return 0.5 * (b - a) * x + 0.5 * (b + a), 0.5 * (b - a) * w


def tensor_gl_integral_2d(
    fn: Callable[[np.ndarray], np.ndarray],
    box: tuple[float, float],
    n: int = 400,
) -> float:
    """Integrate fn over box^2 with an n x n tensor-product Gauss-Legendre rule.

    fn must accept points of shape (..., 2).
    """
    nodes, wts = gl_nodes(box[0], box[1], n)
    x1, x2 = np.meshgrid(nodes, nodes, indexing="ij")
    vals = fn(np.stack([x1, x2], axis=-1))
    return float(wts @ vals @ wts)


def cdf_from_pdf_grid(grid: np.ndarray, pdf: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    """Cumulative-trapezoid CDF of a 1-D density tabulated on a (fine) grid.

    The result is renormalized so the CDF reaches exactly 1 at the right edge,
    and is returned as a callable that interpolates linearly (0 left of the
    grid, 1 right of it).
    """
    pdf = np.maximum(np.asarray(pdf, dtype=float), 0.0)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (pdf[1:] + pdf[:-1]) * np.diff(grid))])
    if cum[-1] <= 0:
        raise ValueError("density has zero mass on the grid")
    cum /= cum[-1]

    def cdf(x: np.ndarray) -> np.ndarray:
        return np.interp(x, grid, cum, left=0.0, right=1.0)

    return cdf
