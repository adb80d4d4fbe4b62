"""CSV loading against the fixed schemas written by the ssav benchmark CLI.

The renderers consume files only; they never import the simulation package.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

SCHEMAS = {
    "convergence": ["k", "h", "error", "stderr"],
    "evolution": ["t", "value", "bound", "stderr"],
    "histogram": ["bin_left", "bin_right", "count", "reference_density"],
    "density_grid": ["u0", "u1", "density"],
}


class SchemaError(ValueError):
    """A CSV file does not match the expected column schema."""


def load_csv(path: str | Path, schema: str) -> dict[str, np.ndarray]:
    """Read a CSV with an exact header match against the named schema.

    Returns a column-name -> float array mapping.  Raises SchemaError naming
    the offending columns on any mismatch.
    """
    expected = SCHEMAS[schema]
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
    columns = header.split(",") if header else []
    missing = [c for c in expected if c not in columns]
    if missing:
        raise SchemaError(
            f"{path}: missing column(s) {', '.join(missing)} for schema "
            f"{schema!r} (found: {', '.join(columns) or 'none'})"
        )
    data = np.genfromtxt(path, delimiter=",", names=True)
    if data.ndim == 0:
        data = data.reshape(1)
    return {c: np.atleast_1d(data[c]).astype(float) for c in columns}


def load_samples_csv(path: str | Path) -> dict[str, np.ndarray]:
    """Read an endpoint-samples CSV (path_index, v*, u*, rho, diverged).

    The coordinate count is variable; u0 (and u1 for 2-D runs) must exist.
    """
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
    columns = header.split(",") if header else []
    for required in ("path_index", "u0", "diverged"):
        if required not in columns:
            raise SchemaError(
                f"{path}: missing column(s) {required} for samples schema "
                f"(found: {', '.join(columns) or 'none'})"
            )
    data = np.genfromtxt(path, delimiter=",", names=True)
    if data.ndim == 0:
        data = data.reshape(1)
    return {c: np.atleast_1d(data[c]).astype(float) for c in columns}
