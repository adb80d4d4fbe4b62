"""Figure rendering for the ssav benchmark CSV outputs."""

from .render import KINDS, FigureSpec, reference_line, render
from .schema import SchemaError, load_csv, load_samples_csv

__version__ = "0.1.0"
