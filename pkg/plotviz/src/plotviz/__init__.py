"""Static line charts for the workbench's diagnostics CSVs.

Reads the documented CSV schemas only; never recomputes statistics.
"""

from .charts import ChartSpec, SchemaError, plot_chart, plot_conflict, plot_entropy, plot_losscurve

__all__ = [
    "ChartSpec",
    "SchemaError",
    "plot_chart",
    "plot_conflict",
    "plot_entropy",
    "plot_losscurve",
]
