"""Figure rendering for optbench analyses."""

from .render import RenderSummary, SchemaError, render_box, render_trend, render_violin

__version__ = "0.1.0"
