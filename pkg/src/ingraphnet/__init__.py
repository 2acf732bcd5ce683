"""Interactive-graph reasoning for human-object interaction detection."""

__version__ = "0.1.0"
