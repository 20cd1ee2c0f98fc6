"""Interactive incremental facade reconstruction toolkit."""

__version__ = "0.1.0"
