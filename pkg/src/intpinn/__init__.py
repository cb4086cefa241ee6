"""Physics-informed networks trained on integral losses."""

__version__ = "0.1.0"
