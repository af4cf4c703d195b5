"""Multi-view normal integration with hash-encoded neural SDFs."""

__version__ = "0.1.0"
