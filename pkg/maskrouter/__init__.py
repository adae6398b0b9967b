"""Per-task binary masks over one frozen transformer backbone."""

__version__ = "1.0.0"
