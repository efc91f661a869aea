"""Read-only figure generation for ddsmpc campaign outputs."""

__version__ = "0.1.0"
