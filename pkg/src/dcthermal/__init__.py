"""Host temperature prediction and thermal-aware VM scheduling simulation."""

__version__ = "0.1.0"
