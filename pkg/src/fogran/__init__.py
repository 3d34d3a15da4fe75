"""Energy-aware mode selection and processor control for fog radio access networks."""

__version__ = "0.1.0"
