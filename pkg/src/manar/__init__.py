"""Memory-augmented attention with an abstract conceptual representation (MANAR)."""

__version__ = "0.1.0"
