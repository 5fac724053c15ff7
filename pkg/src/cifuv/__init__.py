"""Attack models for interacting systems and cross-chain interaction with full verification."""

__version__ = "0.1.0"
