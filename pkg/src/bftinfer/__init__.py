"""Byzantine-tolerant replicated ML inference with verifiable result certificates."""

__version__ = "0.1.0"
