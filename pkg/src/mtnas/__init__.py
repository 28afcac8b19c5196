"""One-shot multi-task architecture search for branched window-attention networks."""

__version__ = "0.1.0"
