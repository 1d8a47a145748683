"""Graph-level co-optimization of a driving stack and latency-aware closed-loop evaluation."""

__version__ = "0.1.0"
