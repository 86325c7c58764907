"""Vector-quantised segmentation bottlenecks and a robustness harness."""

__version__ = "0.1.0"
