"""Spatiotemporal structural-reparameterization blocks, contrastive objective,
retrieval metrics and a latency microbenchmark harness."""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
