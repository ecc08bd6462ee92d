"""Self-supervised monocular depth for indoor scenes: depth factorization and residual pose estimation."""

__version__ = "0.1.0"
