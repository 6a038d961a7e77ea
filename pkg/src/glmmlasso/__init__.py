"""l1-penalized maximum likelihood for high-dimensional GLMMs."""
__version__ = "0.1.0"
