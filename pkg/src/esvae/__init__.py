"""Elastic shape analysis of landmark trajectories with a Riemannian VAE."""

__version__ = "0.1.0"
