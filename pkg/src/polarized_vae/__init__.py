"""Recurrent VAE with proximity-polarized latent subspaces and its evaluation stack."""

__version__ = "0.1.0"
