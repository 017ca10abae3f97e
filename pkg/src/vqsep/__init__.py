"""Two-phase VQ-VAE transfer learning for single-channel music source separation."""

__version__ = "0.1.0"
