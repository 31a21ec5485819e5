"""Two-stage latent consistency distillation on low-dimensional mixtures."""

__version__ = "0.1.0"
