"""Energy-guided diffusion sampling with contrastive energy prediction."""

__version__ = "0.1.0"
