"""Identity-conditioned denoising diffusion with contextual partial dropout."""

__version__ = "0.1.0"
