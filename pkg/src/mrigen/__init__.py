"""Text-prompted MRI phantom generation with a tiny pixel-space diffusion model."""

__version__ = "0.1.0"
