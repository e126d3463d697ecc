"""Local prompt adaptation on a desk-scale text-conditioned diffusion model."""

__version__ = "0.1.0"
