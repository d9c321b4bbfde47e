"""Dual-stream multimodal diffusion transformer at desk scale."""

__version__ = "0.1.0"
