"""Multi-view consistent, depth-conditioned diffusion editing of splatted scenes."""

__version__ = "0.1.0"
