"""Goal-conditioned reinforcement learning from images with a latent-distance critic."""

__version__ = "0.1.0"
