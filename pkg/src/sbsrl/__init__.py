"""Safe model-based reinforcement learning with sampled Gaussian-process dynamics."""

__version__ = "0.1.0"
