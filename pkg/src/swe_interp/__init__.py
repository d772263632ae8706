"""Neural interpolation of coarse shallow-water trajectories onto a nested fine mesh."""

__version__ = "0.1.0"
