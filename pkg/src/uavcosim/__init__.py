"""Lock-step co-simulation of a nano-UAV virtual platform and a 3D world."""

__version__ = "0.1.0"
