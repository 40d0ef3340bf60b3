"""Cooperative BEV perception kernels: radian-division camera fusion, pyramid agent fusion and one-step diffusion refinement."""
__version__ = "0.1.0"
