"""Two-scale macro/micro reaction-diffusion finite elements with dyadic feedback refinement."""
__version__ = "0.1.0"
