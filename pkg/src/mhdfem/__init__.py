"""Structure-preserving mixed finite elements for stationary MHD."""

__version__ = "0.1.0"
