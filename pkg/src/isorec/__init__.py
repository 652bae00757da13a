"""Isotropic reconstruction of anisotropic 3D image volumes with diffusion sampling."""

__version__ = "0.1.0"
