"""Bayesian graph U-Net for CMB recovery on nested HEALPix maps."""

from .healpix import MaskMap, Resolution, SkyMap, latitude_mask
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "MaskMap", "Resolution", "SkyMap", "latitude_mask", "__version__"]
