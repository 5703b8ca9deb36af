"""Desk-scale 3-D CT latent diffusion toolkit with exact depth-split convolution."""
from .tensor import Interval, tensor5
from .volume import CtVolume, PrimaryCond, SegMask, VolumeMeta, read_mvol, write_mvol

__version__ = "0.1.0"

__all__ = ["CtVolume", "Interval", "PrimaryCond", "SegMask", "VolumeMeta", "read_mvol",
           "tensor5", "write_mvol", "__version__"]
