"""Segmented 3D Gaussian scenes from posed images and noisy 2D labels."""
from .core import Camera, GaussianSet
from .raster import RasterSettings, render, render_backward
from .unproject import unproject_all_scales

__all__ = ["Camera", "GaussianSet", "RasterSettings", "render", "render_backward",
           "unproject_all_scales"]
__version__ = "0.1.0"
