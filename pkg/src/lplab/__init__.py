"""Generalized L_p-geodesics, reduced distance and reduced volume on closed-form Ricci flows."""

from .backgrounds import Cigar, Flat, FlowParams, Sphere, make_background, rescale, rescale_point
from .errors import LplabError

__version__ = "0.1.0"

__all__ = ["Cigar", "Flat", "FlowParams", "LplabError", "Sphere", "make_background", "rescale", "rescale_point"]
