"""Deformable radiance fields: a static canonical volume seen through per-time-step ray bending."""

__version__ = "0.1.0"
