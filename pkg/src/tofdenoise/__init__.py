"""Multipath-distortion removal for time-of-flight range images.

Pipeline: per-pixel calibration, a range-recovery MLP, four orientation
specific boundary MLPs, and an edge-aware geodesic smoothing filter.
"""

__version__ = "0.1.0"
