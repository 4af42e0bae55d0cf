"""Sector-aware depth rendering, TSDF+ICP tracking and 3D ultrasound
compounding, with a synthetic phantom simulator for ground-truth
evaluation."""

__version__ = "0.1.0"
