"""Phenotype classification over fused multi-terminology patient histories."""

__version__ = "0.1.0"
