"""Bi-scale yarn mechanics toolkit.

Simulates strands (individual fibers or whole yarns) as elastic rods with
volumetric contact, fits yarn-level material parameters from fiber-level
runs, and trains a small regression network that turns yarn-level strain
into cross-sectional fiber deformations for procedural fiber generation.
"""

__version__ = "0.1.0"
