"""Samplers and exact oracles for the 2D Ising model near criticality."""

from .lattice import LatticeSpec, build_partition, energy, magnetization
from .rng import make_rng

__all__ = ["LatticeSpec", "build_partition", "energy", "magnetization", "make_rng"]
__version__ = "0.1.0"
