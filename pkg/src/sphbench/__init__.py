"""Weakly-compressible SPH benchmark datasets, neighbor search and rollout metrics."""

__version__ = "0.1.0"

from .core import FLUID, MOVING_WALL, WALL, CaseSpec, Domain, ParticleState  # noqa: E402

__all__ = [
    "__version__",
    "FLUID",
    "WALL",
    "MOVING_WALL",
    "CaseSpec",
    "Domain",
    "ParticleState",
]
