"""Box domains, particle containers and periodic displacement arithmetic.

Coordinates live in ``[0, extent)`` on periodic axes, with the origin at the
box corner. Non-periodic axes are left unconstrained; walls take care of
containment physically.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

FLUID = 0
WALL = 1
MOVING_WALL = 2

PARTICLE_TYPE_NAMES = {FLUID: "fluid", WALL: "wall", MOVING_WALL: "moving_wall"}


class ContractError(ValueError):
    """Raised when an input violates a documented precondition."""


@dataclass(frozen=True)
class Domain:
    """Axis-aligned box with per-axis periodicity.

    Parameters
    ----------
    extents : sequence of float
        Box length per axis.
    periodic : sequence of bool
        Periodicity flag per axis.
    """

    extents: tuple
    periodic: tuple

    def __post_init__(self):
        extents = tuple(float(e) for e in self.extents)
        periodic = tuple(bool(p) for p in self.periodic)
        if len(extents) not in (2, 3):
            raise ContractError(f"domain must be 2D or 3D, got {len(extents)} axes")
        if len(periodic) != len(extents):
            raise ContractError("periodic flags must match the number of axes")
        if any(not e > 0 for e in extents):
            raise ContractError(f"extents must be strictly positive, got {extents}")
        object.__setattr__(self, "extents", extents)
        object.__setattr__(self, "periodic", periodic)

    @property
    def dim(self) -> int:
        return len(self.extents)

    @property
    def lengths(self) -> np.ndarray:
        return np.asarray(self.extents, dtype=np.float64)

    @property
    def periodic_mask(self) -> np.ndarray:
        return np.asarray(self.periodic, dtype=bool)

    @property
    def fully_periodic(self) -> bool:
        return all(self.periodic)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.lengths))

    def to_dict(self) -> dict:
        return {"extents": list(self.extents), "periodic": list(self.periodic)}

    @classmethod
    def from_dict(cls, d: dict) -> "Domain":
        return cls(tuple(d["extents"]), tuple(d["periodic"]))


def _check_dim(domain: Domain, *arrays: np.ndarray) -> None:
    for a in arrays:
        if a.shape[-1] != domain.dim:
            raise ContractError(
                f"expected trailing dimension {domain.dim}, got shape {a.shape}"
            )


def periodic_displacement(domain: Domain, a, b) -> np.ndarray:
    """Minimum-image vector pointing from ``b`` to ``a``.

    Broadcasts over leading axes. Periodic components are mapped into
    ``[-extent/2, extent/2)``; non-periodic components are the plain
    difference.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_dim(domain, a, b)
    d = a - b
    if not any(domain.periodic):
        return d
    if domain.fully_periodic:
        L = domain.lengths
        shift = d / L
        shift += 0.5
        np.floor(shift, out=shift)
        shift *= L
        d -= shift
        return d
    for ax in np.flatnonzero(domain.periodic_mask):
        L = domain.extents[ax]
        comp = d[..., ax]
        comp -= L * np.floor(comp / L + 0.5)
    return d


def shift_position(domain: Domain, p, dp) -> np.ndarray:
    """Move ``p`` by ``dp`` and wrap periodic axes back into ``[0, extent)``."""
    p = np.asarray(p, dtype=np.float64)
    dp = np.asarray(dp, dtype=np.float64)
    _check_dim(domain, p, dp)
    return wrap_positions(domain, p + dp)


def wrap_positions(domain: Domain, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not any(domain.periodic):
        return x
    L = domain.lengths
    wrapped = np.mod(x, L)
    # np.mod can round tiny negatives up to exactly L
    wrapped = np.where(wrapped >= L, wrapped - L, wrapped)
    return np.where(domain.periodic_mask, wrapped, x)


@dataclass(frozen=True)
class ParticleState:
    """Snapshot of all particle fields at one time instant.

    ``layers`` holds the wall-layer index (0 is the layer touching the
    fluid); it is 0 for fluid particles.
    """

    positions: np.ndarray
    velocities: np.ndarray
    densities: np.ndarray
    pressures: np.ndarray
    masses: np.ndarray
    types: np.ndarray
    layers: Optional[np.ndarray] = None

    def __post_init__(self):
        n = self.positions.shape[0]
        for name in ("velocities", "densities", "pressures", "masses", "types"):
            arr = getattr(self, name)
            if arr.shape[0] != n:
                raise ContractError(
                    f"{name} has leading dimension {arr.shape[0]}, expected {n}"
                )
        if self.velocities.shape != self.positions.shape:
            raise ContractError("velocities must have the same shape as positions")
        if self.layers is None:
            object.__setattr__(self, "layers", np.zeros(n, dtype=np.int64))
        elif self.layers.shape[0] != n:
            raise ContractError("layers must have one entry per particle")
        fluid = self.types == FLUID
        if np.any(self.densities[fluid] <= 0):
            raise ContractError("fluid densities must be strictly positive")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    @property
    def fluid_mask(self) -> np.ndarray:
        return self.types == FLUID

    @property
    def wall_mask(self) -> np.ndarray:
        return self.types != FLUID

    def replace(self, **changes) -> "ParticleState":
        return replace(self, **changes)

    def subset(self, mask: np.ndarray) -> "ParticleState":
        return ParticleState(
            positions=self.positions[mask],
            velocities=self.velocities[mask],
            densities=self.densities[mask],
            pressures=self.pressures[mask],
            masses=self.masses[mask],
            types=self.types[mask],
            layers=self.layers[mask],
        )

    def permute(self, perm: np.ndarray) -> "ParticleState":
        return self.subset(np.asarray(perm))


def make_state(
    positions,
    velocities=None,
    *,
    rho0: float = 1.0,
    mass: Optional[float] = None,
    dx: Optional[float] = None,
    types=None,
    layers=None,
    p_bg: float = 0.0,
) -> ParticleState:
    """Build a state at reference density with uniform masses.

    Either ``mass`` or ``dx`` must be given; with ``dx`` the mass is
    ``rho0 * dx**dim``.
    """
    x = np.asarray(positions, dtype=np.float64)
    n, dim = x.shape
    if mass is None:
        if dx is None:
            raise ContractError("make_state needs either mass or dx")
        mass = rho0 * dx**dim
    v = np.zeros_like(x) if velocities is None else np.asarray(velocities, np.float64)
    t = np.zeros(n, dtype=np.int64) if types is None else np.asarray(types, np.int64)
    lay = None if layers is None else np.asarray(layers, np.int64)
    return ParticleState(
        positions=x,
        velocities=v.copy(),
        densities=np.full(n, rho0),
        pressures=np.full(n, p_bg),
        masses=np.full(n, float(mass)),
        types=t,
        layers=lay,
    )


@dataclass(frozen=True)
class CaseSpec:
    """Physical and numerical parameters of one benchmark case."""

    case_id: str
    domain: Domain
    dx: float
    dt_solver: float
    c0: float
    rho0: float
    p_bg: float
    viscosity: float
    force_magnitude: float
    trajectory_length: Optional[int] = None
    trajectory_counts: Optional[tuple] = None
    split_lengths: Optional[tuple] = None
    frames_between_samples: int = 100
    seed: int = 0
    reynolds: Optional[float] = None
    artificial_alpha: float = 0.0
    density_mode: str = "summation"
    lid_velocity: float = 0.0
    num_particles: Optional[int] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.dx > 0:
            raise ContractError("dx must be positive")
        if not self.dt_solver > 0:
            raise ContractError("dt_solver must be positive")
        if not self.c0 > 0 or not self.rho0 > 0:
            raise ContractError("c0 and rho0 must be positive")
        if self.viscosity < 0:
            raise ContractError("viscosity must be non-negative")
        if self.frames_between_samples < 1:
            raise ContractError("frames_between_samples must be >= 1")
        if self.density_mode not in ("summation", "evolution"):
            raise ContractError(f"unknown density mode {self.density_mode!r}")

    @property
    def dim(self) -> int:
        return self.domain.dim

    @property
    def frame_dt(self) -> float:
        return self.dt_solver * self.frames_between_samples

    @property
    def stationary(self) -> bool:
        return self.split_lengths is not None

    @property
    def particle_mass(self) -> float:
        return self.rho0 * self.dx**self.dim

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "domain": self.domain.to_dict(),
            "dx": self.dx,
            "dt_solver": self.dt_solver,
            "frame_dt": self.frame_dt,
            "frames_between_samples": self.frames_between_samples,
            "c0": self.c0,
            "rho0": self.rho0,
            "p_bg": self.p_bg,
            "viscosity": self.viscosity,
            "reynolds": self.reynolds,
            "force_magnitude": self.force_magnitude,
            "trajectory_length": self.trajectory_length,
            "trajectory_counts": list(self.trajectory_counts) if self.trajectory_counts else None,
            "split_lengths": list(self.split_lengths) if self.split_lengths else None,
            "num_particles": self.num_particles,
            "artificial_alpha": self.artificial_alpha,
            "density_mode": self.density_mode,
            "lid_velocity": self.lid_velocity,
            "seed": self.seed,
        }


def as_points(x: Sequence) -> np.ndarray:
    return np.atleast_2d(np.asarray(x, dtype=np.float64))
