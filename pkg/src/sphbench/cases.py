"""The seven benchmark cases: catalog constants, initial states and forcing.

Every box has its origin at the lower corner. Wall particles occupy the
outermost three spacings on each non-periodic side, so the fluid region of
a walled case starts at ``3 * dx``.

Wall layer indices count outward from the fluid: 0 is the layer touching
the fluid. Corner blocks use the Chebyshev layer (max over axes), which makes
the innermost ring closed.
"""

from __future__ import annotations

import json
import logging
import math
from typing import Optional, Union

import numpy as np

from .core import (
    FLUID,
    MOVING_WALL,
    WALL,
    CaseSpec,
    ContractError,
    Domain,
    ParticleState,
    make_state,
)
from .dataio import Trajectory
from .kernel import KernelSpec
from .sph import Solver, SolverInstabilityError, SolverParams, relax

log = logging.getLogger(__name__)

N_WALL_LAYERS = 3
RELAX_STEPS = 1000

# Warm-up for the statistically stationary cases: stop once the fluid
# kinetic energy changed by less than WARMUP_TOL over WARMUP_WINDOW frames.
WARMUP_WINDOW = 100
WARMUP_TOL = 0.01
WARMUP_MAX_FRAMES = 5000


def _catalog() -> dict:
    two_pi = 2.0 * math.pi
    dx_ldc3 = 1.0 / 24.0
    specs = [
        CaseSpec(
            "tgv2d", Domain((1.0, 1.0), (True, True)), dx=0.02, dt_solver=4e-4,
            c0=10.0, rho0=1.0, p_bg=0.0, viscosity=0.01, force_magnitude=0.0,
            trajectory_length=126, trajectory_counts=(100, 50, 50), reynolds=100.0,
            num_particles=2500,
            extra={"k": two_pi, "layout": "relaxed", "transport_pressure": 100.0},
        ),
        CaseSpec(
            "rpf2d", Domain((1.0, 2.0), (True, True)), dx=0.025, dt_solver=4e-4,
            c0=10.0, rho0=1.0, p_bg=5.0, viscosity=0.1, force_magnitude=1.0,
            split_lengths=(20000, 10000, 10000), trajectory_counts=(1, 1, 1), reynolds=10.0,
            num_particles=3200, extra={"layout": "lattice"},
        ),
        CaseSpec(
            "ldc2d", Domain((1.12, 1.12), (False, False)), dx=0.02, dt_solver=4e-4,
            c0=10.0, rho0=1.0, p_bg=1.0, viscosity=0.01, force_magnitude=0.0,
            split_lengths=(10000, 5000, 5000), trajectory_counts=(1, 1, 1), reynolds=100.0,
            lid_velocity=1.0, num_particles=2708,
            extra={"cavity": [1.0, 1.0], "layout": "lattice"},
        ),
        CaseSpec(
            "dam2d", Domain((5.486, 2.12), (False, False)), dx=0.02, dt_solver=3e-4,
            c0=14.14, rho0=1.0, p_bg=0.0, viscosity=5e-5, force_magnitude=1.0,
            trajectory_length=401, trajectory_counts=(50, 25, 25), reynolds=40000.0,
            artificial_alpha=0.1, density_mode="evolution", num_particles=5740,
            extra={
                "tank": [5.366, 2.0],
                "column": [2.0, 1.0],
                "gravity": [0.0, -1.0],
                "layout": "relaxed",
                "wall_hydrostatic": True,
            },
        ),
        CaseSpec(
            "tgv3d", Domain((two_pi,) * 3, (True,) * 3), dx=two_pi / 20, dt_solver=5e-3,
            c0=10.0, rho0=1.0, p_bg=0.0, viscosity=0.02, force_magnitude=0.0,
            trajectory_length=61, trajectory_counts=(200, 100, 100), reynolds=50.0,
            num_particles=8000,
            extra={"k": 1.0, "layout": "relaxed", "transport_pressure": 100.0},
        ),
        CaseSpec(
            "rpf3d", Domain((1.0, 2.0, 0.5), (True,) * 3), dx=0.05, dt_solver=1e-3,
            c0=10.0, rho0=1.0, p_bg=2.0, viscosity=0.1, force_magnitude=1.0,
            split_lengths=(10000, 5000, 5000), trajectory_counts=(1, 1, 1), reynolds=10.0,
            num_particles=8000, extra={"layout": "lattice"},
        ),
        CaseSpec(
            "ldc3d", Domain((1.25, 1.25, 0.5), (False, False, True)), dx=dx_ldc3,
            dt_solver=9e-4, c0=10.0, rho0=1.0, p_bg=1.0, viscosity=0.01,
            force_magnitude=0.0, split_lengths=(10000, 5000, 5000),
            trajectory_counts=(1, 1, 1), reynolds=100.0, lid_velocity=1.0,
            num_particles=8160, extra={"cavity": [1.0, 1.0], "layout": "lattice"},
        ),
    ]
    return {s.case_id: s for s in specs}


CATALOG = _catalog()
CASE_IDS = tuple(CATALOG)


def get_case(case: Union[str, CaseSpec]) -> CaseSpec:
    if isinstance(case, CaseSpec):
        return case
    try:
        return CATALOG[case]
    except KeyError:
        raise ContractError(
            f"unknown case id {case!r}; expected one of {', '.join(CASE_IDS)}"
        ) from None


def catalog_json(indent: int = 2) -> str:
    """All catalog constants as a JSON document keyed by case id."""
    return json.dumps(
        {cid: {**s.to_dict(), "extra": s.extra} for cid, s in CATALOG.items()},
        indent=indent,
    )


def solver_params(spec: CaseSpec) -> SolverParams:
    return SolverParams(
        c0=spec.c0,
        rho0=spec.rho0,
        p_bg=spec.p_bg,
        viscosity=spec.viscosity,
        artificial_alpha=spec.artificial_alpha,
        density_mode=spec.density_mode,
        wall_hydrostatic=bool(spec.extra.get("wall_hydrostatic", False)),
        transport_pressure=spec.extra.get("transport_pressure"),
    )


def kernel_for(spec: CaseSpec) -> KernelSpec:
    return KernelSpec.from_dx(spec.dx, spec.dim)


# -- forcing -------------------------------------------------------------------


def external_force(case: Union[str, CaseSpec], positions, t: float = 0.0) -> np.ndarray:
    """Volumetric body force per particle, shape ``[N, dim]``."""
    spec = get_case(case)
    x = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    f = np.zeros_like(x)
    family = spec.case_id[:3]
    if family == "rpf":
        half = 0.5 * spec.domain.extents[1]
        f[:, 0] = np.where(x[:, 1] < half, spec.force_magnitude, -spec.force_magnitude)
    elif family == "dam":
        f[:] = spec.force_magnitude * np.asarray(spec.extra["gravity"])
    return f


def has_force(case: Union[str, CaseSpec]) -> bool:
    return get_case(case).case_id[:3] in ("rpf", "dam")


def tgv_velocity(positions, k: float) -> np.ndarray:
    """Taylor-Green initial field; 2D or 3D by the trailing axis."""
    x = np.asarray(positions, dtype=np.float64)
    v = np.zeros_like(x)
    if x.shape[-1] == 2:
        px, py = k * x[..., 0], k * x[..., 1]
        v[..., 0] = -np.cos(px) * np.sin(py)
        v[..., 1] = np.sin(px) * np.cos(py)
    else:
        px, py, pz = k * x[..., 0], k * x[..., 1], k * x[..., 2]
        v[..., 0] = np.sin(px) * np.cos(py) * np.cos(pz)
        v[..., 1] = -np.cos(px) * np.sin(py) * np.cos(pz)
    return v


# -- geometry ------------------------------------------------------------------


def lattice(counts, spacing, origin=None) -> np.ndarray:
    """Cell-centred lattice ``origin + (i + 0.5) * spacing``."""
    counts = tuple(int(c) for c in counts)
    spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (len(counts),))
    origin = np.zeros(len(counts)) if origin is None else np.asarray(origin, np.float64)
    axes = [origin[a] + (np.arange(c) + 0.5) * spacing[a] for a, c in enumerate(counts)]
    grid = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grid], axis=1)


def _wall_axis(start, n, spacing, dx):
    """Coordinates along one walled axis and their signed layer offsets.

    Interior points get offset -1, wall points 0..2 counted outward. The
    returned ``side`` is -1 below the interior, +1 above, 0 inside.
    """
    k = np.arange(N_WALL_LAYERS)
    lo = start - (k[::-1] + 0.5) * dx
    mid = start + (np.arange(n) + 0.5) * spacing
    hi = start + n * spacing + (k + 0.5) * dx
    coords = np.concatenate([lo, mid, hi])
    offset = np.concatenate([k[::-1], np.full(n, -1), k])
    side = np.concatenate([np.full(N_WALL_LAYERS, -1), np.zeros(n, int), np.ones(N_WALL_LAYERS, int)])
    return coords, offset, side


def _box_frame(starts, counts, spacings, dx):
    """Wall particles framing a rectangular interior in the x-y plane.

    Returns positions, Chebyshev layers, and the y-side (+1 for the top rows).
    """
    cx, ox, _ = _wall_axis(starts[0], counts[0], spacings[0], dx)
    cy, oy, sy = _wall_axis(starts[1], counts[1], spacings[1], dx)
    gx, gy = np.meshgrid(np.arange(cx.size), np.arange(cy.size), indexing="ij")
    gx, gy = gx.ravel(), gy.ravel()
    outside = (ox[gx] >= 0) | (oy[gy] >= 0)
    gx, gy = gx[outside], gy[outside]
    pos = np.stack([cx[gx], cy[gy]], axis=1)
    layer = np.maximum(ox[gx], oy[gy])
    return pos, layer, sy[gy], oy[gy]


def _cavity(spec: CaseSpec):
    """Fluid block and walls of a lid-driven cavity (2D, or 3D periodic in z)."""
    dx = spec.dx
    wall = N_WALL_LAYERS * dx
    n = [int(round(c / dx)) for c in spec.extra["cavity"]]
    fluid = lattice(n, dx, origin=[wall, wall])
    frame, layer, yside, yoff = _box_frame([wall, wall], n, [dx, dx], dx)
    lid = yside > 0
    # lid rows run the full width; their layer counts along y only
    layer = np.where(lid, yoff, layer)
    types = np.where(lid, MOVING_WALL, WALL)
    if spec.dim == 3:
        nz = int(round(spec.domain.extents[2] / dx))
        z = (np.arange(nz) + 0.5) * dx
        fluid = np.concatenate(
            [np.column_stack([fluid, np.full(len(fluid), zk)]) for zk in z]
        )
        frame = np.concatenate(
            [np.column_stack([frame, np.full(len(frame), zk)]) for zk in z]
        )
        layer = np.tile(layer, nz)
        types = np.tile(types, nz)
    return fluid, frame, layer, types


def _dam_walls(spec: CaseSpec):
    dx = spec.dx
    wall = N_WALL_LAYERS * dx
    tank_w, tank_h = spec.extra["tank"]
    nx = int(round(tank_w / dx))
    ny = int(round(tank_h / dx))
    # the tank width is not a multiple of dx: stretch the wall spacing slightly
    sx = tank_w / nx
    frame, layer, _, _ = _box_frame([wall, wall], [nx, ny], [sx, tank_h / ny], dx)
    return frame, layer


def _temporary_column_walls(spec: CaseSpec, origin, counts):
    """Three lattice layers capping the column on its open right and top sides."""
    dx = spec.dx
    ext = [c + N_WALL_LAYERS for c in counts]
    block = lattice(ext, dx, origin=origin)
    rel = (block - np.asarray(origin)) / dx
    keep = (rel[:, 0] > counts[0]) | (rel[:, 1] > counts[1])
    return block[keep]


def _assemble(spec, fluid, walls=None, layers=None, types=None, velocities=None):
    nf = len(fluid)
    if walls is None:
        pos = fluid
        t = np.zeros(nf, dtype=np.int64)
        lay = np.zeros(nf, dtype=np.int64)
    else:
        pos = np.concatenate([fluid, walls])
        t = np.concatenate([np.zeros(nf, np.int64), np.asarray(types, np.int64)])
        lay = np.concatenate([np.zeros(nf, np.int64), np.asarray(layers, np.int64)])
    v = np.zeros_like(pos)
    if velocities is not None:
        v[:nf] = velocities
    return make_state(
        pos, v, rho0=spec.rho0, dx=spec.dx, types=t, layers=lay, p_bg=spec.p_bg
    )


def _random_block(rng, origin, extent, n):
    return np.asarray(origin) + rng.random((n, len(extent))) * np.asarray(extent)


def init_case(
    case: Union[str, CaseSpec],
    seed: int = 0,
    layout: Optional[str] = None,
    relax_steps: int = RELAX_STEPS,
) -> tuple:
    """Initial particle state (all wall layers) and the case constants.

    ``layout`` is ``"relaxed"`` (random draw followed by relaxation) or
    ``"lattice"``; the default follows the catalog: relaxed for TGV and DAM,
    lattice for the statistically stationary cases.
    """
    spec = get_case(case)
    layout = layout or spec.extra.get("layout", "lattice")
    if layout not in ("relaxed", "lattice"):
        raise ContractError(f"unknown layout {layout!r}")
    rng = np.random.default_rng(seed)
    kernel = kernel_for(spec)
    params = solver_params(spec)
    family = spec.case_id[:3]
    dom = spec.domain

    if family in ("tgv", "rpf"):
        counts = [int(round(L / spec.dx)) for L in dom.extents]
        if layout == "lattice":
            fluid = lattice(counts, spec.dx)
        else:
            fluid = _random_block(rng, np.zeros(spec.dim), dom.lengths, int(np.prod(counts)))
            state = _assemble(spec, fluid)
            fluid = relax(state, dom, kernel, params, n_steps=relax_steps).positions
        vel = tgv_velocity(fluid, spec.extra["k"]) if family == "tgv" else None
        return _assemble(spec, fluid, velocities=vel), spec

    if family == "ldc":
        fluid, walls, layers, types = _cavity(spec)
        if layout == "relaxed":
            fluid = _random_block(
                rng, [N_WALL_LAYERS * spec.dx] * 2 + [0.0] * (spec.dim - 2),
                list(spec.extra["cavity"]) + list(dom.extents[2:]), len(fluid),
            )
            state = _assemble(spec, fluid, walls, layers, types)
            lo = np.zeros(spec.dim) + N_WALL_LAYERS * spec.dx
            hi = lo + np.asarray(spec.extra["cavity"] + list(dom.extents[2:]))
            if spec.dim == 3:
                lo[2], hi[2] = -np.inf, np.inf
            fluid = relax(
                state, dom, kernel, params, n_steps=relax_steps, bounds=(lo, hi)
            ).positions[: len(fluid)]
        return _assemble(spec, fluid, walls, layers, types), spec

    if family == "dam":
        walls, layers = _dam_walls(spec)
        origin = np.full(2, N_WALL_LAYERS * spec.dx)
        col_w, col_h = spec.extra["column"]
        counts = [int(round(col_w / spec.dx)), int(round(col_h / spec.dx))]
        if layout == "lattice":
            fluid = lattice(counts, spec.dx, origin=origin)
        else:
            nf = counts[0] * counts[1]
            fluid = _random_block(rng, origin, [col_w, col_h], nf)
            temp = _temporary_column_walls(spec, origin, counts)
            all_walls = np.concatenate([walls, temp])
            state = _assemble(
                spec, fluid, all_walls, np.zeros(len(all_walls)), np.full(len(all_walls), WALL)
            )
            box = (origin, origin + np.asarray([col_w, col_h]))
            fluid = relax(
                state, dom, kernel, params, n_steps=relax_steps, bounds=box
            ).positions[:nf]
        state = _assemble(spec, fluid, walls, layers, np.full(len(walls), WALL))
        # hydrostatic start: p = rho0 g (H - y) in the column, walls follow via BC
        g = abs(spec.extra["gravity"][1]) * spec.force_magnitude
        depth = np.clip(origin[1] + col_h - state.positions[:, 1], 0.0, None)
        p = np.where(state.fluid_mask, spec.rho0 * g * depth, 0.0) + spec.p_bg
        rho = params.rho0 + (p - params.p_bg) / params.c0**2
        return state.replace(densities=rho, pressures=p), spec

    raise ContractError(f"no constructor for case {spec.case_id!r}")  # pragma: no cover


def prescribed_velocity(spec: CaseSpec, state: ParticleState) -> np.ndarray:
    v = np.zeros_like(state.positions)
    v[state.types == MOVING_WALL, 0] = spec.lid_velocity
    return v


def strip_wall_layers(state: ParticleState) -> ParticleState:
    """Keep fluid plus the innermost wall layer."""
    keep = (state.types == FLUID) | (state.layers == 0)
    if keep.all():
        return state
    return state.subset(keep)


def make_solver(
    spec: CaseSpec,
    state: ParticleState,
    fixed_dt: bool = True,
    diagnostics=None,
    backend: Optional[str] = None,
) -> Solver:
    """Solver configured with the case's forcing, wall kinematics and step."""
    force = (lambda x, t: external_force(spec, x, t)) if has_force(spec) else None
    return Solver(
        state,
        spec.domain,
        kernel_for(spec),
        solver_params(spec),
        force_field=force,
        prescribed_velocity=prescribed_velocity(spec, state),
        fixed_dt=spec.dt_solver if fixed_dt else None,
        diagnostics=diagnostics,
        backend=backend,
    )


def _fluid_energy(solver: Solver) -> float:
    s = solver.state
    v = s.velocities[s.fluid_mask]
    return float(0.5 * np.sum(s.masses[s.fluid_mask] * np.sum(v * v, axis=1)))


def warm_up(
    solver: Solver,
    spec: CaseSpec,
    window: int = WARMUP_WINDOW,
    tol: float = WARMUP_TOL,
    max_frames: int = WARMUP_MAX_FRAMES,
) -> int:
    """Advance until the kinetic energy levels off; returns frames spent."""
    energies = [_fluid_energy(solver)]
    for frame in range(1, max_frames + 1):
        solver.run(spec.frames_between_samples)
        energies.append(_fluid_energy(solver))
        if frame >= window:
            old, new = energies[frame - window], energies[frame]
            if new > 0 and abs(new - old) <= tol * new:
                log.info("%s warm-up converged after %d frames", spec.case_id, frame)
                return frame
    log.warning("%s warm-up hit the cap of %d frames", spec.case_id, max_frames)
    return max_frames


def generate_trajectory(
    case: Union[str, CaseSpec],
    seed: int = 0,
    frames: Optional[int] = None,
    *,
    layout: Optional[str] = None,
    relax_steps: int = RELAX_STEPS,
    warmup: Optional[bool] = None,
    warmup_max_frames: int = WARMUP_MAX_FRAMES,
    diagnostics=None,
) -> Trajectory:
    """Run the solver and record stripped positions every solver-stride steps.

    Frame 0 is the initial (or post-warm-up) state; ``frames`` counts it.
    Stationary cases default to the summed split lengths, which
    :func:`sphbench.dataio.make_splits` then cuts along time.
    """
    spec = get_case(case)
    if frames is None:
        frames = spec.trajectory_length or sum(spec.split_lengths)
    if frames < 1:
        raise ContractError("frames must be at least 1")
    state, _ = init_case(spec, seed, layout=layout, relax_steps=relax_steps)
    solver = make_solver(spec, state, diagnostics=diagnostics)
    if warmup is None:
        warmup = spec.stationary
    if warmup:
        warm_up(solver, spec, max_frames=warmup_max_frames)
    keep = (state.types == FLUID) | (state.layers == 0)
    out = np.empty((frames, int(keep.sum()), spec.dim), dtype=np.float32)
    out[0] = solver.state.positions[keep]
    for f in range(1, frames):
        try:
            solver.run(spec.frames_between_samples)
        except SolverInstabilityError as exc:
            raise SolverInstabilityError(f"frame {f}: {exc}", exc.step) from exc
        out[f] = solver.state.positions[keep]
    return Trajectory(
        positions=out,
        types=state.types[keep].astype(np.int64),
        frame_dt=spec.frame_dt,
        case_id=spec.case_id,
    )
