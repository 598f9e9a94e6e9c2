"""Weakly-compressible SPH solver with generalized wall boundaries.

Pairwise sums run over an :class:`~sphbench.neighbors.EdgeSet` whose
``displacements`` are ``x_i - x_j`` with ``i`` the receiver. Fluid particles
feel every neighbor; wall particles only gather fluid data for the boundary
condition.

Momentum balance per fluid particle ``i``::

    a_i = 1/m_i sum_j (V_i^2 + V_j^2) [-p_ij gradW_ij + eta_ij v_ij/r dW/dr]
          - sum_j m_j Pi_ij gradW_ij + F_i / rho_i

with the density-weighted pressure ``p_ij = (rho_j p_i + rho_i p_j) /
(rho_i + rho_j)``, harmonic-mean dynamic viscosity ``eta_ij`` and Monaghan's
artificial viscosity ``Pi_ij`` acting on approaching pairs only.

With a positive background pressure, particles are advected with a transport
velocity that carries the background-pressure correction, and the momentum
equation uses the dynamic pressure ``p - p_bg`` plus the extra stress
``rho v (v_transport - v)``.
"""

from __future__ import annotations

import csv
import logging
import math
import weakref
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import FLUID, Domain, ParticleState, wrap_positions
from .kernel import KernelSpec, kernel_value, kernel_value_and_derivative
from .neighbors import EdgeSet, VerletList

log = logging.getLogger(__name__)

ForceField = Callable[[np.ndarray, float], np.ndarray]


class SolverInstabilityError(RuntimeError):
    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class SolverParams:
    c0: float
    rho0: float = 1.0
    p_bg: float = 0.0
    viscosity: float = 0.0
    artificial_alpha: float = 0.0
    cfl_number: float = 0.25
    density_mode: str = "summation"
    transport_velocity: Optional[bool] = None
    # shifting pressure of the transport velocity; defaults to p_bg
    transport_pressure: Optional[float] = None
    wall_hydrostatic: bool = False

    def __post_init__(self):
        if not 0 < self.cfl_number < 1:
            raise ValueError("cfl_number must lie in (0, 1)")
        if self.artificial_alpha < 0:
            raise ValueError("artificial_alpha must be non-negative")
        if self.density_mode not in ("summation", "evolution"):
            raise ValueError(f"unknown density mode {self.density_mode!r}")

    @property
    def use_transport_velocity(self) -> bool:
        if self.transport_velocity is None:
            return self.background_pressure > 0
        return self.transport_velocity

    @property
    def background_pressure(self) -> float:
        return self.p_bg if self.transport_pressure is None else self.transport_pressure


def eos_pressure(rho, params: SolverParams):
    """Barotropic equation of state ``p = c0^2 (rho - rho0) + p_bg``."""
    return params.c0**2 * (np.asarray(rho, dtype=np.float64) - params.rho0) + params.p_bg


def eos_density(p, params: SolverParams):
    return params.rho0 + (np.asarray(p, dtype=np.float64) - params.p_bg) / params.c0**2


_EDGE_CACHE: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


class EdgeKernel:
    """Kernel weights and gradients evaluated once per edge set."""

    __slots__ = ("w", "dwdr_over_r", "grad")

    def __init__(self, edges: EdgeSet, kernel: KernelSpec):
        r = edges.distances
        w, dw = kernel_value_and_derivative(r, kernel)
        safe = np.where(r > 0, r, 1.0)
        self.w = w
        self.dwdr_over_r = np.where(r > 0, dw / safe, 0.0)
        self.grad = self.dwdr_over_r[:, None] * edges.displacements


def edge_kernel(edges: EdgeSet, kernel: KernelSpec) -> EdgeKernel:
    key = (kernel.h, kernel.dim)
    per_edges = _EDGE_CACHE.get(edges)
    if per_edges is None:
        per_edges = {}
        _EDGE_CACHE[edges] = per_edges
    ek = per_edges.get(key)
    if ek is None:
        ek = per_edges[key] = EdgeKernel(edges, kernel)
    return ek


def _scatter(values, index, n):
    """Sum rows of ``values`` into ``n`` bins given by ``index``."""
    if values.ndim == 1:
        return np.bincount(index, weights=values, minlength=n)
    return np.stack(
        [np.bincount(index, weights=values[:, k], minlength=n) for k in range(values.shape[1])],
        axis=1,
    )


def density_summation(state: ParticleState, edges: EdgeSet, kernel: KernelSpec):
    """``rho_i = sum_j m_j W(|x_i - x_j|)`` including the self contribution."""
    w = edge_kernel(edges, kernel).w
    rho = state.masses * kernel_value(0.0, kernel)
    rho = rho + _scatter(np.take(state.masses, edges.senders) * w, edges.receivers, state.n)
    return rho


def density_rate(
    state: ParticleState, edges: EdgeSet, kernel: KernelSpec, velocities=None
):
    """``drho_i/dt = rho_i sum_j (m_j / rho_j) (v_i - v_j) . gradW_ij``."""
    v = state.velocities if velocities is None else velocities
    i, j = edges.receivers, edges.senders
    grad = edge_kernel(edges, kernel).grad
    vij = np.take(v, i, axis=0) - np.take(v, j, axis=0)
    vol = state.masses / state.densities
    term = np.take(vol, j) * np.einsum("ij,ij->i", vij, grad)
    return state.densities * _scatter(term, i, state.n)


def density_evolution_step(
    state: ParticleState, edges: EdgeSet, kernel: KernelSpec, dt: float, velocities=None
):
    """One explicit Euler update of the continuity equation (fluid only)."""
    if dt == 0:
        return state.densities.copy()
    return _evolve_density(state, density_rate(state, edges, kernel, velocities), dt)


def _evolve_density(state: ParticleState, drho, dt: float):
    rho = state.densities + dt * np.where(state.fluid_mask, drho, 0.0)
    if np.any(rho[state.fluid_mask] <= 0):
        raise SolverInstabilityError("non-positive density after continuity update")
    return rho


def enforce_wall_bc(
    state: ParticleState,
    edges: EdgeSet,
    kernel: KernelSpec,
    params: SolverParams,
    prescribed_velocity=None,
    force=None,
) -> ParticleState:
    """Set wall velocities and pressures from kernel-weighted fluid averages.

    Wall velocity becomes ``2 v_prescribed - <v_fluid>`` (no-slip mirror),
    wall pressure ``<p_fluid>`` plus, when ``params.wall_hydrostatic`` is on
    and a volumetric ``force`` is given, the hydrostatic extrapolation
    ``<F_f . (x_w - x_f)>``. Walls without fluid neighbors keep the prescribed
    velocity and ``p_bg`` (see ``WALL_WEIGHT_FLOOR``). Wall densities follow
    from the inverse EOS.
    """
    if not state.wall_mask.any():
        return state
    f = None
    if params.wall_hydrostatic and force is not None:
        f = np.broadcast_to(np.asarray(force, dtype=np.float64), state.positions.shape)
    sums = _wall_sums(state, edges, edge_kernel(edges, kernel).w, f)
    return _apply_wall_bc(state, sums, params, kernel, prescribed_velocity)


def _wall_sums(state: ParticleState, edges: EdgeSet, w, force=None):
    """Kernel-weighted fluid sums gathered by wall particles."""
    n = state.n
    i, j = edges.receivers, edges.senders
    sel = np.take(state.wall_mask, i) & (np.take(state.types, j) == FLUID)
    i, j = np.compress(sel, i), np.compress(sel, j)
    w = np.compress(sel, w)
    wsum = np.bincount(i, weights=w, minlength=n)
    v_sum = _scatter(np.take(state.velocities, j, axis=0) * w[:, None], i, n)
    p_sum = np.bincount(i, weights=np.take(state.pressures, j) * w, minlength=n)
    if force is not None:
        hydro = np.einsum(
            "ij,ij->i", np.take(force, j, axis=0), np.compress(sel, edges.displacements, axis=0)
        )
        p_sum += np.bincount(i, weights=hydro * w, minlength=n)
    return wsum, v_sum, p_sum


# walls whose fluid weight sum is below this fraction of W(0) count as dry;
# otherwise a neighbor sitting on the support edge (W ~ 1e-80) would switch
# the wall state depending on rounding
WALL_WEIGHT_FLOOR = 1e-12


def _apply_wall_bc(
    state: ParticleState, sums, params: SolverParams, kernel: KernelSpec, prescribed_velocity=None
):
    wsum, v_sum, p_sum = sums
    wall = state.wall_mask
    if prescribed_velocity is None:
        prescribed_velocity = np.zeros_like(state.velocities)
    has = wall & (wsum > WALL_WEIGHT_FLOOR * kernel_value(0.0, kernel))
    safe = np.where(has, wsum, 1.0)
    vel = state.velocities.copy()
    prs = state.pressures.copy()
    vel[wall] = prescribed_velocity[wall]
    prs[wall] = params.p_bg
    vel[has] = 2.0 * prescribed_velocity[has] - v_sum[has] / safe[has, None]
    prs[has] = p_sum[has] / safe[has]
    rho = state.densities.copy()
    rho[wall] = eos_density(prs[wall], params)
    return state.replace(velocities=vel, pressures=prs, densities=rho)


def background_acceleration(
    state: ParticleState, edges: EdgeSet, kernel: KernelSpec, p_background: float
):
    """Background-pressure correction ``-p_b/m_i sum_j (V_i^2 + V_j^2) gradW_ij``."""
    n = state.n
    i, j = edges.receivers, edges.senders
    vol = state.masses / state.densities
    grad = edge_kernel(edges, kernel).grad
    vi, vj = np.take(vol, i), np.take(vol, j)
    coef = vi * vi + vj * vj
    acc = -p_background * _scatter(coef[:, None] * grad, i, n) / state.masses[:, None]
    acc[~state.fluid_mask] = 0.0
    return acc


def momentum_rhs(
    state: ParticleState,
    edges: EdgeSet,
    kernel: KernelSpec,
    params: SolverParams,
    external_force=None,
    transport_velocities=None,
):
    """Fluid accelerations; wall rows are zero.

    ``external_force`` is a volumetric force (``[N, dim]`` or broadcastable);
    it enters as ``F / rho``.
    """
    n, dim = state.n, state.dim
    fluid = state.fluid_mask
    ek = edge_kernel(edges, kernel)
    i, j = edges.receivers, edges.senders
    d, r = edges.displacements, edges.distances
    grad = ek.grad
    if not fluid.all():
        keep = np.take(fluid, i)
        i, j, r = np.compress(keep, i), np.compress(keep, j), np.compress(keep, r)
        d = np.compress(keep, d, axis=0)
        grad = np.compress(keep, grad, axis=0)
        fvisc_all = np.compress(keep, ek.dwdr_over_r)
    else:
        fvisc_all = ek.dwdr_over_r

    rho, m = state.densities, state.masses
    p = state.pressures
    if params.use_transport_velocity:
        p = p - params.p_bg
    vol = m / rho
    v = state.velocities

    rho_i, rho_j = np.take(rho, i), np.take(rho, j)
    vol_i, vol_j = np.take(vol, i), np.take(vol, j)
    vol2 = vol_i * vol_i + vol_j * vol_j
    p_ij = (rho_j * np.take(p, i) + rho_i * np.take(p, j)) / (rho_i + rho_j)
    pair = -p_ij[:, None] * grad

    vij = np.take(v, i, axis=0) - np.take(v, j, axis=0)
    if params.viscosity > 0:
        # rho_i * rho_j * nu / (rho_i + rho_j) * 2 is the harmonic mean of eta
        eta_ij = 2.0 * params.viscosity * rho_i * rho_j / (rho_i + rho_j)
        pair += (eta_ij * fvisc_all)[:, None] * vij

    if transport_velocities is not None:
        # extra stress A = rho v (v_transport - v), averaged over the pair
        dv = np.where(fluid[:, None], transport_velocities - v, 0.0)
        stress = (rho[:, None, None] * v[:, :, None] * dv[:, None, :]).reshape(n, dim * dim)
        a_ij = np.take(stress, i, axis=0) + np.take(stress, j, axis=0)
        for a in range(dim):
            row = a_ij[:, a * dim] * grad[:, 0]
            for b in range(1, dim):
                row += a_ij[:, a * dim + b] * grad[:, b]
            pair[:, a] += 0.5 * row

    acc = _scatter(vol2[:, None] * pair, i, n) / m[:, None]

    if params.artificial_alpha > 0:
        vr = np.einsum("ij,ij->i", vij, d)
        approaching = vr < 0
        h = kernel.h
        rho_bar = 0.5 * (rho_i + rho_j)
        mu = h * vr / (r * r + 0.01 * h * h)
        pi_ij = np.where(approaching, -params.artificial_alpha * params.c0 * mu / rho_bar, 0.0)
        acc -= _scatter((np.take(m, j) * pi_ij)[:, None] * grad, i, n)

    return _finish_acceleration(acc, state, external_force)


def _finish_acceleration(acc, state: ParticleState, external_force):
    """Add ``F / rho``, zero wall rows and reject non-finite values."""
    if external_force is not None:
        f = np.broadcast_to(np.asarray(external_force, dtype=np.float64), acc.shape)
        acc += f / state.densities[:, None]
    acc[~state.fluid_mask] = 0.0
    if not np.all(np.isfinite(acc)):
        raise SolverInstabilityError("non-finite acceleration in momentum equation")
    return acc


def cfl_dt(
    state: ParticleState,
    kernel: KernelSpec,
    params: SolverParams,
    accelerations=None,
    fixed_dt: Optional[float] = None,
) -> float:
    """Stable step ``cfl * min(h/(c0+|v|max), h^2/nu, sqrt(h/|a|max))``.

    ``fixed_dt`` overrides the estimate (dataset generation mode).
    """
    if fixed_dt is not None:
        dt = float(fixed_dt)
    else:
        h = kernel.h
        fluid = state.fluid_mask
        vmax = np.sqrt(np.max(np.sum(state.velocities[fluid] ** 2, axis=1), initial=0.0))
        bounds = [h / (params.c0 + vmax)]
        if params.viscosity > 0:
            bounds.append(h * h / params.viscosity)
        if accelerations is not None:
            amax = np.sqrt(np.max(np.sum(accelerations[fluid] ** 2, axis=1), initial=0.0))
            if amax > 0:
                bounds.append(math.sqrt(h / amax))
        dt = params.cfl_number * min(bounds)
    if not dt > 0 or not math.isfinite(dt):
        raise SolverInstabilityError(f"invalid time step {dt}")
    return dt


def kinetic_energy(state: ParticleState, mask=None) -> float:
    m = state.fluid_mask if mask is None else mask
    v = state.velocities[m]
    return float(0.5 * np.sum(state.masses[m] * np.sum(v * v, axis=1)))


@dataclass
class DiagnosticsWriter:
    """CSV stream of per-step solver diagnostics."""

    path: str
    every: int = 1
    _fh: object = field(default=None, repr=False)
    _writer: object = field(default=None, repr=False)

    FIELDS = ("step", "t", "dt", "e_kin", "max_speed", "min_rho", "max_rho")

    def write(self, solver: "Solver", dt: float) -> None:
        if solver.step_count % self.every:
            return
        if self._fh is None:
            self._fh = open(self.path, "w", newline="")
            self._writer = csv.writer(self._fh)
            self._writer.writerow(self.FIELDS)
        s = solver.state
        fl = s.fluid_mask
        speed = np.sqrt(np.sum(s.velocities[fl] ** 2, axis=1))
        self._writer.writerow(
            [
                solver.step_count,
                f"{solver.t:.10g}",
                f"{dt:.10g}",
                f"{kinetic_energy(s):.10g}",
                f"{speed.max(initial=0.0):.10g}",
                f"{s.densities[fl].min(initial=np.inf):.10g}",
                f"{s.densities[fl].max(initial=-np.inf):.10g}",
            ]
        )

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


BACKENDS = ("numba", "numpy")
DEFAULT_BACKEND = "numba"


class _NumpyOps:
    """Vectorized reference path with a Verlet list."""

    name = "numpy"

    def __init__(self, domain: Domain, kernel: KernelSpec, fluid, skin: float):
        self.kernel = kernel
        self.neighbors = VerletList(
            domain, kernel.support_radius, skin, pair_filter=lambda s, r: fluid[s] | fluid[r]
        )

    def edges(self, x) -> EdgeSet:
        return self.neighbors.update(x)

    def density_summation(self, state, edges):
        return density_summation(state, edges, self.kernel)

    def density_rate(self, state, edges, velocities):
        return density_rate(state, edges, self.kernel, velocities)

    def wall_sums(self, state, edges, force):
        return _wall_sums(state, edges, edge_kernel(edges, self.kernel).w, force)

    def momentum(self, state, edges, params, force, transport):
        return momentum_rhs(state, edges, self.kernel, params, force, transport)

    def background(self, state, edges, p_b):
        return background_acceleration(state, edges, self.kernel, p_b)


class _NumbaOps:
    """Compiled pair loops over a compiled Verlet-list search."""

    name = "numba"

    def __init__(self, domain: Domain, kernel: KernelSpec, fluid, skin: float = 0.0):
        from . import _fast

        self._fast = _fast
        self.kernel = kernel
        self.search = _fast.PairSearch(
            domain.lengths, domain.periodic, kernel.support_radius, fluid, skin
        )
        self._last = None

    def edges(self, x) -> EdgeSet:
        r, s, d, dist = self.search(x)
        es = EdgeSet(s, r, d, dist)
        w, f = self._fast.kernel_arrays(dist, self.kernel.h, self.kernel.normalization)
        self._last = (es, w, f)
        return es

    def _wf(self, edges):
        if self._last is not None and self._last[0] is edges:
            return self._last[1], self._last[2]
        w, f = self._fast.kernel_arrays(edges.distances, self.kernel.h, self.kernel.normalization)
        self._last = (edges, w, f)
        return w, f

    def density_summation(self, state, edges):
        w, _ = self._wf(edges)
        w0 = float(kernel_value(0.0, self.kernel))
        return self._fast.density_summation(edges.receivers, edges.senders, w, state.masses, w0)

    def density_rate(self, state, edges, velocities):
        _, f = self._wf(edges)
        v = state.velocities if velocities is None else velocities
        return self._fast.density_rate(
            edges.receivers, edges.senders, edges.displacements, f,
            state.masses, state.densities, np.ascontiguousarray(v, dtype=np.float64),
        )

    def wall_sums(self, state, edges, force):
        w, _ = self._wf(edges)
        use = force is not None
        f = np.ascontiguousarray(force, dtype=np.float64) if use else np.zeros((1, state.dim))
        return self._fast.wall_sums(
            edges.receivers, edges.senders, edges.displacements, w,
            state.wall_mask, state.fluid_mask, state.velocities, state.pressures, f, use,
        )

    def momentum(self, state, edges, params, force, transport):
        _, f = self._wf(edges)
        p = state.pressures
        if params.use_transport_velocity:
            p = p - params.p_bg
        use_t = transport is not None
        tv = np.ascontiguousarray(transport, dtype=np.float64) if use_t else np.zeros((1, state.dim))
        acc = self._fast.momentum(
            edges.receivers, edges.senders, edges.displacements, edges.distances, f,
            state.fluid_mask, state.densities, p, state.masses, state.velocities,
            float(params.viscosity), float(params.artificial_alpha), float(params.c0),
            float(self.kernel.h), tv, use_t,
        )
        return _finish_acceleration(acc, state, force)

    def background(self, state, edges, p_b):
        _, f = self._wf(edges)
        return self._fast.background(
            edges.receivers, edges.senders, edges.displacements, f,
            state.masses, state.densities, state.fluid_mask, float(p_b),
        )


def make_ops(backend: Optional[str], domain: Domain, kernel: KernelSpec, fluid, skin: float):
    """Pair-sum backend: ``"numba"`` (compiled, default) or ``"numpy"`` (reference)."""
    backend = DEFAULT_BACKEND if backend is None else backend
    if backend == "numba":
        return _NumbaOps(domain, kernel, fluid, skin)
    if backend == "numpy":
        return _NumpyOps(domain, kernel, fluid, skin)
    raise ValueError(f"unknown backend {backend!r}; expected one of {BACKENDS}")


class Solver:
    """Kick-drift-kick integrator around the right-hand sides above.

    The solver owns a mutable copy of the particle state; ``state`` always
    holds the latest (immutable) snapshot.
    """

    def __init__(
        self,
        state: ParticleState,
        domain: Domain,
        kernel: KernelSpec,
        params: SolverParams,
        force_field: Optional[ForceField] = None,
        prescribed_velocity: Optional[np.ndarray] = None,
        fixed_dt: Optional[float] = None,
        skin: Optional[float] = None,
        diagnostics: Optional[DiagnosticsWriter] = None,
        backend: Optional[str] = None,
    ):
        self.domain = domain
        self.kernel = kernel
        self.params = params
        self.force_field = force_field
        self.fixed_dt = fixed_dt
        self.diagnostics = diagnostics
        self.t = 0.0
        self.step_count = 0
        n, dim = state.positions.shape
        self.prescribed_velocity = (
            np.zeros((n, dim)) if prescribed_velocity is None else np.asarray(prescribed_velocity, float)
        )
        skin = 0.5 * kernel.h if skin is None else skin
        self.ops = make_ops(backend, domain, kernel, state.types == FLUID, skin)
        self.state = state
        self._refresh(initial=True)

    # -- helpers -------------------------------------------------------------
    def _force(self, positions, t):
        if self.force_field is None:
            return None
        return self.force_field(positions, t)

    def _refresh(self, initial: bool = False, velocities_for_density=None, dt: float = 0.0):
        """Recompute edges, density, pressure, wall BC and accelerations."""
        s = self.state
        ops = self.ops
        self.edges = ops.edges(s.positions)
        if self.params.density_mode == "summation":
            rho = ops.density_summation(s, self.edges)
            rho = np.where(s.fluid_mask, rho, s.densities)
        elif initial or dt == 0:
            rho = s.densities
        else:
            rho = _evolve_density(s, ops.density_rate(s, self.edges, velocities_for_density), dt)
        p = np.where(s.fluid_mask, eos_pressure(rho, self.params), s.pressures)
        s = s.replace(densities=rho, pressures=p)
        force = self._force(s.positions, self.t)
        if s.wall_mask.any():
            hydro = None
            if self.params.wall_hydrostatic and force is not None:
                hydro = np.broadcast_to(np.asarray(force, dtype=np.float64), s.positions.shape)
            sums = ops.wall_sums(s, self.edges, hydro)
            s = _apply_wall_bc(s, sums, self.params, self.kernel, self.prescribed_velocity)
        self.state = s
        transport = getattr(self, "_transport", None) if not initial else None
        self.accelerations = ops.momentum(s, self.edges, self.params, force, transport)
        if self.params.use_transport_velocity:
            self.background = ops.background(s, self.edges, self.params.background_pressure)
        else:
            self.background = None

    def compute_dt(self) -> float:
        return cfl_dt(self.state, self.kernel, self.params, self.accelerations, self.fixed_dt)

    def _check(self):
        s = self.state
        fl = s.fluid_mask
        speed2 = np.sum(s.velocities[fl] ** 2, axis=1)
        if not (np.all(np.isfinite(s.positions)) and np.all(np.isfinite(speed2))):
            raise SolverInstabilityError("NaN in particle state", self.step_count)
        if np.any(s.densities[fl] <= 0):
            raise SolverInstabilityError("non-positive density", self.step_count)
        if speed2.size and speed2.max() > (10.0 * self.params.c0) ** 2:
            raise SolverInstabilityError("velocity exceeds 10 c0", self.step_count)

    # -- public API ----------------------------------------------------------
    def step(self, dt: Optional[float] = None) -> ParticleState:
        """Advance by one kick-drift-kick step and return the new state."""
        if dt is None:
            dt = self.compute_dt()
        if dt == 0:
            return self.state
        s = self.state
        fluid = s.fluid_mask[:, None]
        v_half = s.velocities + np.where(fluid, 0.5 * dt * self.accelerations, 0.0)
        if self.background is not None:
            v_adv = v_half + 0.5 * dt * self.background
            self._transport = v_adv
        else:
            v_adv = v_half
            self._transport = None
        x = s.positions + np.where(fluid, dt * v_adv, 0.0)
        x = wrap_positions(self.domain, x)
        # walls keep their BC velocities until the refresh overwrites them
        self.state = s.replace(positions=x, velocities=v_half)
        self.t += dt
        self.step_count += 1
        v_cont = np.where(fluid, v_half, self.prescribed_velocity)
        try:
            self._refresh(velocities_for_density=v_cont, dt=dt)
        except SolverInstabilityError as exc:
            raise SolverInstabilityError(str(exc), self.step_count) from exc
        s = self.state
        v = s.velocities + np.where(fluid, 0.5 * dt * self.accelerations, 0.0)
        self.state = s.replace(velocities=v)
        self._check()
        if self.diagnostics is not None:
            self.diagnostics.write(self, dt)
        return self.state

    def run(self, n_steps: int, dt: Optional[float] = None) -> ParticleState:
        for _ in range(n_steps):
            self.step(dt)
        return self.state


# pseudo-time step of the relaxation in units of h/c0; 1.0 overshoots
RELAX_CFL = 0.5


def relax(
    state: ParticleState,
    domain: Domain,
    kernel: KernelSpec,
    params: SolverParams,
    n_steps: int = 1000,
    dt: Optional[float] = None,
    max_shift: float = 0.1,
    movable=None,
    bounds=None,
    backend: Optional[str] = None,
) -> ParticleState:
    """Pack randomly placed particles into a near-uniform arrangement.

    Each step evaluates the pressure force with a strictly positive
    background pressure ``c0^2 rho0`` (pure repulsion that drives the
    particles toward uniform spacing), moves the particles by ``dt^2 a`` (``dt = RELAX_CFL h / c0`` by default)
    capped at ``max_shift * h``, and discards the velocity. Walls stay put.
    ``movable`` restricts which particles may move (defaults to fluid).

    Without inertia the pseudo-dynamics can slowly squeeze particles between
    wall particles, so walled setups pass ``bounds = (lo, hi)``: moved
    particles are clamped a quarter smoothing length inside that box.
    """
    relax_params = SolverParams(
        c0=params.c0,
        rho0=params.rho0,
        p_bg=params.c0**2 * params.rho0,
        viscosity=0.0,
        cfl_number=params.cfl_number,
        density_mode="summation",
        transport_velocity=False,
    )
    if dt is None:
        dt = RELAX_CFL * kernel.h / params.c0
    movable = state.fluid_mask if movable is None else np.asarray(movable, bool)
    fluid = state.fluid_mask
    ops = make_ops(backend, domain, kernel, fluid, 0.5 * kernel.h)
    cap = max_shift * kernel.h
    if bounds is not None:
        margin = 0.25 * kernel.h
        lo = np.asarray(bounds[0], dtype=np.float64) + margin
        hi = np.asarray(bounds[1], dtype=np.float64) - margin
    s = state.replace(velocities=np.zeros_like(state.velocities))
    for _ in range(n_steps):
        edges = ops.edges(s.positions)
        rho = ops.density_summation(s, edges)
        rho = np.where(fluid, rho, s.densities)
        p = np.where(fluid, eos_pressure(rho, relax_params), s.pressures)
        s = s.replace(densities=rho, pressures=p)
        if s.wall_mask.any():
            s = _apply_wall_bc(s, ops.wall_sums(s, edges, None), relax_params, kernel)
        acc = ops.momentum(s, edges, relax_params, None, None)
        shift = dt * dt * acc
        norm = np.sqrt(np.sum(shift * shift, axis=1))
        scale = np.where(norm > cap, cap / np.where(norm > 0, norm, 1.0), 1.0)
        shift = np.where(movable[:, None], shift * scale[:, None], 0.0)
        x = s.positions + shift
        if bounds is not None:
            x = np.where(movable[:, None], np.clip(x, lo, hi), x)
        s = s.replace(
            positions=wrap_positions(domain, x),
            velocities=np.zeros_like(s.velocities),
        )
    edges = ops.edges(s.positions)
    rho = ops.density_summation(s, edges)
    rho = np.where(fluid, rho, state.densities)
    return s.replace(
        densities=rho,
        pressures=np.where(fluid, eos_pressure(rho, params), state.pressures),
        velocities=state.velocities.copy(),
    )
