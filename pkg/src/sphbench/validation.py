"""Physical validation runs for the solver.

* ``poiseuille``: body-force-driven channel flow started from rest, compared
  with the transient series solution.
* ``tgv2d``: the full-size 2D Taylor-Green case against exponential decay of
  kinetic energy, ``E(t) = E(0) exp(-4 nu k^2 t)``.
* ``conservation``: momentum conservation, Galilean invariance of the
  accelerations and the lattice density check.

Each run returns a :class:`ValidationResult` and can write CSV curves.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import cases
from .core import FLUID, WALL, Domain, make_state
from .kernel import KernelSpec
from .neighbors import neighbor_search
from .sph import (
    Solver,
    SolverParams,
    density_summation,
    eos_pressure,
    kinetic_energy,
    momentum_rhs,
)

log = logging.getLogger(__name__)

POISEUILLE_CENTERLINE_TOL = 0.05
TGV_RATE_TOL = 0.15
TGV_POINTWISE_TOL = 0.20
TGV_POINTWISE_T_MAX = 1.0
MOMENTUM_TOL = 1e-10
GALILEAN_TOL = 1e-12
LATTICE_DENSITY_TOL = 0.02

POISEUILLE_TIMES = (2.25e-4, 4.5e-4, 1.125e-3, 2.25e-3, 1e-2)


@dataclass
class ValidationResult:
    name: str
    passed: bool
    metrics: dict = field(default_factory=dict)
    files: list = field(default_factory=list)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        parts = ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}"
                          for k, v in self.metrics.items())
        return f"[{status}] {self.name}: {parts}"


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


# -- Poiseuille ------------------------------------------------------------------


def poiseuille_series(y, t, width: float, nu: float, force: float, terms: int = 200):
    """Start-up channel flow between no-slip walls at ``y = 0`` and ``y = width``."""
    y = np.asarray(y, dtype=np.float64)
    u = force / (2.0 * nu) * y * (width - y)
    for n in range(terms):
        k = 2 * n + 1
        u -= (
            4.0 * force * width**2 / (nu * math.pi**3 * k**3)
            * np.sin(k * math.pi * y / width)
            * math.exp(-(k**2) * math.pi**2 * nu * t / width**2)
        )
    return u


def poiseuille_setup(n_width: int = 60, n_length: int = 12, width: float = 1.0):
    """Fluid lattice between two three-layer walls; x is periodic."""
    dx = width / n_width
    wall = cases.N_WALL_LAYERS * dx
    length = n_length * dx
    domain = Domain((length, width + 2 * wall), (True, False))
    fluid = cases.lattice([n_length, n_width], dx, origin=[0.0, wall])
    below = cases.lattice([n_length, cases.N_WALL_LAYERS], dx, origin=[0.0, 0.0])
    above = cases.lattice([n_length, cases.N_WALL_LAYERS], dx, origin=[0.0, wall + width])
    layers_below = (cases.N_WALL_LAYERS - 1) - np.floor(below[:, 1] / dx).astype(int)
    layers_above = np.floor((above[:, 1] - wall - width) / dx).astype(int)
    pos = np.concatenate([fluid, below, above])
    types = np.concatenate(
        [np.full(len(fluid), FLUID), np.full(len(below) + len(above), WALL)]
    )
    layers = np.concatenate([np.zeros(len(fluid), int), layers_below, layers_above])
    state = make_state(pos, dx=dx, types=types, layers=layers)
    return state, domain, dx, wall


def run_poiseuille(
    out_dir: Optional[str] = None,
    n_width: int = 60,
    nu: float = 100.0,
    force: float = 2000.0,
    times=POISEUILLE_TIMES,
    tol: float = POISEUILLE_CENTERLINE_TOL,
) -> ValidationResult:
    """Compare SPH velocity profiles with the series at several times.

    Defaults give ``u_max = F L^2 / (8 nu) = 2.5`` and a Reynolds number
    ``u_max (L/2) / nu = 0.0125``. The pass criterion is the centerline
    error at the last (steady) time.
    """
    width = 1.0
    state, domain, dx, wall = poiseuille_setup(n_width, width=width)
    u_max = force * width**2 / (8.0 * nu)
    kernel = KernelSpec.from_dx(dx, 2)
    params = SolverParams(c0=10.0 * u_max, viscosity=nu)
    dt = 0.25 * 0.95 * kernel.h**2 / nu
    body = np.array([force, 0.0])
    solver = Solver(
        state, domain, kernel, params, force_field=lambda x, t: np.broadcast_to(body, x.shape), fixed_dt=dt
    )
    fluid = state.fluid_mask
    y = state.positions[fluid, 1] - wall
    rows = np.round(y / dx - 0.5).astype(int)
    y_rows = (np.arange(n_width) + 0.5) * dx
    centre = np.argsort(np.abs(y_rows - 0.5 * width))[:2]

    profile_rows, per_time = [], {}
    step = 0
    for t_target in sorted(times):
        n_target = int(round(t_target / dt))
        solver.run(n_target - step)
        step = n_target
        t = step * dt
        u = solver.state.velocities[fluid, 0]
        u_row = np.bincount(rows, weights=u, minlength=n_width) / np.bincount(rows, minlength=n_width)
        u_ref = poiseuille_series(y_rows, t, width, nu, force)
        centre_err = abs(u_row[centre].mean() - u_ref[centre].mean()) / abs(u_ref[centre].mean())
        per_time[t_target] = {
            "t": t,
            "centerline_rel_error": float(centre_err),
            "max_abs_error_over_umax": float(np.max(np.abs(u_row - u_ref)) / u_max),
        }
        profile_rows += [[f"{t:.6e}", f"{yy:.6f}", f"{a:.8e}", f"{b:.8e}"]
                         for yy, a, b in zip(y_rows, u_row, u_ref)]

    steady = per_time[max(times)]
    metrics = {
        "reynolds": u_max * 0.5 * width / nu,
        "particles_across": n_width,
        "steady_centerline_rel_error": steady["centerline_rel_error"],
        "steady_max_error_over_umax": steady["max_abs_error_over_umax"],
    }
    for t_target, m in sorted(per_time.items()):
        metrics[f"centerline_rel_error_t{t_target:g}"] = m["centerline_rel_error"]
    files = []
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "poiseuille.csv")
        _write_csv(path, ["t", "y", "u_sph", "u_series"], profile_rows)
        files.append(path)
    return ValidationResult(
        "poiseuille", steady["centerline_rel_error"] <= tol, metrics, files
    )


# -- Taylor-Green decay ------------------------------------------------------------


def run_tgv_decay(
    out_dir: Optional[str] = None,
    seed: int = 0,
    frames: Optional[int] = None,
    layout: Optional[str] = None,
    relax_steps: int = cases.RELAX_STEPS,
    rate_tol: float = TGV_RATE_TOL,
    pointwise_tol: float = TGV_POINTWISE_TOL,
    t_max: float = TGV_POINTWISE_T_MAX,
) -> ValidationResult:
    """Full-size 2D Taylor-Green run against analytic energy decay."""
    spec = cases.get_case("tgv2d")
    frames = spec.trajectory_length if frames is None else frames
    state, _ = cases.init_case(spec, seed, layout=layout, relax_steps=relax_steps)
    solver = cases.make_solver(spec, state)
    k = spec.extra["k"]
    rate = 4.0 * spec.viscosity * k**2
    t = [0.0]
    e = [kinetic_energy(solver.state)]
    for _ in range(1, frames):
        solver.run(spec.frames_between_samples)
        t.append(solver.t)
        e.append(kinetic_energy(solver.state))
    t, e = np.asarray(t), np.asarray(e)
    e_ref = e[0] * np.exp(-rate * t)
    fitted = -np.polyfit(t, np.log(e), 1)[0]
    early = t <= t_max + 1e-12
    pointwise = float(np.max(np.abs(e[early] - e_ref[early]) / e_ref[early]))
    rate_err = abs(fitted - rate) / rate
    metrics = {
        "analytic_rate": rate,
        "fitted_rate": float(fitted),
        "rate_rel_error": float(rate_err),
        "pointwise_rel_error": pointwise,
        "frames": int(frames),
        "e_kin_initial": float(e[0]),
    }
    files = []
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "tgv2d_energy.csv")
        _write_csv(path, ["t", "E_kin_sph", "E_kin_analytic"],
                   [[f"{a:.6e}", f"{b:.10e}", f"{c:.10e}"] for a, b, c in zip(t, e, e_ref)])
        files.append(path)
    passed = rate_err <= rate_tol and pointwise <= pointwise_tol
    return ValidationResult("tgv2d", passed, metrics, files)


# -- conservation ------------------------------------------------------------------


def _periodic_system(n_side=16, dim=2, seed=0, jitter=0.1, speed=0.1):
    rng = np.random.default_rng(seed)
    dx = 1.0 / n_side
    domain = Domain((1.0,) * dim, (True,) * dim)
    x = cases.lattice([n_side] * dim, dx) + jitter * dx * rng.uniform(-1, 1, (n_side**dim, dim))
    x = np.mod(x, 1.0)
    v = speed * rng.normal(size=x.shape)
    return make_state(x, v, dx=dx), domain, KernelSpec.from_dx(dx, dim)


def momentum_drift(n_steps: int = 100, seed: int = 0, dim: int = 2) -> float:
    """Relative change of total momentum of a force-free periodic system."""
    state, domain, kernel = _periodic_system(dim=dim, seed=seed)
    params = SolverParams(c0=10.0, viscosity=0.01)
    solver = Solver(state, domain, kernel, params)
    p0 = np.sum(state.masses[:, None] * state.velocities, axis=0)
    scale = float(np.sum(state.masses * np.linalg.norm(state.velocities, axis=1)))
    solver.run(n_steps)
    s = solver.state
    p1 = np.sum(s.masses[:, None] * s.velocities, axis=0)
    return float(np.max(np.abs(p1 - p0)) / scale)


def galilean_error(seed: int = 0, dim: int = 2, shift=None) -> float:
    """Max change of accelerations after adding a uniform velocity, relative."""
    state, domain, kernel = _periodic_system(dim=dim, seed=seed)
    params = SolverParams(c0=10.0, viscosity=0.01)
    edges = neighbor_search(state.positions, domain, kernel.support_radius)
    rho = density_summation(state, edges, kernel)
    state = state.replace(densities=rho, pressures=eos_pressure(rho, params))
    a0 = momentum_rhs(state, edges, kernel, params)
    u = np.full(dim, 0.37) if shift is None else np.asarray(shift, float)
    a1 = momentum_rhs(state.replace(velocities=state.velocities + u), edges, kernel, params)
    return float(np.max(np.abs(a1 - a0)) / np.max(np.abs(a0)))


def lattice_density_error(dim: int = 2, n_side: int = 20) -> float:
    dx = 1.0 / n_side
    domain = Domain((1.0,) * dim, (True,) * dim)
    state = make_state(cases.lattice([n_side] * dim, dx), dx=dx)
    kernel = KernelSpec.from_dx(dx, dim)
    edges = neighbor_search(state.positions, domain, kernel.support_radius)
    return float(np.max(np.abs(density_summation(state, edges, kernel) - 1.0)))


def run_conservation(out_dir: Optional[str] = None) -> ValidationResult:
    metrics = {
        "momentum_drift_2d": momentum_drift(dim=2),
        "momentum_drift_3d": momentum_drift(dim=3, n_steps=20),
        "galilean_error_2d": galilean_error(dim=2),
        "galilean_error_3d": galilean_error(dim=3),
        "lattice_density_error_2d": lattice_density_error(2),
        "lattice_density_error_3d": lattice_density_error(3, 10),
    }
    passed = (
        max(metrics["momentum_drift_2d"], metrics["momentum_drift_3d"]) <= MOMENTUM_TOL
        and max(metrics["galilean_error_2d"], metrics["galilean_error_3d"]) <= GALILEAN_TOL
        and max(metrics["lattice_density_error_2d"], metrics["lattice_density_error_3d"])
        <= LATTICE_DENSITY_TOL
    )
    files = []
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "conservation.csv")
        _write_csv(path, ["check", "value"], [[k, repr(v)] for k, v in metrics.items()])
        files.append(path)
    return ValidationResult("conservation", passed, metrics, files)


SUITES = {
    "poiseuille": run_poiseuille,
    "tgv2d": run_tgv_decay,
    "conservation": run_conservation,
}


def run_suite(name: str = "all", out_dir: Optional[str] = None) -> list:
    if name == "all":
        names = list(SUITES)
    elif name in SUITES:
        names = [name]
    else:
        raise ValueError(f"unknown validation suite {name!r}; choose from all, {', '.join(SUITES)}")
    results = []
    for n in names:
        res = SUITES[n](out_dir=out_dir)
        log.info(res.summary())
        results.append(res)
    return results
