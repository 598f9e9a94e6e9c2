import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sphbench import cases
from sphbench.core import FLUID, WALL, Domain, make_state
from sphbench.kernel import KernelSpec, kernel_value
from sphbench.neighbors import neighbor_search
from sphbench.sph import (
    Solver,
    SolverInstabilityError,
    SolverParams,
    cfl_dt,
    density_evolution_step,
    density_rate,
    density_summation,
    enforce_wall_bc,
    eos_pressure,
    kinetic_energy,
    make_ops,
    momentum_rhs,
    relax,
)


def periodic_lattice(n_side, dim=2, jitter=0.0, seed=0, speed=0.0):
    dx = 1.0 / n_side
    dom = Domain((1.0,) * dim, (True,) * dim)
    x = cases.lattice([n_side] * dim, dx)
    rng = np.random.default_rng(seed)
    x = np.mod(x + rng.uniform(-jitter, jitter, x.shape) * dx, 1.0)
    v = rng.normal(0, speed, x.shape)
    return make_state(x, v, dx=dx), dom, KernelSpec.from_dx(dx, dim)


def prepared(state, dom, kernel, params):
    edges = neighbor_search(state.positions, dom, kernel.support_radius)
    rho = density_summation(state, edges, kernel)
    return state.replace(densities=rho, pressures=eos_pressure(rho, params)), edges


def test_eos_examples():
    p = SolverParams(c0=10.0)
    assert eos_pressure(1.02, p) == pytest.approx(2.0)
    assert eos_pressure(1.0, SolverParams(c0=10.0, p_bg=3.5)) == 3.5
    dam = cases.get_case("dam2d")
    assert dam.c0 == pytest.approx(14.14)


def test_params_invariants():
    for bad in (dict(cfl_number=0.0), dict(cfl_number=1.0), dict(artificial_alpha=-0.1),
                dict(density_mode="bogus")):
        with pytest.raises(ValueError):
            SolverParams(c0=10.0, **bad)
    assert not SolverParams(c0=1.0).use_transport_velocity
    assert SolverParams(c0=1.0, p_bg=2.0).use_transport_velocity
    tp = SolverParams(c0=1.0, transport_pressure=5.0)
    assert tp.use_transport_velocity and tp.background_pressure == 5.0


def test_density_summation_single_particle_and_lattice():
    k = KernelSpec(0.1, 2)
    dom = Domain((1.0, 1.0), (True, True))
    s = make_state(np.array([[0.5, 0.5]]), mass=0.3)
    rho = density_summation(s, neighbor_search(s.positions, dom, k.support_radius), k)
    assert rho[0] == pytest.approx(0.3 * kernel_value(0.0, k))
    for dim, n in ((2, 20), (3, 10)):
        s, dom, k = periodic_lattice(n, dim)
        rho = density_summation(s, neighbor_search(s.positions, dom, k.support_radius), k)
        np.testing.assert_allclose(rho, 1.0, atol=0.02)


def test_density_summation_equivariant_under_permutation():
    s, dom, k = periodic_lattice(16, jitter=0.3, seed=4)
    perm = np.random.default_rng(0).permutation(s.n)
    sp = s.replace(positions=s.positions[perm])
    a = density_summation(s, neighbor_search(s.positions, dom, k.support_radius), k)
    b = density_summation(sp, neighbor_search(sp.positions, dom, k.support_radius), k)
    np.testing.assert_allclose(b, a[perm], rtol=1e-13)


def test_density_evolution_examples():
    s, dom, k = periodic_lattice(16, jitter=0.2, seed=1)
    edges = neighbor_search(s.positions, dom, k.support_radius)
    rigid = s.replace(velocities=np.tile([0.3, -0.2], (s.n, 1)))
    np.testing.assert_allclose(density_rate(rigid, edges, k), 0.0, atol=1e-12)
    np.testing.assert_array_equal(density_evolution_step(rigid, edges, k, 0.0), s.densities)


def test_density_rate_of_uniform_expansion():
    # v = x has divergence dim; only interior particles see a smooth field
    dx = 0.05
    x = cases.lattice([20, 20], dx)
    s = make_state(x, x.copy(), dx=dx)
    dom = Domain((1.0, 1.0), (False, False))
    k = KernelSpec.from_dx(dx, 2)
    edges = neighbor_search(x, dom, k.support_radius)
    s = s.replace(densities=density_summation(s, edges, k))
    rate = density_rate(s, edges, k)
    inner = np.all((x > 4 * dx) & (x < 1 - 4 * dx), axis=1)
    expected = -s.densities[inner] * 2
    np.testing.assert_allclose(rate[inner], expected, rtol=0.05)


def test_non_positive_density_raises():
    s, dom, k = periodic_lattice(10)
    edges = neighbor_search(s.positions, dom, k.support_radius)
    s = s.replace(velocities=s.positions.copy())
    with pytest.raises(SolverInstabilityError):
        density_evolution_step(s, edges, k, -1e6)


def test_equilibrium_and_uniform_force():
    params = SolverParams(c0=10.0, viscosity=0.01)
    s, dom, k = periodic_lattice(20)
    edges = neighbor_search(s.positions, dom, k.support_radius)
    s = s.replace(pressures=np.full(s.n, 0.7))
    np.testing.assert_allclose(momentum_rhs(s, edges, k, params), 0.0, atol=1e-12)
    acc = momentum_rhs(s, edges, k, params, external_force=[1.0, 0.0])
    np.testing.assert_allclose(acc[:, 0], 1.0 / s.densities, atol=1e-12)
    np.testing.assert_allclose(acc[:, 1], 0.0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 2**31 - 1),
    dim=st.sampled_from([2, 3]),
    alpha=st.sampled_from([0.0, 0.1]),
    p_bg=st.sampled_from([0.0, 5.0]),
)
def test_internal_forces_cancel(seed, dim, alpha, p_bg):
    params = SolverParams(c0=10.0, viscosity=0.02, artificial_alpha=alpha, p_bg=p_bg)
    s, dom, k = periodic_lattice(10, dim, jitter=0.3, seed=seed, speed=1.0)
    s, edges = prepared(s, dom, k, params)
    rng = np.random.default_rng(seed)
    force = rng.normal(size=(s.n, dim))
    transport = s.velocities + rng.normal(0, 0.1, s.velocities.shape) if p_bg else None
    acc = momentum_rhs(s, edges, k, params, force, transport)
    total = np.sum(s.masses[:, None] * acc, axis=0)
    expected = np.sum(s.masses[:, None] * force / s.densities[:, None], axis=0)
    np.testing.assert_allclose(total, expected, atol=1e-10 * np.abs(force).sum())
    # Galilean invariance without the velocity-dependent extra stress
    if transport is None:
        moved = s.replace(velocities=s.velocities + 0.37)
        np.testing.assert_allclose(momentum_rhs(moved, edges, k, params, force), acc,
                                   atol=1e-12 * np.abs(acc).max())


def walled_channel(fluid_u=(0.0, 0.0), n=12):
    """Fluid block above three wall layers in a box periodic along x."""
    dx = 1.0 / n
    xs = (np.arange(n) + 0.5) * dx
    fluid = np.stack(np.meshgrid(xs, 3 * dx + xs[:6], indexing="ij"), -1).reshape(-1, 2)
    walls = np.stack(np.meshgrid(xs, xs[:3], indexing="ij"), -1).reshape(-1, 2)
    x = np.vstack([fluid, walls])
    types = np.r_[np.full(len(fluid), FLUID), np.full(len(walls), WALL)]
    v = np.where(types[:, None] == FLUID, fluid_u, 0.0)
    dom = Domain((1.0, 9 * dx + 1.0), (True, False))
    return make_state(x, v, dx=dx, types=types), dom, KernelSpec.from_dx(dx, 2)


def test_wall_mirrors_tangential_velocity():
    s, dom, k = walled_channel((0.4, 0.0))
    params = SolverParams(c0=10.0)
    s, edges = prepared(s, dom, k, params)
    out = enforce_wall_bc(s, edges, k, params)
    top = s.wall_mask & (s.positions[:, 1] > 2 * k.h)
    np.testing.assert_allclose(out.velocities[top], [[-0.4, 0.0]] * top.sum(), atol=1e-12)
    np.testing.assert_array_equal(out.positions, s.positions)


def test_moving_lid_with_matching_fluid():
    s, dom, k = walled_channel((1.0, 0.0))
    params = SolverParams(c0=10.0)
    s, edges = prepared(s, dom, k, params)
    lid = np.where(s.wall_mask[:, None], [1.0, 0.0], 0.0)
    out = enforce_wall_bc(s, edges, k, params, prescribed_velocity=lid)
    top = s.wall_mask & (s.positions[:, 1] > 2 * k.h)
    np.testing.assert_allclose(out.velocities[top, 0], 1.0, atol=1e-12)


def test_dry_wall_keeps_prescribed_state():
    x = np.array([[0.1, 0.1], [0.9, 0.9]])
    s = make_state(x, dx=0.05, types=[FLUID, WALL])
    dom = Domain((1.0, 1.0), (False, False))
    k = KernelSpec.from_dx(0.05, 2)
    params = SolverParams(c0=10.0, p_bg=2.0)
    edges = neighbor_search(x, dom, k.support_radius)
    lid = np.array([[0.0, 0.0], [0.5, 0.0]])
    out = enforce_wall_bc(s.replace(pressures=np.array([9.0, 9.0])), edges, k, params, lid)
    np.testing.assert_array_equal(out.velocities[1], [0.5, 0.0])
    assert out.pressures[1] == 2.0


def test_hydrostatic_wall_pressure_matches_fluid():
    # fluid pressure p = rho g (H - y); walls extrapolate with the gravity term
    s, dom, k = walled_channel()
    g = 1.0
    top = s.positions[s.fluid_mask, 1].max() + 0.5 * k.h
    p = np.where(s.fluid_mask, g * (top - s.positions[:, 1]), 0.0)
    params = SolverParams(c0=10.0, wall_hydrostatic=True)
    edges = neighbor_search(s.positions, dom, k.support_radius)
    s = s.replace(pressures=p)
    out = enforce_wall_bc(s, edges, k, params, force=[0.0, -g])
    # the outermost layer lies exactly one support radius from the fluid
    w = s.wall_mask & (s.positions[:, 1] > k.h)
    exact = g * (top - s.positions[w, 1])
    np.testing.assert_allclose(out.pressures[w], exact, rtol=0.05)


def test_cfl_examples():
    s, dom, k = periodic_lattice(10)
    p = SolverParams(c0=10.0, cfl_number=0.25)
    assert cfl_dt(s, k, p) == pytest.approx(0.25 * k.h / 10.0)
    assert cfl_dt(s, k, p, fixed_dt=4e-4) == 4e-4
    assert cases.get_case("tgv2d").dt_solver == pytest.approx(4e-4)
    with pytest.raises(SolverInstabilityError):
        cfl_dt(s, k, p, fixed_dt=0.0)


@settings(max_examples=50, deadline=None)
@given(speed=st.floats(0.0, 20.0), nu=st.floats(0.0, 1.0), amax=st.floats(0.0, 1e4))
def test_cfl_picks_smallest_bound(speed, nu, amax):
    s, dom, k = periodic_lattice(10)
    s = s.replace(velocities=np.tile([speed, 0.0], (s.n, 1)))
    acc = np.tile([0.0, amax], (s.n, 1))
    p = SolverParams(c0=10.0, viscosity=nu)
    bounds = [k.h / (10.0 + speed)]
    if nu > 0:
        bounds.append(k.h**2 / nu)
    if amax > 0:
        bounds.append(np.sqrt(k.h / amax))
    assert cfl_dt(s, k, p, acc) == pytest.approx(0.25 * min(bounds), rel=1e-12)


def test_uniform_flow_is_advected_exactly():
    s, dom, k = periodic_lattice(12)
    s = s.replace(velocities=np.tile([0.3, 0.1], (s.n, 1)))
    sol = Solver(s, dom, k, SolverParams(c0=10.0, viscosity=0.01))
    assert sol.step(0.0) is sol.state
    dt = 1e-3
    sol.run(20, dt)
    expect = np.mod(s.positions + 20 * dt * np.array([0.3, 0.1]), 1.0)
    d = np.abs(sol.state.positions - expect)
    np.testing.assert_allclose(np.minimum(d, 1 - d), 0.0, atol=1e-12)
    np.testing.assert_allclose(sol.state.velocities, s.velocities, atol=1e-12)


def test_kick_drift_kick_under_constant_acceleration():
    # an isolated particle under a constant force follows the parabola exactly
    dom = Domain((10.0, 10.0), (False, False))
    k = KernelSpec(0.1, 2)
    s = make_state(np.array([[5.0, 5.0]]), np.array([[1.0, 0.0]]), mass=1.0)
    rho = kernel_value(0.0, k)
    sol = Solver(s, dom, k, SolverParams(c0=10.0, rho0=float(rho)),
                 force_field=lambda x, t: np.tile([0.0, -rho], (len(x), 1)))
    dt = 0.01
    sol.run(50, dt)
    t = 50 * dt
    np.testing.assert_allclose(sol.state.positions[0], [5.0 + t, 5.0 - 0.5 * t * t], atol=1e-12)
    np.testing.assert_allclose(sol.state.velocities[0], [1.0, -t], atol=1e-12)


@pytest.mark.parametrize("dim,steps", [(2, 100), (3, 20)])
def test_momentum_conserved_in_periodic_box(dim, steps):
    s, dom, k = periodic_lattice(12 if dim == 2 else 10, dim, jitter=0.2, seed=2, speed=0.5)
    sol = Solver(s, dom, k, SolverParams(c0=10.0, viscosity=0.01))
    p0 = np.sum(s.masses[:, None] * s.velocities, axis=0)
    sol.run(steps)
    p1 = np.sum(sol.state.masses[:, None] * sol.state.velocities, axis=0)
    scale = np.sum(s.masses * np.linalg.norm(s.velocities, axis=1))
    assert np.max(np.abs(p1 - p0)) <= 1e-10 * scale


def test_instability_reports_step():
    s, dom, k = periodic_lattice(10)
    s = s.replace(velocities=np.tile([200.0, 0.0], (s.n, 1)))
    sol = Solver(s, dom, k, SolverParams(c0=10.0))
    with pytest.raises(SolverInstabilityError) as info:
        sol.step(1e-5)
    assert info.value.step == 1


def test_evolution_mode_keeps_density_near_reference():
    s, dom, k = periodic_lattice(12, jitter=0.0, seed=3, speed=0.3)
    sol = Solver(s, dom, k, SolverParams(c0=10.0, viscosity=0.01, density_mode="evolution"))
    sol.run(50)
    rho = sol.state.densities
    assert np.all(np.abs(rho - 1.0) < 0.1)
    assert sol.state.masses.sum() == pytest.approx(s.masses.sum())


def test_relax_on_lattice_and_random():
    s, dom, k = periodic_lattice(20)
    params = SolverParams(c0=10.0)
    e0 = np.abs(density_summation(s, neighbor_search(s.positions, dom, k.support_radius), k) - 1).max()
    out = relax(s, dom, k, params, n_steps=20)
    assert np.abs(out.densities - 1).max() <= e0 + 1e-12

    rng = np.random.default_rng(0)
    rand = s.replace(positions=rng.uniform(0, 1, s.positions.shape))
    a = relax(rand, dom, k, params, n_steps=300)
    b = relax(rand, dom, k, params, n_steps=300)
    np.testing.assert_array_equal(a.positions, b.positions)
    assert np.abs(a.densities - 1).max() < 0.05


def test_relax_with_bounds_stays_inside():
    rng = np.random.default_rng(1)
    dom = Domain((1.0, 1.0), (False, False))
    dx = 0.05
    s = make_state(rng.uniform(0.2, 0.8, (100, 2)), dx=dx)
    k = KernelSpec.from_dx(dx, 2)
    out = relax(s, dom, k, SolverParams(c0=10.0), n_steps=50, bounds=((0.2, 0.2), (0.8, 0.8)))
    assert np.all(out.positions >= 0.2 + 0.25 * dx - 1e-15)
    assert np.all(out.positions <= 0.8 - 0.25 * dx + 1e-15)


def test_unknown_backend():
    s, dom, k = periodic_lattice(10)
    with pytest.raises(ValueError):
        make_ops("fortran", dom, k, s.fluid_mask, 0.0)


@pytest.mark.parametrize("transport", [False, True])
def test_backends_agree_on_pair_sums(transport):
    s, dom, k = walled_channel((0.3, 0.0))
    rng = np.random.default_rng(8)
    fl = s.fluid_mask[:, None]
    s = s.replace(
        positions=s.positions + np.where(fl, rng.uniform(-0.2, 0.2, s.positions.shape) * k.h, 0),
        velocities=np.where(fl, rng.normal(0, 0.5, s.positions.shape), 0.0),
    )
    params = SolverParams(c0=10.0, viscosity=0.05, artificial_alpha=0.1,
                          p_bg=5.0 if transport else 0.0)
    ref = make_ops("numpy", dom, k, s.fluid_mask, 0.0)
    fast = make_ops("numba", dom, k, s.fluid_mask, 0.0)
    edges = ref.edges(s.positions)
    s = s.replace(densities=ref.density_summation(s, edges))
    s = s.replace(pressures=eos_pressure(s.densities, params))
    np.testing.assert_allclose(fast.density_summation(s, edges), s.densities, rtol=1e-13)
    np.testing.assert_allclose(fast.density_rate(s, edges, None),
                               ref.density_rate(s, edges, None), atol=1e-11)
    g = np.tile([0.0, -1.0], (s.n, 1))
    for a, b in zip(fast.wall_sums(s, edges, g), ref.wall_sums(s, edges, g)):
        np.testing.assert_allclose(a, b, atol=1e-11)
    tv = s.velocities + 0.01 if transport else None
    np.testing.assert_allclose(fast.momentum(s, edges, params, g, tv),
                               ref.momentum(s, edges, params, g, tv), atol=1e-10)
    np.testing.assert_allclose(fast.background(s, edges, 5.0),
                               ref.background(s, edges, 5.0), atol=1e-10)


@pytest.mark.parametrize("case", ["tgv2d", "dam2d", "ldc2d"])
def test_backends_agree_on_short_runs(case):
    spec = cases.get_case(case)
    st0, _ = cases.init_case(spec, 0, relax_steps=10)
    out = {}
    for b in ("numpy", "numba"):
        sol = cases.make_solver(spec, st0, backend=b)
        sol.run(10)
        out[b] = sol.state
    a, c = out["numpy"], out["numba"]
    np.testing.assert_allclose(c.positions, a.positions, atol=1e-12)
    np.testing.assert_allclose(c.velocities, a.velocities, atol=1e-10)
    np.testing.assert_allclose(c.densities, a.densities, atol=1e-12)


def test_kinetic_energy_counts_fluid_only():
    s = make_state(np.zeros((2, 2)), np.array([[1.0, 0.0], [3.0, 0.0]]), mass=2.0,
                   types=[FLUID, WALL])
    assert kinetic_energy(s) == pytest.approx(1.0)
