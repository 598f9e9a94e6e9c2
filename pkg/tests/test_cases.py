import dataclasses
import json
import math

import numpy as np
import pytest

from sphbench import cases
from sphbench.core import FLUID, MOVING_WALL, ContractError
from sphbench.neighbors import neighbor_search
from sphbench.sph import density_rate, density_summation

STRIPPED = {"tgv2d": 2500, "rpf2d": 3200, "ldc2d": 2708, "dam2d": 5740,
            "tgv3d": 8000, "rpf3d": 8000, "ldc3d": 8160}


@pytest.mark.parametrize("case", list(STRIPPED))
def test_stripped_counts_match_catalog(case):
    state, spec = cases.init_case(case, 0, layout="lattice")
    stripped = cases.strip_wall_layers(state)
    assert stripped.n == STRIPPED[case] == spec.num_particles
    assert np.array_equal(np.unique(stripped.types), np.unique(state.types))
    if state.wall_mask.any():
        assert set(np.unique(state.layers[state.wall_mask])) == {0, 1, 2}
        assert np.all(stripped.layers[stripped.wall_mask] == 0)
        # fluid rows are untouched and come first in both states
        nf = int(state.fluid_mask.sum())
        np.testing.assert_array_equal(stripped.positions[:nf], state.positions[:nf])
    else:
        assert stripped is state


def test_unknown_case():
    with pytest.raises(ContractError):
        cases.init_case("rti2d", 0)
    with pytest.raises(ContractError):
        cases.get_case("nope")


def test_tgv_velocity_examples():
    v = cases.tgv_velocity(np.array([[0.0, 0.25]]), 2 * math.pi)
    np.testing.assert_allclose(v, [[-1.0, 0.0]], atol=1e-15)
    state, _ = cases.init_case("tgv3d", 0, layout="lattice")
    assert np.all(state.velocities[:, 2] == 0)


@pytest.mark.parametrize("case,n", [("tgv2d", 50), ("tgv3d", 20)])
def test_tgv_initial_field_discretely_divergence_free(case, n):
    state, spec = cases.init_case(case, 0, layout="lattice")
    k = cases.kernel_for(spec)
    edges = neighbor_search(state.positions, spec.domain, k.support_radius)
    state = state.replace(densities=density_summation(state, edges, k))
    div = density_rate(state, edges, k) / state.densities
    vmax = np.abs(state.velocities).max()
    assert np.abs(div).max() < 0.02 * vmax


def test_stationary_cases_start_at_rest():
    for case in ("rpf2d", "ldc2d", "rpf3d", "ldc3d"):
        state, _ = cases.init_case(case, 0)
        assert np.all(state.velocities == 0)


def test_external_force_examples():
    np.testing.assert_array_equal(cases.external_force("rpf2d", [[0.3, 0.5]]), [[1.0, 0.0]])
    np.testing.assert_array_equal(cases.external_force("rpf2d", [[0.3, 1.5]]), [[-1.0, 0.0]])
    np.testing.assert_array_equal(cases.external_force("rpf3d", [[0.3, 1.5, 0.2]]),
                                  [[-1.0, 0.0, 0.0]])
    np.testing.assert_array_equal(cases.external_force("tgv2d", [[0.1, 0.9]]), [[0.0, 0.0]])
    np.testing.assert_array_equal(cases.external_force("dam2d", [[3.0, 0.5]]), [[0.0, -1.0]])
    np.testing.assert_array_equal(cases.external_force("ldc2d", [[0.5, 0.5]]), [[0.0, 0.0]])


def test_rpf_force_has_no_net_momentum_input():
    state, spec = cases.init_case("rpf2d", 0)
    f = cases.external_force(spec, state.positions)
    assert np.sum(state.masses * f[:, 0]) == pytest.approx(0.0, abs=1e-12)


def test_dam_column_and_tank():
    state, spec = cases.init_case("dam2d", 0, relax_steps=5)
    assert spec.domain.extents == (5.486, 2.12)
    fl = state.positions[state.fluid_mask]
    wall_dx = cases.N_WALL_LAYERS * spec.dx
    assert fl.min() >= wall_dx and fl[:, 0].max() <= wall_dx + 2.0
    assert fl[:, 1].max() <= wall_dx + 1.0
    assert np.all(state.velocities[state.fluid_mask] == 0)


def test_ldc_lid_is_the_only_moving_wall():
    state, spec = cases.init_case("ldc2d", 0)
    lid = state.types == MOVING_WALL
    assert lid.any()
    v = cases.prescribed_velocity(spec, state)
    np.testing.assert_array_equal(v[lid], [[spec.lid_velocity, 0.0]] * lid.sum())
    assert np.all(v[~lid] == 0)
    assert state.positions[lid, 1].min() > state.positions[state.fluid_mask, 1].max()


@pytest.mark.slow
def test_ldc_without_lid_stays_quiescent():
    spec = cases.get_case("ldc2d")
    still = dataclasses.replace(spec, lid_velocity=0.0)
    state, _ = cases.init_case(still, 0)
    solver = cases.make_solver(still, state)
    energies = []
    for _ in range(100):
        solver.run(still.frames_between_samples)
        energies.append(cases._fluid_energy(solver))
    assert max(energies) < 1e-10


def test_catalog_json_round_trip():
    data = json.loads(cases.catalog_json())
    assert set(data) == set(STRIPPED)
    assert data["dam2d"]["c0"] == 14.14
    assert data["tgv2d"]["dt_solver"] * data["tgv2d"]["frames_between_samples"] == pytest.approx(0.04)
    assert data["ldc3d"]["domain"]["periodic"] == [False, False, True]


def test_trajectory_shape_and_determinism():
    a = cases.generate_trajectory("tgv2d", seed=3, frames=3, relax_steps=20)
    b = cases.generate_trajectory("tgv2d", seed=3, frames=3, relax_steps=20)
    assert a.positions.shape == (3, 2500, 2)
    assert a.positions.dtype == np.float32
    assert a.equal(b)
    one = cases.generate_trajectory("tgv2d", seed=3, frames=1, relax_steps=20)
    np.testing.assert_array_equal(one.positions[0], a.positions[0])
    assert np.all(a.types == FLUID)
    with pytest.raises(ContractError):
        cases.generate_trajectory("tgv2d", frames=0)


def test_walled_trajectory_keeps_innermost_layer():
    traj = cases.generate_trajectory("ldc2d", frames=2, warmup=False)
    assert traj.positions.shape == (2, 2708, 2)
    walls = traj.types != FLUID
    np.testing.assert_array_equal(traj.positions[0, walls], traj.positions[1, walls])
