import pytest
import numpy as np
import sys
import os

# Ensure we can import src
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '../src')))

from nic.errors import CheckpointError, ConfigError, PlantError
from nic.numkit import Rng, rk4_step
from nic.plants import (
    autonomous_plant, cartpole, generate_dataset, load_dataset, make_plant, pendulum_nlink, save_dataset,
    validate_dataset, wheeled_vehicle,
)


@pytest.fixture(params=['pendulum_1link', 'pendulum_2link', 'pendulum_3link', 'cartpole', 'vehicle'])
def plant(request):
    if request.param.startswith('pendulum'):
        return pendulum_nlink(int(request.param[9]))
    return make_plant(request.param)


def test_equilibrium_at_origin(plant):
    np.testing.assert_array_equal(plant.equilibrium, np.zeros(plant.n))
    d = plant.deriv(plant.equilibrium, np.zeros(plant.m))
    np.testing.assert_allclose(d, np.zeros(plant.n), atol=1e-12)


def test_shift_matches_physical_coordinates(plant):
    rng = Rng(0)
    x = rng.uniform(-0.5, 0.5, (5, plant.n))
    u = rng.uniform(-1.0, 1.0, (5, plant.m))
    np.testing.assert_array_equal(plant.deriv(x, u), plant.raw_deriv(x + plant.offset, u))


def test_single_state_keeps_rank(plant):
    assert plant.deriv(np.zeros(plant.n), np.zeros(plant.m)).shape == (plant.n,)
    with pytest.raises(ConfigError):
        plant.deriv(np.zeros(plant.n + 1), np.zeros(plant.m))


def test_single_pendulum_falls_away_from_upright():
    p = pendulum_nlink(1)
    d = p.deriv(np.array([0.1, 0.0]), np.array([0.0]))
    assert d[0] == 0.0
    assert d[1] == pytest.approx(9.81 * np.sin(0.1))
    # full torque beats gravity everywhere
    d = p.deriv(np.array([0.1, 0.0]), np.array([-10.0]))
    assert d[1] < 0


def test_pendulum_input_bound_is_a_ball():
    p = pendulum_nlink(2)
    assert p.input_bound == pytest.approx(10.0 * np.sqrt(2))
    np.testing.assert_allclose(p.component_bound, [10.0, 10.0])
    u = p.saturate(np.array([[30.0, 40.0]]))
    assert np.linalg.norm(u) == pytest.approx(p.input_bound)
    np.testing.assert_array_equal(p.saturate(np.array([[1.0, 2.0]])), [[1.0, 2.0]])


def test_unforced_pendulum_conserves_energy():
    p = pendulum_nlink(2, params={'mass': [1.0, 0.5], 'length': [1.0, 0.7]})
    x = np.array([0.3, -0.2, 0.0, 0.5])
    e0 = p.energy(x)
    u = np.zeros(2)
    for _ in range(400):
        x = rk4_step(lambda s: p.deriv(s, u), x, 0.005)
    assert abs(p.energy(x) - e0) < 1e-5


@pytest.mark.parametrize("links", [1, 2, 3])
def test_pendulum_is_control_affine(links):
    p = pendulum_nlink(links)
    rng = Rng(8)
    x = rng.uniform(-1.0, 1.0, (20, p.n))
    u = rng.uniform(-3.0, 3.0, (20, p.m))
    zero = np.zeros_like(u)
    effect = p.deriv(x, u) - p.deriv(x, zero)
    doubled = p.deriv(x, 2.0 * u) - p.deriv(x, zero)
    np.testing.assert_allclose(doubled, 2.0 * effect, rtol=1e-9, atol=1e-9)
    np.testing.assert_array_equal(effect[:, :links], np.zeros((20, links)))


def test_pendulum_rejects_bad_parameters():
    with pytest.raises(ConfigError):
        pendulum_nlink(4)
    with pytest.raises(PlantError):
        pendulum_nlink(1, params={'mass': -1.0})


def test_cartpole_defaults():
    p = cartpole()
    assert (p.n, p.m) == (4, 1)
    assert p.input_bound == 50.0
    assert p.converge_dims == (1, 3)
    np.testing.assert_array_equal(p.saturate(np.array([[80.0]])), [[50.0]])
    # pole tips further over when released off upright
    assert p.deriv(np.array([0.0, 0.1, 0.0, 0.0]), np.array([0.0]))[3] > 0


def test_cartpole_push_accelerates_the_cart():
    p = cartpole()
    assert p.deriv(np.zeros(4), np.array([5.0]))[2] > 0
    rng = Rng(9)
    x = rng.uniform(-0.8, 0.8, (50, 4))
    u = np.full((50, 1), 5.0)
    effect = p.deriv(x, u) - p.deriv(x, np.zeros_like(u))
    assert np.all(effect[:, 2] > 0)


def test_vehicle_kinematics():
    p = wheeled_vehicle()
    d = p.deriv(np.array([0.5, 0.1]), np.array([0.0]))
    np.testing.assert_allclose(d, [2.0 * np.sin(0.1), 0.0])
    assert p.input_bound == pytest.approx(np.pi / 6)
    # full steering at zero heading error turns at speed / wheelbase * sin(pi / 6)
    d = p.deriv(np.zeros(2), np.array([np.pi / 6]))
    assert d[1] == pytest.approx(1.0)
    assert d[0] == pytest.approx(2.0 * np.sin(np.pi / 6))


def test_autonomous_plant_ignores_input():
    p = autonomous_plant('decay', lambda x: -x, [-1.0, -1.0], [1.0, 1.0])
    np.testing.assert_array_equal(p.deriv(np.array([0.5, -0.5]), np.array([3.0])), [-0.5, 0.5])


def test_unknown_plant_kind():
    with pytest.raises(ConfigError):
        make_plant('quadrotor')


def test_scaled_domain():
    p = pendulum_nlink(1).scaled(1.5)
    np.testing.assert_allclose(p.state_hi, [1.5, 1.5])
    with pytest.raises(ConfigError):
        pendulum_nlink(1).scaled(0.0)


def test_dataset_samples_respect_domain_and_bound(plant):
    ds = generate_dataset(plant, 200, Rng(1))
    assert ds.x.shape == (200, plant.n) and ds.u.shape == (200, plant.m)
    assert np.all(plant.in_domain(ds.x))
    assert np.all(plant.input_ok(ds.u))
    np.testing.assert_array_equal(ds.dxdt_0, plant.deriv(ds.x, np.zeros_like(ds.u)))
    np.testing.assert_array_equal(ds.dxdt_u, plant.deriv(ds.x, ds.u))


def test_dataset_is_seed_deterministic():
    p = pendulum_nlink(1)
    a = generate_dataset(p, 50, Rng(5))
    b = generate_dataset(p, 50, Rng(5))
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.u, b.u)
    c = generate_dataset(p, 50, Rng(6))
    assert not np.array_equal(a.x, c.x)


def test_include_zero_input():
    p = pendulum_nlink(1)
    ds = generate_dataset(p, 10, Rng(2), include_zero_input=True)
    np.testing.assert_array_equal(ds.u[0::2], np.zeros((5, 1)))
    np.testing.assert_array_equal(ds.control_effect[0::2], np.zeros((5, 2)))
    one = generate_dataset(p, 1, Rng(2), include_zero_input=True)
    np.testing.assert_array_equal(one.u, [[0.0]])


def test_controller_driven_samples_are_saturated():
    p = cartpole()
    ds = generate_dataset(p, 400, Rng(3), controller=lambda x: np.full((len(x), 1), 1000.0))
    at_bound = np.sum(ds.u[:, 0] == 50.0)
    assert 120 < at_bound < 280
    assert np.all(p.input_ok(ds.u))


def test_dataset_rejects_empty():
    with pytest.raises(ConfigError):
        generate_dataset(pendulum_nlink(1), 0, Rng(0))


def test_dataset_files_are_reproducible(tmp_path):
    p = pendulum_nlink(2)
    save_dataset(generate_dataset(p, 30, Rng(4)), tmp_path / "a.csv", p.input_norm)
    save_dataset(generate_dataset(p, 30, Rng(4)), tmp_path / "b.csv", p.input_norm)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    loaded = load_dataset(tmp_path / "a.csv")
    original = generate_dataset(p, 30, Rng(4))
    np.testing.assert_array_equal(loaded.x, original.x)
    np.testing.assert_array_equal(loaded.dxdt_u, original.dxdt_u)
    assert loaded.plant == 'pendulum_2link'


def test_dataset_load_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing.csv")

    p = pendulum_nlink(1)
    path = tmp_path / "d.csv"
    save_dataset(generate_dataset(p, 5, Rng(0)), path, p.input_norm)
    lines = path.read_text().splitlines()
    lines[0] = lines[0].replace("fu0", "g0")
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(CheckpointError):
        load_dataset(path)


def test_validate_flags_out_of_bound_inputs():
    p = pendulum_nlink(1)
    ds = generate_dataset(p, 5, Rng(0))
    ds.u[2, 0] = 11.0
    with pytest.raises(CheckpointError) as info:
        validate_dataset(ds, p.input_norm)
    assert "row 2" in str(info.value)
