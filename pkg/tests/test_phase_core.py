import numpy as np
import pytest

from modules.phase_core import (AgentSpec, AxisBox, Circle, EnvironmentSpec, ProblemInstance, SegmentWall, TimeGrid,
                                obstacle_from_dict, validate_instance)
from modules.scenario_gen import UNIT_SQUARE, make_family, sample_instance


def _pair(x0, radius=0.05, obstacles=()):
    agents = (AgentSpec(radius), AgentSpec(radius))
    env = EnvironmentSpec(UNIT_SQUARE, tuple(obstacles), 2)
    x0 = np.asarray(x0, dtype=np.float64)
    xT = -x0
    return ProblemInstance('adhoc', agents, env, x0, xT)


def test_uniform_grid_hits_endpoints_exactly():
    grid = TimeGrid.uniform(1.0, 64)
    assert grid.times[0] == 0.0
    assert grid.times[-1] == 1.0
    assert grid.count == 64
    assert grid.is_valid()


def test_uniform_grid_needs_two_points():
    with pytest.raises(ValueError):
        TimeGrid.uniform(1.0, 1)


def test_refine_keeps_the_coarse_nodes():
    grid = TimeGrid.uniform(2.0, 5)
    dense = grid.refine(10)
    assert dense.count == 41
    np.testing.assert_allclose(dense.times[::10], grid.times, atol=1e-15)
    assert grid.refine(1).same_as(grid)


def test_non_monotone_grid_is_invalid():
    assert not TimeGrid(np.array([0.0, 0.5, 0.4, 1.0])).is_valid()
    assert not TimeGrid(np.array([0.1, 0.5, 1.0])).is_valid()


def test_nested_refinement_contains_every_coarser_grid():
    grid = TimeGrid.uniform(1.0, 4)
    assert grid.nested_refinement(10).count == 3 * 32 + 1
    assert grid.nested_refinement(1).same_as(grid)
    for m in range(1, 10):
        coarse, fine = grid.nested_refinement(m), grid.nested_refinement(m + 1)
        assert np.all(np.isin(coarse.times, fine.times))
        assert fine.is_valid()
    uniform = grid.refine(6).times
    dense = grid.nested_refinement(6).times
    assert np.all(np.min(np.abs(uniform[:, None] - dense[None, :]), axis=1) < 1e-12)


def test_nested_refinement_rejects_zero_factor():
    with pytest.raises(ValueError):
        TimeGrid.uniform(1.0, 4).nested_refinement(0)


def test_sampled_instances_are_valid():
    family = make_family('obstacle', 4)
    assert validate_instance(sample_instance(family, 'train', 0)) == []


def test_overlapping_agents_are_reported():
    inst = _pair([[0.0, 0.5, 0, 0], [0.05, 0.5, 0, 0]])
    names = {v.invariant for v in validate_instance(inst)}
    assert 'instance.x0_separation' in names


def test_start_inside_obstacle_is_reported():
    inst = _pair([[0.0, 0.0, 0, 0], [0.5, 0.5, 0, 0]], obstacles=[Circle((0.0, 0.0), 0.15)])
    violations = validate_instance(inst)
    assert any(v.invariant == 'instance.x0_obstacle_clearance' and v.indices == (0, 0) for v in violations)


def test_start_outside_domain_is_reported():
    inst = _pair([[1.5, 0.0, 0, 0], [0.5, 0.5, 0, 0]])
    assert any(v.invariant == 'instance.x0_in_domain' for v in validate_instance(inst))


def test_obstacle_outside_domain_is_reported():
    inst = _pair([[-0.5, 0.5, 0, 0], [0.5, 0.5, 0, 0]], obstacles=[Circle((0.95, 0.0), 0.2)])
    assert any(v.invariant == 'env.obstacle_in_domain' for v in validate_instance(inst))


def test_odd_state_dim_is_reported():
    agent = AgentSpec(0.02, state_dim=3)
    inst = ProblemInstance('adhoc', (agent,), EnvironmentSpec(UNIT_SQUARE), np.zeros((1, 3)), np.zeros((1, 3)))
    assert any(v.invariant == 'agent.state_dim' for v in validate_instance(inst))


def test_non_finite_state_is_reported():
    inst = _pair([[np.nan, 0.5, 0, 0], [0.5, 0.5, 0, 0]])
    assert [v.invariant for v in validate_instance(inst)] == ['instance.finite']


def test_instance_arrays_are_read_only():
    inst = _pair([[-0.5, 0.5, 0, 0], [0.5, 0.5, 0, 0]])
    with pytest.raises(ValueError):
        inst.x0[0, 0] = 1.0


def test_instance_survives_json_form():
    family = make_family('heterogeneous_3d', 4)
    inst = sample_instance(family, 'test', 2)
    back = ProblemInstance.from_dict(inst.to_dict())
    assert back.to_dict() == inst.to_dict()
    assert back.env.obstacles == inst.env.obstacles


def test_obstacle_from_dict_kinds():
    assert isinstance(obstacle_from_dict({'type': 'circle', 'center': [0, 0], 'radius': 1}), Circle)
    assert isinstance(obstacle_from_dict({'type': 'box', 'min_corner': [0, 0], 'max_corner': [1, 1]}), AxisBox)
    wall = obstacle_from_dict({'type': 'segment', 'endpoints': [[0, 0], [1, 0]], 'half_width': 0.1})
    assert isinstance(wall, SegmentWall)
    with pytest.raises(ValueError):
        obstacle_from_dict({'type': 'torus'})
