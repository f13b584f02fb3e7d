import math

import numpy as np
import pytest

from modules.eikonal_ref import (Rollout, SdeConfig, _sweep_lines, detour_ratio, drift_field, eikonal_residual,
                                 generate_reference, path_collisions, rescale_time, rollout_sde, select_reference,
                                 solve_eikonal)
from modules.error_handler import EikonalError, ReferenceSelectionError
from modules.phase_core import AgentSpec, AxisBox, Circle, EnvironmentSpec, ProblemInstance, TimeGrid
from modules.scenario_gen import UNIT_SQUARE

OPEN = EnvironmentSpec(UNIT_SQUARE, (), 2)


def _walker(start, target, radius=0.02, env=OPEN):
    agents = (AgentSpec(radius),)
    x0 = np.array([[*start, 0.0, 0.0]])
    xT = np.array([[*target, 0.0, 0.0]])
    return ProblemInstance('adhoc', agents, env, x0, xT)


def test_free_space_field_is_euclidean_distance():
    spacing = 0.05
    field = solve_eikonal(OPEN, (0.0, 0.0), spacing)
    xs, ys = field.axes
    X, Y = np.meshgrid(xs, ys, indexing='ij')
    assert np.abs(field.values - np.hypot(X, Y)).max() < 2 * spacing
    assert field.value([[0.0, 0.0]])[0] == pytest.approx(0.0, abs=1e-12)


def test_gradient_has_unit_norm_away_from_the_source():
    field = solve_eikonal(OPEN, (0.2, -0.3), 0.05)
    assert eikonal_residual(field, OPEN) < 0.5
    g = field.gradient([[0.8, -0.3]])[0]
    assert g[0] > 0.9 and abs(g[1]) < 0.2


def test_field_goes_around_an_obstacle():
    env = EnvironmentSpec(UNIT_SQUARE, (AxisBox((-0.1, -1.0), (0.1, 0.6)),), 2)
    field = solve_eikonal(env, (0.5, 0.0), 0.05)
    # the wall forces a detour over its top end
    assert field.value([[-0.5, 0.0]])[0] > 1.0 + 0.5


def test_invalid_targets_are_rejected():
    env = EnvironmentSpec(UNIT_SQUARE, (Circle((0.0, 0.0), 0.2),), 2)
    with pytest.raises(EikonalError):
        solve_eikonal(env, (0.0, 0.0), 0.05)
    space = EnvironmentSpec(AxisBox((0, 0, 0), (1, 1, 1)), (), 3)
    with pytest.raises(EikonalError):
        solve_eikonal(space, (0.5, 0.5, 0.5), 0.1)


def test_drift_pushes_close_agents_apart():
    field = solve_eikonal(OPEN, (0.0, 0.9), 0.05)
    X = np.array([[-0.05, 0.0], [0.05, 0.0]])
    v = drift_field(X, field, OPEN, np.array([0.02, 0.02]), SdeConfig())
    assert v[0, 0] < 0 < v[1, 0]


def test_navigation_term_is_a_unit_step_towards_the_target():
    field = solve_eikonal(OPEN, (0.0, 0.9), 0.05)
    v = drift_field(np.array([[0.0, -0.5]]), [field], OPEN, np.array([0.02]), SdeConfig())
    assert np.linalg.norm(v[0]) == pytest.approx(1.0, abs=1e-9)
    assert v[0, 1] > 0.99


def test_rollout_reaches_target_in_free_space():
    inst = _walker((-0.5, -0.5), (0.5, 0.5))
    field = solve_eikonal(OPEN, (0.5, 0.5), 0.05)
    rollout = rollout_sde(inst, [field], SdeConfig(), seed=0)
    assert rollout.reached
    np.testing.assert_array_equal(rollout.path[0], inst.start_positions())
    np.testing.assert_array_equal(rollout.path[-1], inst.target_positions())
    assert detour_ratio(rollout.path) < 1.2


def test_rollouts_are_seeded():
    inst = _walker((-0.5, 0.0), (0.5, 0.0))
    field = solve_eikonal(OPEN, (0.5, 0.0), 0.05)
    a = rollout_sde(inst, [field], SdeConfig(), seed=3)
    b = rollout_sde(inst, [field], SdeConfig(), seed=3)
    np.testing.assert_array_equal(a.path, b.path)


def test_detour_ratio_of_a_straight_line_is_one():
    path = np.linspace([[0.0, 0.0]], [[1.0, 0.0]], 11)
    assert detour_ratio(path) == pytest.approx(1.0)


def test_selection_prefers_short_paths_and_breaks_ties_by_index():
    inst = _walker((0.0, 0.0), (1.0, 0.0), env=EnvironmentSpec(AxisBox((-2, -2), (2, 2)), (), 2))
    straight = np.linspace([[0.0, 0.0]], [[1.0, 0.0]], 11)
    bent = np.concatenate([np.linspace([[0.0, 0.0]], [[0.5, 0.5]], 6), np.linspace([[0.5, 0.5]], [[1.0, 0.0]], 6)[1:]])
    rollouts = [Rollout(bent, True, 0, 10), Rollout(straight, True, 1, 10), Rollout(straight.copy(), True, 2, 10)]
    index, chosen = select_reference(rollouts, inst)
    assert index == 1
    assert chosen is rollouts[1]


def test_selection_rejects_colliding_and_unfinished_paths():
    env = EnvironmentSpec(AxisBox((-2, -2), (2, 2)), (Circle((0.5, 0.0), 0.1),), 2)
    inst = _walker((0.0, 0.0), (1.0, 0.0), env=env)
    through = np.linspace([[0.0, 0.0]], [[1.0, 0.0]], 11)
    assert path_collisions(through, inst)[1] < 0
    rollouts = [Rollout(through, True, 0, 10), Rollout(through, False, 1, 20000)]
    with pytest.raises(ReferenceSelectionError) as info:
        select_reference(rollouts, inst)
    assert len(info.value.diagnoses) == 2
    assert 'collision' in info.value.diagnoses[0]


def test_rescaled_path_keeps_endpoints_and_is_arc_uniform():
    path = np.concatenate([np.linspace([[0.0, 0.0]], [[0.5, 0.0]], 50), np.linspace([[0.5, 0.0]], [[1.0, 0.0]], 5)])
    grid = TimeGrid.uniform(2.0, 11)
    out = rescale_time(path, 2.0, grid)
    assert out.shape == (11, 1, 2)
    np.testing.assert_array_equal(out[0], path[0])
    np.testing.assert_array_equal(out[-1], path[-1])
    np.testing.assert_allclose(out[:, 0, 0], np.linspace(0.0, 1.0, 11), atol=1e-12)


def test_stationary_agent_stays_put():
    path = np.zeros((5, 1, 2))
    out = rescale_time(path, 1.0, TimeGrid.uniform(1.0, 4))
    np.testing.assert_array_equal(out, np.zeros((4, 1, 2)))


def test_generate_reference_in_free_space():
    inst = _walker((-0.5, 0.0), (0.5, 0.2))
    grid = TimeGrid.uniform(1.0, 16)
    result = generate_reference(inst, grid, SdeConfig(trials=3), spacing=0.05, workers=2)
    assert result.positions.shape == (16, 1, 2)
    assert len(result.rollouts) == 3
    assert 0 <= result.trial < 3
    assert result.detour >= 1.0
    np.testing.assert_array_equal(result.positions[-1], inst.target_positions())


def test_sde_config_validation():
    assert SdeConfig().validate() == []
    assert SdeConfig(dt=0.0).validate()
    assert SdeConfig(trials=0, c1=-1.0).validate()
    assert math.isclose(SdeConfig().to_dict()['sigma'], 0.01)


def test_default_spacing_field_is_a_converged_fixed_point():
    spacing = 0.005
    field = solve_eikonal(OPEN, (0.3, -0.2), spacing)
    xs, ys = field.axes
    X, Y = np.meshgrid(xs, ys, indexing='ij')
    assert field.shape == (401, 401)
    assert np.abs(field.values - np.hypot(X - 0.3, Y + 0.2)).max() < 2 * spacing

    values = np.array(field.values)
    cost = np.full(values.shape, spacing)
    fixed = values <= 3 * spacing
    assert _sweep_lines(values, cost, fixed, range(values.shape[0])) < 1e-8
    assert _sweep_lines(values.T, cost.T, fixed.T, range(values.shape[1] - 1, -1, -1)) < 1e-8
