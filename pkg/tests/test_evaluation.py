from dataclasses import replace

import numpy as np
import pytest

from modules.error_handler import FamilySpecError
from modules.evaluation import (EvalReport, aggregate, clearance_vs_radius, compare_latent_variants, evaluate_batch,
                                format_table, max_violation, minimal_energy_cost, oracle_cost_gap, running_cost,
                                safety_violation)
from modules.latent_solver import LatentConfig, solve_latent_bvp
from modules.phase_core import AgentSpec, Circle, EnvironmentSpec, PhaseTrajectory, ProblemInstance, TimeGrid
from modules.scenario_gen import UNIT_SQUARE, make_family, sample_split
from modules.symplectic_decoder import build_decoder


def _identity_decoder(family, cfg):
    return build_decoder(replace(cfg, theta_dim=family.theta_dim), family.n_agents, 4, family.horizon, 0)


def test_rest_to_rest_cost_is_twelve(line_instance):
    assert minimal_energy_cost(line_instance, TimeGrid.uniform(1.0, 2001)) == pytest.approx(12.0, abs=1e-4)


def test_stationary_trajectory_costs_nothing(line_instance):
    grid = TimeGrid.uniform(1.0, 5)
    traj = PhaseTrajectory(grid, np.zeros((5, 1, 2)), np.zeros((5, 1, 2)))
    assert running_cost(traj, line_instance) == 0.0


def test_running_cost_is_symmetric_in_identical_agents(free2):
    inst = sample_split(free2, 'train')[0]
    grid = TimeGrid.uniform(1.0, 33)
    latent = solve_latent_bvp(inst, LatentConfig(), grid)
    traj = PhaseTrajectory(grid, latent.y, latent.q)
    swapped = PhaseTrajectory(grid, latent.y[:, ::-1], latent.q[:, ::-1])
    assert running_cost(swapped, inst) == pytest.approx(running_cost(traj, inst), rel=1e-14)


def test_running_cost_needs_two_samples(line_instance):
    traj = PhaseTrajectory(TimeGrid(np.array([0.0])), np.zeros((1, 1, 2)), np.zeros((1, 1, 2)))
    with pytest.raises(ValueError):
        running_cost(traj, line_instance)


def test_grazing_path_only_fails_on_the_dense_grid(crossing_instance):
    grid = TimeGrid.uniform(1.0, 2)
    x = np.array([[[-0.5, 0.0, 0.0, 0.0]], [[0.5, 0.0, 0.0, 0.0]]])
    traj = PhaseTrajectory(grid, x, np.zeros_like(x))
    violation, passed = safety_violation(traj, crossing_instance, refinement=1)
    assert passed and violation == 0.0
    violation, passed = safety_violation(traj, crossing_instance, refinement=10)
    assert not passed
    assert violation == pytest.approx(0.17)


def test_refinement_must_be_positive(crossing_instance):
    grid = TimeGrid.uniform(1.0, 2)
    x = np.zeros((2, 1, 4))
    with pytest.raises(ValueError):
        safety_violation(PhaseTrajectory(grid, x, x), crossing_instance, refinement=0)


def test_max_violation_without_constraints(line_instance):
    assert max_violation(np.zeros((3, 1, 1)), line_instance) == 0.0


def test_aggregate_of_rows():
    rows = [
        {'cost': 1.0, 'max_violation': 0.0, 'passed': True, 'residual': 1e-3},
        {'cost': 3.0, 'max_violation': 0.2, 'passed': False, 'residual': 3e-3},
    ]
    agg = aggregate(rows)
    assert agg['total'] == 2 and agg['passed'] == 1
    assert agg['pass_rate'] == 0.5
    assert agg['avg_cost'] == pytest.approx(2.0)
    assert agg['avg_residual'] == pytest.approx(2e-3)
    assert aggregate([])['pass_rate'] == 0.0


def test_evaluate_batch_on_an_untrained_decoder(free2, small_decoder_cfg):
    instances = sample_split(free2, 'test')
    decoder = _identity_decoder(free2, small_decoder_cfg)
    report = evaluate_batch(instances, decoder, free2, LatentConfig(), refinement=2, collocation_count=9, label='test')
    assert len(report.rows) == len(instances)
    assert [r['index'] for r in report.rows] == [0, 1, 2]
    for row in report.rows:
        assert row['cost'] > 0
        assert row['residual'] >= 0
        assert row['passed'] == (row['max_violation'] == 0.0)
    assert report.wall_clock > 0

    back = EvalReport.from_dict(report.to_dict())
    assert back.aggregates == report.aggregates
    table = format_table({'test': report})
    assert table.splitlines()[2].startswith('test')


def test_evaluate_batch_with_refinement(free2, small_decoder_cfg):
    instances = sample_split(free2, 'test')[:1]
    decoder = _identity_decoder(free2, small_decoder_cfg)
    plain = evaluate_batch(instances, decoder, free2, LatentConfig(), refinement=2, collocation_count=9)
    refined = evaluate_batch(instances, decoder, free2, LatentConfig(), refinement=2, collocation_count=9,
                             refine_steps=2)
    assert refined.rows[0]['residual'] <= plain.rows[0]['residual'] * (1 + 1e-9)


def test_empty_batch(free2, small_decoder_cfg):
    report = evaluate_batch([], _identity_decoder(free2, small_decoder_cfg), free2, LatentConfig())
    assert report.rows == [] and report.aggregates['total'] == 0


def test_latent_variants_are_keyed(free2, small_decoder_cfg):
    instances = sample_split(free2, 'test')[:1]
    decoder = _identity_decoder(free2, small_decoder_cfg)
    variants = [LatentConfig(), LatentConfig('lqr_rotation', 0.1, 1.0)]
    results = compare_latent_variants(instances, decoder, free2, variants, refinement=1, collocation_count=9)
    assert set(results) == {'lqr', 'lqr_rotation(0.1)'}


def test_violation_is_monotone_in_refinement():
    agent = AgentSpec(radius=0.005)
    env = EnvironmentSpec(UNIT_SQUARE, (Circle((0.0, 0.0), 0.005),), 2)
    inst = ProblemInstance('adhoc', (agent,), env, np.array([[-0.5, 0.0, 0.0, 0.0]]),
                           np.array([[0.5, 0.0, 0.0, 0.0]]))
    x = np.array([[[-0.5, 0.0, 0.0, 0.0]], [[0.5, 0.0, 0.0, 0.0]]])
    traj = PhaseTrajectory(TimeGrid.uniform(1.0, 2), x, np.zeros_like(x))

    violations = [safety_violation(traj, inst, refinement=m)[0] for m in range(1, 13)]
    assert violations[0] == 0.0
    assert all(b >= a for a, b in zip(violations, violations[1:]))
    # the midpoint sample at m=2 stays in every finer grid
    for m in (2, 3):
        violation, passed = safety_violation(traj, inst, refinement=m)
        assert not passed
        assert violation == pytest.approx(0.01, abs=1e-12)


def test_oracle_cost_gap_rows(free2, small_decoder_cfg):
    instances = sample_split(free2, 'test')
    decoder = _identity_decoder(free2, small_decoder_cfg)
    result = oracle_cost_gap(instances, decoder, free2, LatentConfig(), count=1, knots=11, refinement=2,
                             collocation_count=9)
    assert len(result['rows']) == 1
    row = result['rows'][0]
    assert row['seed'] == instances[0].seed
    assert row['oracle_cost'] > 0 and row['decoded_cost'] > 0
    assert row['relative_gap'] == pytest.approx((row['decoded_cost'] - row['oracle_cost']) / row['oracle_cost'])
    assert result['mean_relative_gap'] == pytest.approx(row['relative_gap'])

    empty = oracle_cost_gap(instances, decoder, free2, LatentConfig(), count=0)
    assert empty['rows'] == [] and empty['mean_relative_gap'] == 0.0


def test_clearance_vs_radius_needs_a_variable_radius_family(free2, small_decoder_cfg):
    with pytest.raises(FamilySpecError):
        clearance_vs_radius(_identity_decoder(free2, small_decoder_cfg), free2, LatentConfig())


def test_straight_paths_lose_clearance_as_the_obstacle_grows(small_decoder_cfg):
    family = make_family('variable_radius_obstacle', 2)
    decoder = _identity_decoder(family, small_decoder_cfg)
    result = clearance_vs_radius(decoder, family, LatentConfig(), radii=(0.25, 0.05, 0.15), refinement=2,
                                 collocation_count=9)
    assert result['radii'] == [0.05, 0.15, 0.25]
    assert len(result['clearance']) == 3
    # both agents cross the obstacle centre
    assert not result['positive'] and not result['passed']
    assert result['non_increasing']
