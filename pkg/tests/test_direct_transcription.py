import numpy as np
import pytest
import torch

from modules.direct_transcription import TranscribedProblem, initial_guess, solve_direct
from modules.phase_core import TimeGrid
from modules.scenario_gen import sample_instance


def test_rest_to_rest_reaches_the_analytic_cost(line_instance):
    result = solve_direct(line_instance, knots=31)
    assert result.success
    assert result.cost == pytest.approx(12.0, rel=1e-2)

    t = result.trajectory.grid.times
    np.testing.assert_array_equal(result.trajectory.x[0], line_instance.x0)
    np.testing.assert_array_equal(result.trajectory.x[-1], line_instance.xT)
    # endpoint controls of trapezoidal collocation are only first-order accurate
    np.testing.assert_allclose(result.controls[1:-1, 0, 0], 6.0 - 12.0 * t[1:-1], atol=0.1)


def test_solution_satisfies_the_collocation_defects(line_instance):
    result = solve_direct(line_instance, knots=11)
    problem = TranscribedProblem(line_instance, result.trajectory.grid)
    z = problem.pack(result.trajectory.x, result.controls)
    assert float(problem.defects(torch.as_tensor(z)).abs().max()) < 1e-6


def test_pack_and_unpack_agree(free2):
    inst = sample_instance(free2, 'train', 0)
    grid = TimeGrid.uniform(1.0, 6)
    x, u = initial_guess(inst, grid)
    assert x.shape == (6, 2, 4) and u.shape == (6, 2, 2)
    problem = TranscribedProblem(inst, grid)
    z = problem.pack(x, u)
    assert z.shape == (problem.n_state + problem.n_control,)
    back_x, back_u = problem.unpack(z)
    np.testing.assert_array_equal(back_x.numpy()[1:-1], x[1:-1])
    np.testing.assert_array_equal(back_u.numpy(), u)
    np.testing.assert_array_equal(back_x.numpy()[0], inst.x0)


def test_cost_of_the_latent_guess_is_positive(line_instance):
    grid = TimeGrid.uniform(1.0, 11)
    problem = TranscribedProblem(line_instance, grid)
    z = problem.pack(*initial_guess(line_instance, grid))
    assert float(problem.cost(torch.as_tensor(z))) > 0.0
