import numpy as np
import pytest

from modules.latent_solver import LatentConfig, solve_latent_bvp
from modules.persistence import write_trajectory
from modules.phase_core import AxisBox, EnvironmentSpec, PhaseTrajectory, TimeGrid
from modules.render_svg import RenderOptions, render_svg, render_svg_string, viewbox_transform
from modules.scenario_gen import make_family, sample_instance


@pytest.fixture
def scene(obstacle2):
    inst = sample_instance(obstacle2, 'test', 0)
    grid = TimeGrid.uniform(1.0, 21)
    latent = solve_latent_bvp(inst, LatentConfig(), grid)
    return inst, PhaseTrajectory(grid, latent.y, latent.q)


def test_output_is_deterministic(scene):
    inst, traj = scene
    options = RenderOptions(arrows=True)
    controls = traj.p[..., 2:] / 2.0
    first = render_svg_string(traj, inst.env, options, controls)
    assert first == render_svg_string(traj, inst.env, options, controls)
    assert first.lstrip().startswith('<?xml')


def test_groups_are_labelled(scene):
    inst, traj = scene
    svg = render_svg_string(traj, inst.env, RenderOptions(arrows=True), traj.p[..., 2:])
    for gid in ('domain', 'obstacle-0', 'agent-0', 'agent-1', 'velocity-0', 'control-1'):
        assert f'id="{gid}"' in svg


def test_environment_only(scene):
    inst, _ = scene
    svg = render_svg_string(None, inst.env)
    assert 'id="obstacle-0"' in svg
    assert 'id="agent-0"' not in svg


def test_viewbox_maps_domain_corners(scene):
    inst, _ = scene
    to_svg, scale = viewbox_transform(inst.env, RenderOptions(width=4.0))
    assert scale == pytest.approx(4.0 * 72.0 / 2.0)
    corners = to_svg(np.array([[-1.0, 1.0], [1.0, -1.0]]))
    np.testing.assert_allclose(corners, [[0.0, 0.0], [288.0, 288.0]])


def test_three_dimensional_scene_is_projected(caplog):
    family = make_family('heterogeneous_3d', 4)
    inst = sample_instance(family, 'train', 0)
    grid = TimeGrid.uniform(1.0, 5)
    latent = solve_latent_bvp(inst, LatentConfig(), grid)
    svg = render_svg_string(PhaseTrajectory(grid, latent.y, latent.q), inst.env)
    assert 'projection of a 3D scene' in svg
    assert 'projection' in caplog.text


def test_render_from_trajectory_file(tmp_path, scene):
    inst, traj = scene
    csv_path = str(tmp_path / 'traj.csv')
    write_trajectory(csv_path, traj, inst)
    out = render_svg(csv_path, inst.env, str(tmp_path / 'traj.svg'))
    with open(out) as f:
        svg = f.read()
    assert 'id="agent-1"' in svg


def test_non_square_domain_keeps_aspect():
    env = EnvironmentSpec(AxisBox((0.0, 0.0), (4.0, 1.0)), (), 2)
    to_svg, scale = viewbox_transform(env, RenderOptions(width=8.0))
    assert scale == pytest.approx(8.0 * 72.0 / 4.0)
    np.testing.assert_allclose(to_svg([[4.0, 0.0]]), [[576.0, 144.0]])
