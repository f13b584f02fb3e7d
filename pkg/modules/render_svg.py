"""
SVG Rendering Module
Static trajectory plots: domain, obstacles, agent paths, endpoints, velocity/control arrows
"""

import io
import logging
from dataclasses import dataclass

import matplotlib

matplotlib.use('svg')

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Circle as CirclePatch, Polygon, Rectangle  # noqa: E402

from modules.phase_core import AxisBox, Circle, SegmentWall  # noqa: E402

POINTS_PER_INCH = 72.0


@dataclass(frozen=True)
class RenderOptions:
    width: float = 6.0
    arrows: bool = False
    arrow_samples: int = 8
    arrow_scale: float = 0.05
    markers: bool = True
    title: str | None = None


def viewbox_transform(env, options):
    """Data (x, y) -> SVG user units, given the figure size and domain"""
    lo, hi = np.asarray(env.domain.min_corner[:2]), np.asarray(env.domain.max_corner[:2])
    span = hi - lo
    width_pt = options.width * POINTS_PER_INCH
    height_pt = width_pt * span[1] / span[0]
    scale = width_pt / span[0]

    def to_svg(points):
        points = np.atleast_2d(points)
        return np.stack([(points[:, 0] - lo[0]) * scale, height_pt - (points[:, 1] - lo[1]) * scale], axis=-1)
    return to_svg, scale


def _obstacle_patch(obstacle, index):
    if isinstance(obstacle, Circle):
        patch = CirclePatch(obstacle.center[:2], obstacle.radius)
    elif isinstance(obstacle, AxisBox):
        lo, hi = obstacle.min_corner, obstacle.max_corner
        patch = Rectangle(lo[:2], hi[0] - lo[0], hi[1] - lo[1])
    elif isinstance(obstacle, SegmentWall):
        a, b = np.asarray(obstacle.endpoints[0][:2]), np.asarray(obstacle.endpoints[1][:2])
        direction = b - a
        normal = np.array([-direction[1], direction[0]]) / max(np.linalg.norm(direction), 1e-300)
        off = obstacle.half_width * normal
        patch = Polygon([a + off, b + off, b - off, a - off], closed=True)
    else:
        raise TypeError(f"Unknown obstacle {obstacle!r}")
    patch.set_facecolor('0.75')
    patch.set_edgecolor('0.35')
    patch.set_gid(f'obstacle-{index}')
    return patch


def _draw(traj, controls, env, options):
    lo, hi = env.domain.min_corner, env.domain.max_corner
    span = (hi[0] - lo[0], hi[1] - lo[1])
    fig = plt.figure(figsize=(options.width, options.width * span[1] / span[0]))
    ax = fig.add_axes([0, 0, 1, 1])
    ax.set_xlim(lo[0], hi[0])
    ax.set_ylim(lo[1], hi[1])
    ax.set_aspect('equal')
    ax.set_axis_off()
    ax.add_patch(Rectangle(lo[:2], span[0], span[1], fill=False, edgecolor='black', gid='domain'))

    for k, obstacle in enumerate(env.obstacles):
        ax.add_patch(_obstacle_patch(obstacle, k))

    if env.spatial_dim == 3:
        ax.text(lo[0] + 0.02 * span[0], hi[1] - 0.05 * span[1], '(x, y) projection of a 3D scene',
                fontsize=8, color='darkred', gid='projection-warning')

    if traj is not None:
        positions = traj.positions()[..., :2]
        velocities = traj.velocities()[..., :2]
        colors = plt.get_cmap('tab10')
        N = positions.shape[1]
        samples = np.unique(np.linspace(0, positions.shape[0] - 1, max(options.arrow_samples, 1)).round().astype(int))
        for i in range(N):
            color = colors(i % 10)
            ax.plot(positions[:, i, 0], positions[:, i, 1], color=color, linewidth=1.2, gid=f'agent-{i}')
            if options.markers:
                ax.plot(positions[0, i, 0], positions[0, i, 1], 'o', color=color, markersize=3)
                ax.plot(positions[-1, i, 0], positions[-1, i, 1], 's', color=color, markersize=4)
            if options.arrows:
                base = positions[samples, i]
                ax.quiver(base[:, 0], base[:, 1], velocities[samples, i, 0], velocities[samples, i, 1],
                          color='tab:blue', angles='xy', scale_units='xy', scale=1.0 / options.arrow_scale,
                          width=0.003, gid=f'velocity-{i}')
                if controls is not None and controls.size:
                    u = controls[samples, i, :2]
                    ax.quiver(base[:, 0], base[:, 1], u[:, 0], u[:, 1], color='tab:red', angles='xy',
                              scale_units='xy', scale=1.0 / options.arrow_scale, width=0.003,
                              gid=f'control-{i}')
    if options.title:
        ax.set_title(options.title)
    return fig


def render_svg_string(traj, env, options=None, controls=None):
    """Deterministic SVG text for a trajectory (or None) in an environment"""
    options = options or RenderOptions()
    if env.spatial_dim == 3:
        logging.warning("[PLOT] ⚠ 3D scene rendered as its (x, y) projection")
    with plt.rc_context({'svg.hashsalt': 'pisonet', 'svg.fonttype': 'none'}):
        fig = _draw(traj, controls, env, options)
        buffer = io.StringIO()
        fig.savefig(buffer, format='svg', metadata={'Date': None, 'Creator': None})
        plt.close(fig)
    return buffer.getvalue()


def render_svg(traj, env, output_path, options=None, controls=None):
    """Write the SVG; traj may be a PhaseTrajectory, a trajectory CSV path or None"""
    if isinstance(traj, str):
        from modules.persistence import read_trajectory
        traj, controls, _ = read_trajectory(traj)
    svg = render_svg_string(traj, env, options, controls)
    with open(output_path, 'w') as f:
        f.write(svg)
    logging.info(f"[PLOT] ✓ Wrote {output_path}")
    return output_path
