"""
Eikonal Reference Module
Grid distance fields, stochastic navigation rollouts and reference selection for pretraining
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from modules.error_handler import EikonalError, ReferenceSelectionError
from modules.geometry import clearance_to_obstacles, core_point, inside_any
from modules.phase_core import TimeGrid

OBSTACLE_SPEED = 1e-6
DENOMINATOR_FLOOR = 1e-4
METRIC_NOISE = 0.01
SOURCE_RADIUS_CELLS = 2


@dataclass(frozen=True)
class SdeConfig:
    sigma: float = 0.01
    dt: float = 1e-3
    trials: int = 5
    c1: float = 1.0
    c2: float = 1.0
    max_steps: int = 20000
    max_speed: float = 5.0

    def validate(self):
        problems = []
        if not self.dt > 0:
            problems.append(f"dt must be > 0, got {self.dt}")
        if self.trials < 1:
            problems.append(f"trials must be >= 1, got {self.trials}")
        if self.sigma < 0:
            problems.append("sigma must be >= 0")
        if not (self.c1 > 0 and self.c2 > 0):
            problems.append("c1 and c2 must be > 0")
        return problems

    def to_dict(self):
        return {'sigma': self.sigma, 'dt': self.dt, 'trials': self.trials, 'c1': self.c1,
                'c2': self.c2, 'max_steps': self.max_steps, 'max_speed': self.max_speed}


@dataclass(frozen=True, eq=False)
class ScalarField2D:
    origin: tuple
    spacing: float
    values: np.ndarray
    grad_x: np.ndarray
    grad_y: np.ndarray

    @property
    def shape(self):
        return self.values.shape

    @property
    def axes(self):
        nx, ny = self.values.shape
        return (self.origin[0] + self.spacing * np.arange(nx),
                self.origin[1] + self.spacing * np.arange(ny))

    def _interpolator(self, array):
        return RegularGridInterpolator(self.axes, array, method='linear', bounds_error=False, fill_value=None)

    def value(self, points):
        return self._interpolator(self.values)(np.atleast_2d(points))

    def gradient(self, points):
        """Bilinear interpolation of the precomputed gradient arrays, (M, 2)"""
        pts = np.atleast_2d(points)
        return np.stack([self._interpolator(self.grad_x)(pts), self._interpolator(self.grad_y)(pts)], axis=-1)


def _seed_source(u, fixed, xs, ys, target, blocked):
    h = xs[1] - xs[0]
    ix = int(np.clip(np.floor((target[0] - xs[0]) / h), 0, len(xs) - 2))
    iy = int(np.clip(np.floor((target[1] - ys[0]) / h), 0, len(ys) - 2))
    k = SOURCE_RADIUS_CELLS
    for i in range(max(ix - k + 1, 0), min(ix + k + 1, len(xs))):
        for j in range(max(iy - k + 1, 0), min(iy + k + 1, len(ys))):
            if not blocked[i, j]:
                u[i, j] = math.hypot(xs[i] - target[0], ys[j] - target[1])
                fixed[i, j] = True


def _local_update(a, b, f):
    """Upwind update from the smaller neighbour along each axis"""
    with np.errstate(invalid='ignore'):
        gap = a - b
        one_sided = np.minimum(a, b) + f
        two_sided = 0.5 * (a + b + np.sqrt(np.maximum(2.0 * f * f - gap * gap, 0.0)))
        return np.where(~np.isfinite(gap) | (np.abs(gap) >= f), one_sided, two_sided)


def _sweep_lines(u, cost, fixed, order):
    """Gauss-Seidel across lines in the given order, each line updated at once"""
    n, m = u.shape
    edge = np.full(1, np.inf)
    far = np.full(m, np.inf)
    change = 0.0
    for i in order:
        line = u[i]
        a = np.minimum(u[i - 1] if i > 0 else far, u[i + 1] if i < n - 1 else far)
        b = np.minimum(np.concatenate([edge, line[:-1]]), np.concatenate([line[1:], edge]))
        new = _local_update(a, b, cost[i])
        better = (new < line) & ~fixed[i]
        if better.any():
            change = max(change, float((line - new)[better].max()))
            line[better] = new[better]
    return change


def solve_eikonal(env, target, spacing=0.005, tol=1e-8, max_iterations=200):
    """Fast sweeping for |grad u| = 1/s with u(target) = 0"""
    if env.spatial_dim != 2:
        raise EikonalError(f"Eikonal fields are planar only, got spatial_dim={env.spatial_dim}")
    if not spacing > 0:
        raise EikonalError(f"Grid spacing must be > 0, got {spacing}")
    target = np.asarray(target, dtype=np.float64)
    if inside_any(env, target[None])[0]:
        raise EikonalError(f"Target {target.tolist()} lies inside an obstacle")

    lo = np.asarray(env.domain.min_corner, dtype=np.float64)
    hi = np.asarray(env.domain.max_corner, dtype=np.float64)
    nx = int(round((hi[0] - lo[0]) / spacing)) + 1
    ny = int(round((hi[1] - lo[1]) / spacing)) + 1
    xs = lo[0] + spacing * np.arange(nx)
    ys = lo[1] + spacing * np.arange(ny)
    X, Y = np.meshgrid(xs, ys, indexing='ij')
    blocked = inside_any(env, np.stack([X, Y], axis=-1))

    u = np.full((nx, ny), np.inf)
    fixed = np.zeros((nx, ny), dtype=bool)
    _seed_source(u, fixed, xs, ys, target, blocked)

    cost = np.where(blocked, spacing / OBSTACLE_SPEED, spacing)
    sweeps = ((u, cost, fixed, range(nx)), (u, cost, fixed, range(nx - 1, -1, -1)),
              (u.T, cost.T, fixed.T, range(ny)), (u.T, cost.T, fixed.T, range(ny - 1, -1, -1)))

    for iteration in range(max_iterations):
        change = max([_sweep_lines(*sweep) for sweep in sweeps])
        if change < tol:
            break
    else:
        logging.warning(f"[EIKONAL] ⚠ Sweeping stopped after {max_iterations} iterations (change {change:.2e})")

    values = u
    grad_x, grad_y = np.gradient(values, spacing, spacing)
    logging.info(f"[EIKONAL] ✓ Field {nx}x{ny} solved in {iteration + 1} iterations")
    return ScalarField2D((float(lo[0]), float(lo[1])), float(spacing), values, grad_x, grad_y)


def eikonal_residual(field, env):
    """Max | |grad u| - 1 | over interior free-space nodes away from the source"""
    xs, ys = field.axes
    X, Y = np.meshgrid(xs, ys, indexing='ij')
    points = np.stack([X, Y], axis=-1)
    free = ~inside_any(env, points, inflate=2 * field.spacing)
    free[0, :] = free[-1, :] = free[:, 0] = free[:, -1] = False
    free &= field.values > 2 * field.spacing
    norm = np.hypot(field.grad_x, field.grad_y)
    return float(np.max(np.abs(norm[free] - 1.0))) if free.any() else 0.0


# Drift and rollouts

def _clamped(gap):
    return np.maximum(gap, DENOMINATOR_FLOOR)


def drift_field(X, fields, env, radii, cfg):
    """Repulsion + wall + navigation velocity per agent, (N, 2)"""
    X = np.asarray(X, dtype=np.float64)
    radii = np.asarray(radii, dtype=np.float64)
    N = X.shape[0]
    if isinstance(fields, ScalarField2D):
        fields = [fields] * N

    diff = X[:, None, :] - X[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    np.fill_diagonal(dist, 1.0)
    gap = _clamped(dist - (radii[:, None] + radii[None, :]))
    repel = diff / dist[..., None] / (cfg.c1 * gap[..., None] ** 2)
    repel[np.arange(N), np.arange(N)] = 0.0
    v_rep = repel.sum(axis=1)

    v_wall = np.zeros_like(X)
    for obstacle in env.obstacles:
        anchor, r_obs = core_point(obstacle, X)
        offset = X - anchor.numpy()
        norm = np.linalg.norm(offset, axis=-1)
        unit = offset / np.where(norm > 0, norm, 1.0)[:, None]
        v_wall += unit / (cfg.c2 * _clamped(norm - radii - r_obs)[:, None] ** 3)

    v_nav = np.zeros_like(X)
    for i, field in enumerate(fields):
        g = field.gradient(X[i])[0]
        norm = np.linalg.norm(g)
        if norm > 0:
            v_nav[i] = -g / norm
    return v_rep + v_wall + v_nav


@dataclass(frozen=True, eq=False)
class Rollout:
    path: np.ndarray
    reached: bool
    seed: int
    steps: int


def rollout_sde(inst, fields, cfg, seed, spacing=None):
    """Euler-Maruyama on dX = G v(X) dt + sigma dW until every agent is near its target"""
    rng = np.random.default_rng(seed)
    metric = np.eye(2) + rng.uniform(-METRIC_NOISE, METRIC_NOISE, size=(2, 2))
    if isinstance(fields, ScalarField2D):
        fields = [fields] * inst.n_agents
    tolerance = 2.0 * (spacing if spacing is not None else fields[0].spacing)
    targets = inst.target_positions()
    radii = inst.radii

    X = inst.start_positions().copy()
    done = np.linalg.norm(X - targets, axis=-1) <= tolerance
    path = [X.copy()]
    sqrt_dt = math.sqrt(cfg.dt)
    step = 0
    while not done.all() and step < cfg.max_steps:
        v = drift_field(X, fields, inst.env, radii, cfg) @ metric.T
        speed = np.linalg.norm(v, axis=-1, keepdims=True)
        v = np.where(speed > cfg.max_speed, v * cfg.max_speed / np.maximum(speed, 1e-300), v)
        move = v * cfg.dt + cfg.sigma * sqrt_dt * rng.standard_normal(X.shape)
        X = np.where(done[:, None], X, X + move)
        done |= np.linalg.norm(X - targets, axis=-1) <= tolerance
        path.append(X.copy())
        step += 1

    reached = bool(done.all())
    if reached:
        path.append(targets.copy())
    return Rollout(np.asarray(path), reached, seed, step)


def path_collisions(path, inst):
    """Smallest pairwise and obstacle clearance along a sampled path"""
    radii = inst.radii
    pair = math.inf
    N = path.shape[1]
    if N > 1:
        iu, ju = np.triu_indices(N, k=1)
        dist = np.linalg.norm(path[:, iu] - path[:, ju], axis=-1)
        pair = float((dist - (radii[iu] + radii[ju])).min())
    wall = math.inf
    if inst.env.obstacles:
        flat = path.reshape(-1, path.shape[-1])
        wall = float(clearance_to_obstacles(inst.env, flat, np.tile(radii, path.shape[0])).min())
    return pair, wall


def detour_ratio(path):
    """max_i arc length / straight start-goal distance"""
    arc = np.linalg.norm(np.diff(path, axis=0), axis=-1).sum(axis=0)
    straight = np.linalg.norm(path[-1] - path[0], axis=-1)
    ratios = np.where(straight > 0, arc / np.where(straight > 0, straight, 1.0), np.where(arc > 0, np.inf, 1.0))
    return float(ratios.max())


def select_reference(paths, inst):
    """Admissible rollout with the smallest detour ratio; ties go to the earlier trial"""
    best, best_ratio = None, math.inf
    diagnoses = []
    for index, rollout in enumerate(paths):
        if not rollout.reached:
            diagnoses.append(f"did not reach targets in {rollout.steps} steps")
            continue
        pair, wall = path_collisions(rollout.path, inst)
        if pair <= 0 or wall <= 0:
            diagnoses.append(f"collision (pair clearance {pair:.3g}, wall clearance {wall:.3g})")
            continue
        ratio = detour_ratio(rollout.path)
        diagnoses.append(f"detour ratio {ratio:.4f}")
        if best is None or ratio < best_ratio - 1e-9:
            best, best_ratio = index, ratio
    if best is None:
        raise ReferenceSelectionError(diagnoses)
    logging.info(f"[EIKONAL] ✓ Selected trial {best} (detour ratio {best_ratio:.4f})")
    return best, paths[best]


def rescale_time(path, horizon, grid):
    """Arc-length-uniform reparameterization onto [0, T] sampled at the grid times"""
    path = np.asarray(path, dtype=np.float64)
    times = grid.times if isinstance(grid, TimeGrid) else np.asarray(grid, dtype=np.float64)
    out = np.empty((len(times),) + path.shape[1:])
    for i in range(path.shape[1]):
        agent = path[:, i]
        steps = np.linalg.norm(np.diff(agent, axis=0), axis=-1)
        keep = np.concatenate([[True], steps > 0])
        agent = agent[keep]
        arc = np.concatenate([[0.0], np.cumsum(steps[steps > 0])])
        if arc[-1] == 0.0:
            out[:, i] = agent[0]
            continue
        tau = horizon * arc / arc[-1]
        for c in range(agent.shape[1]):
            out[:, i, c] = np.interp(times, tau, agent[:, c])
        out[0, i] = agent[0]
        out[-1, i] = agent[-1]
    return out


@dataclass(frozen=True, eq=False)
class ReferenceResult:
    positions: np.ndarray
    trial: int
    detour: float
    rollouts: tuple


def agent_fields(inst, spacing):
    """One distance field per distinct target"""
    cache = {}
    fields = []
    for target in inst.target_positions():
        key = tuple(np.round(target, 12))
        if key not in cache:
            cache[key] = solve_eikonal(inst.env, target, spacing)
        fields.append(cache[key])
    return fields


def generate_reference(inst, grid, cfg=None, spacing=0.005, workers=1, base_seed=0):
    """Trials in parallel with independent seeds, best path rescaled onto the grid"""
    cfg = cfg or SdeConfig()
    fields = agent_fields(inst, spacing)
    seeds = [base_seed + trial for trial in range(cfg.trials)]
    logging.info(f"[EIKONAL] → Running {cfg.trials} rollouts on {workers} worker(s)")
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        rollouts = list(pool.map(lambda s: rollout_sde(inst, fields, cfg, s, spacing), seeds))
    index, chosen = select_reference(rollouts, inst)
    return ReferenceResult(rescale_time(chosen.path, inst.horizon, grid), index,
                           detour_ratio(chosen.path), tuple(rollouts))
