"""
Phase Core Module
Problem instances, time grids and phase-space trajectories shared by every stage
"""

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np


def _frozen(array):
    out = np.array(array, dtype=np.float64)
    out.setflags(write=False)
    return out


def _point(values):
    return tuple(float(v) for v in values)


@dataclass(frozen=True)
class CostSpec:
    velocity_weight: float = 1.0   # c_v
    control_weight: float = 1.0    # c_u

    def to_dict(self):
        return {'velocity_weight': self.velocity_weight, 'control_weight': self.control_weight}

    @classmethod
    def from_dict(cls, data):
        return cls(float(data.get('velocity_weight', 1.0)), float(data.get('control_weight', 1.0)))


@dataclass(frozen=True)
class AgentSpec:
    radius: float
    drag_coeff: float = 0.0
    state_dim: int = 4
    control_dim: int | None = None

    def __post_init__(self):
        if self.control_dim is None:
            object.__setattr__(self, 'control_dim', self.state_dim // 2)

    @property
    def spatial_dim(self):
        return self.state_dim // 2

    def to_dict(self):
        return {
            'radius': self.radius,
            'drag_coeff': self.drag_coeff,
            'state_dim': self.state_dim,
            'control_dim': self.control_dim,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            radius=float(data['radius']),
            drag_coeff=float(data.get('drag_coeff', 0.0)),
            state_dim=int(data.get('state_dim', 4)),
            control_dim=data.get('control_dim'),
        )


@dataclass(frozen=True)
class Circle:
    center: tuple
    radius: float
    kind = 'circle'

    def to_dict(self):
        return {'type': self.kind, 'center': list(self.center), 'radius': self.radius}

    def bounds(self):
        c = np.asarray(self.center)
        return c - self.radius, c + self.radius


@dataclass(frozen=True)
class AxisBox:
    min_corner: tuple
    max_corner: tuple
    kind = 'box'

    def to_dict(self):
        return {'type': self.kind, 'min_corner': list(self.min_corner), 'max_corner': list(self.max_corner)}

    def bounds(self):
        return np.asarray(self.min_corner), np.asarray(self.max_corner)

    def contains(self, points, tol=0.0):
        """Componentwise containment of (..., d) points"""
        pts = np.asarray(points, dtype=np.float64)
        lo, hi = self.bounds()
        return np.all((pts >= lo - tol) & (pts <= hi + tol), axis=-1)

    @property
    def center(self):
        lo, hi = self.bounds()
        return (lo + hi) / 2.0


@dataclass(frozen=True)
class SegmentWall:
    endpoints: tuple
    half_width: float
    kind = 'segment'

    def to_dict(self):
        return {'type': self.kind, 'endpoints': [list(e) for e in self.endpoints], 'half_width': self.half_width}

    def bounds(self):
        ends = np.asarray(self.endpoints)
        return ends.min(axis=0) - self.half_width, ends.max(axis=0) + self.half_width


def obstacle_from_dict(data):
    kind = data.get('type')
    if kind == 'circle':
        return Circle(_point(data['center']), float(data['radius']))
    if kind == 'box':
        return AxisBox(_point(data['min_corner']), _point(data['max_corner']))
    if kind == 'segment':
        a, b = data['endpoints']
        return SegmentWall((_point(a), _point(b)), float(data['half_width']))
    raise ValueError(f"Unknown obstacle type: {kind!r}")


def obstacle_size(obstacle):
    """Size parameter used by the wall term of the reference drift"""
    if isinstance(obstacle, Circle):
        return obstacle.radius
    if isinstance(obstacle, SegmentWall):
        return obstacle.half_width
    return 0.0


@dataclass(frozen=True)
class EnvironmentSpec:
    domain: AxisBox
    obstacles: tuple = ()
    spatial_dim: int = 2

    def to_dict(self):
        return {
            'domain': self.domain.to_dict(),
            'obstacles': [o.to_dict() for o in self.obstacles],
            'spatial_dim': self.spatial_dim,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            domain=obstacle_from_dict({**data['domain'], 'type': 'box'}),
            obstacles=tuple(obstacle_from_dict(o) for o in data.get('obstacles', [])),
            spatial_dim=int(data.get('spatial_dim', 2)),
        )


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    family_id: str
    agents: tuple
    env: EnvironmentSpec
    x0: np.ndarray
    xT: np.ndarray
    horizon: float = 1.0
    seed: int = 0
    cost: CostSpec = field(default_factory=CostSpec)

    def __post_init__(self):
        object.__setattr__(self, 'agents', tuple(self.agents))
        object.__setattr__(self, 'x0', _frozen(self.x0))
        object.__setattr__(self, 'xT', _frozen(self.xT))

    @property
    def n_agents(self):
        return len(self.agents)

    @property
    def dx(self):
        return self.agents[0].state_dim if self.agents else 2 * self.env.spatial_dim

    @property
    def spatial_dim(self):
        return self.dx // 2

    @property
    def radii(self):
        return np.array([a.radius for a in self.agents], dtype=np.float64)

    @property
    def drag(self):
        return np.array([a.drag_coeff for a in self.agents], dtype=np.float64)

    def start_positions(self):
        return self.x0[:, :self.spatial_dim]

    def target_positions(self):
        return self.xT[:, :self.spatial_dim]

    def replace(self, **changes):
        data = {f: getattr(self, f) for f in
                ('family_id', 'agents', 'env', 'x0', 'xT', 'horizon', 'seed', 'cost')}
        data.update(changes)
        return ProblemInstance(**data)

    def to_dict(self):
        return {
            'family_id': self.family_id,
            'agents': [a.to_dict() for a in self.agents],
            'env': self.env.to_dict(),
            'x0': self.x0.tolist(),
            'xT': self.xT.tolist(),
            'horizon': self.horizon,
            'seed': self.seed,
            'cost': self.cost.to_dict(),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            family_id=str(data['family_id']),
            agents=tuple(AgentSpec.from_dict(a) for a in data['agents']),
            env=EnvironmentSpec.from_dict(data['env']),
            x0=np.asarray(data['x0'], dtype=np.float64),
            xT=np.asarray(data['xT'], dtype=np.float64),
            horizon=float(data.get('horizon', 1.0)),
            seed=int(data.get('seed', 0)),
            cost=CostSpec.from_dict(data.get('cost', {})),
        )


@dataclass(frozen=True, eq=False)
class TimeGrid:
    times: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'times', _frozen(self.times))

    @classmethod
    def uniform(cls, horizon, count):
        if count < 2:
            raise ValueError(f"Time grid needs at least 2 points, got {count}")
        times = np.linspace(0.0, horizon, count)
        times[-1] = horizon
        return cls(times)

    @property
    def count(self):
        return int(self.times.shape[0])

    @property
    def horizon(self):
        return float(self.times[-1])

    def refine(self, factor):
        """Uniform grid with (count - 1) * factor intervals over the same horizon"""
        if factor < 1:
            raise ValueError(f"Refinement factor must be >= 1, got {factor}")
        return TimeGrid.uniform(self.horizon, (self.count - 1) * factor + 1)

    def nested_refinement(self, factor):
        """Every interval split at j/k for all k <= factor, so each grid contains the coarser ones"""
        if factor < 1:
            raise ValueError(f"Refinement factor must be >= 1, got {factor}")
        fractions = sorted({Fraction(j, k) for k in range(1, factor + 1) for j in range(k)})
        offsets = np.array([float(f) for f in fractions])
        t = self.times
        inner = t[:-1, None] + offsets[None, :] * np.diff(t)[:, None]
        return TimeGrid(np.concatenate([inner.ravel(), t[-1:]]))

    def is_valid(self):
        t = self.times
        return (t.ndim == 1 and t.shape[0] >= 2 and t[0] == 0.0
                and bool(np.all(np.diff(t) > 0)) and bool(np.all(np.isfinite(t))))

    def same_as(self, other):
        return self.times.shape == other.times.shape and bool(np.array_equal(self.times, other.times))


@dataclass(frozen=True, eq=False)
class PhaseTrajectory:
    grid: TimeGrid
    x: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'x', _frozen(self.x))
        object.__setattr__(self, 'p', _frozen(self.p))

    def positions(self):
        return self.x[..., :self.x.shape[-1] // 2]

    def velocities(self):
        return self.x[..., self.x.shape[-1] // 2:]

    def is_finite(self):
        return bool(np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.p)))


@dataclass(frozen=True, eq=False)
class LatentTrajectory:
    grid: TimeGrid
    y: np.ndarray
    q: np.ndarray
    ydot: np.ndarray
    qdot: np.ndarray

    def __post_init__(self):
        for name in ('y', 'q', 'ydot', 'qdot'):
            object.__setattr__(self, name, _frozen(getattr(self, name)))

    def z(self):
        """(Nt, N, 2dx) stacked latent phase points"""
        return np.concatenate([self.y, self.q], axis=-1)

    def zdot(self):
        return np.concatenate([self.ydot, self.qdot], axis=-1)


@dataclass(frozen=True)
class Violation:
    invariant: str
    indices: tuple
    detail: str

    def __str__(self):
        return f"{self.invariant}{list(self.indices)}: {self.detail}"


def _pairwise_gaps(positions, radii):
    gaps = []
    n = len(radii)
    for i in range(n):
        for j in range(i + 1, n):
            dist = float(np.linalg.norm(positions[i] - positions[j]))
            gaps.append((i, j, dist - radii[i] - radii[j]))
    return gaps


def _obstacle_shape_violation(obstacle):
    if isinstance(obstacle, Circle):
        if not obstacle.radius > 0:
            return f"circle radius {obstacle.radius} <= 0"
    elif isinstance(obstacle, AxisBox):
        if not np.all(np.asarray(obstacle.min_corner) < np.asarray(obstacle.max_corner)):
            return f"box corners {obstacle.min_corner} !< {obstacle.max_corner}"
    elif isinstance(obstacle, SegmentWall):
        if not obstacle.half_width >= 0:
            return f"segment half_width {obstacle.half_width} < 0"
    return None


def validate_instance(inst):
    """Every failed instance invariant, empty for a valid instance"""
    from modules.geometry import clearance_to_obstacles

    out = []
    env = inst.env

    for i, agent in enumerate(inst.agents):
        if not agent.radius > 0:
            out.append(Violation('agent.radius', (i,), f"radius {agent.radius} <= 0"))
        if not agent.drag_coeff >= 0:
            out.append(Violation('agent.drag_coeff', (i,), f"drag {agent.drag_coeff} < 0"))
        if agent.state_dim % 2 != 0:
            out.append(Violation('agent.state_dim', (i,), f"state_dim {agent.state_dim} is odd"))
        elif agent.control_dim != agent.state_dim // 2:
            out.append(Violation('agent.control_dim', (i,),
                                 f"control_dim {agent.control_dim} != state_dim/2"))
        elif agent.spatial_dim != env.spatial_dim:
            out.append(Violation('env.agent_dim', (i,),
                                 f"agent spatial dim {agent.spatial_dim} != env {env.spatial_dim}"))

    if env.spatial_dim not in (2, 3):
        out.append(Violation('env.spatial_dim', (), f"spatial_dim {env.spatial_dim} not in {{2, 3}}"))

    for k, obstacle in enumerate(env.obstacles):
        problem = _obstacle_shape_violation(obstacle)
        if problem:
            out.append(Violation('obstacle.shape', (k,), problem))
            continue
        lo, hi = obstacle.bounds()
        if not (env.domain.contains(lo) and env.domain.contains(hi)):
            out.append(Violation('env.obstacle_in_domain', (k,), "obstacle extends outside the domain"))

    n, dx = inst.n_agents, inst.dx
    if inst.x0.shape != (n, dx) or inst.xT.shape != (n, dx):
        out.append(Violation('instance.shape', (),
                             f"x0 {inst.x0.shape} / xT {inst.xT.shape}, expected {(n, dx)}"))
        return out
    if not (np.all(np.isfinite(inst.x0)) and np.all(np.isfinite(inst.xT))):
        out.append(Violation('instance.finite', (), "non-finite boundary state"))
        return out
    if not (math.isfinite(inst.horizon) and inst.horizon > 0):
        out.append(Violation('instance.horizon', (), f"horizon {inst.horizon} <= 0"))

    d = inst.spatial_dim
    if d != env.spatial_dim:
        return out
    radii = inst.radii
    for label, state in (('x0', inst.x0), ('xT', inst.xT)):
        inside = env.domain.contains(state[:, :d])
        for i in np.flatnonzero(~inside):
            out.append(Violation(f'instance.{label}_in_domain', (int(i),),
                                 f"{label} position {state[i, :d].tolist()} outside domain"))
        for i, j, gap in _pairwise_gaps(state[:, :d], radii):
            if not gap > 0:
                out.append(Violation(f'instance.{label}_separation', (i, j),
                                     f"separation short by {-gap:.6g}"))
        if env.obstacles:
            clearance = clearance_to_obstacles(env, state[:, :d], radii)
            for i, k in zip(*np.nonzero(~(clearance > 0))):
                out.append(Violation(f'instance.{label}_obstacle_clearance', (int(i), int(k)),
                                     f"clearance {clearance[i, k]:.6g} <= 0"))
    return out
