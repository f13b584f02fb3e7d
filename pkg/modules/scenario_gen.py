"""
Scenario Generation Module
Declarative problem families and deterministic instance sampling
"""

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from config import Config
from modules.error_handler import FamilySpecError, RejectionBudgetError, ThetaEncodingError
from modules.phase_core import (AgentSpec, AxisBox, Circle, CostSpec, EnvironmentSpec,
                                ProblemInstance, obstacle_from_dict, validate_instance)

FAMILIES = ('free', 'obstacle', 'maze', 'variable_radius_obstacle', 'heterogeneous_2d', 'heterogeneous_3d')
DRAG_LAWS = ('none', 'constant', 'inverse_radius')
SPLITS = {'train': 0, 'test': 1}
MAX_TRIES = 100

UNIT_SQUARE = AxisBox((-1.0, -1.0), (1.0, 1.0))


@dataclass(frozen=True)
class FamilySpec:
    name: str
    n_agents: int
    spatial_dim: int = 2
    domain: AxisBox = UNIT_SQUARE
    circle_radius: float = 0.5
    circle_height: float = 0.0
    starts: tuple | None = None
    targets: tuple | None = None
    perturbation_radius: float = 0.05
    fixed_positions: bool = False
    agent_radius: float = 0.02
    radius_range: tuple | None = None
    obstacles: tuple = ()
    obstacle_radius_range: tuple | None = None
    drag_law: str = 'constant'
    drag_coeff: float = 0.1
    cost: CostSpec = field(default_factory=CostSpec)
    horizon: float = 1.0
    train_count: int = 20
    test_count: int = 20
    seed: int = 0

    # Nominal layout

    def nominal_starts(self):
        if self.starts is not None:
            return np.array(self.starts, dtype=np.float64)
        angles = 2.0 * math.pi * np.arange(self.n_agents) / self.n_agents
        pts = self.circle_radius * np.stack([np.cos(angles), np.sin(angles)], axis=-1)
        if self.spatial_dim == 3:
            pts = np.concatenate([pts, np.full((self.n_agents, 1), self.circle_height)], axis=-1)
        return pts

    def nominal_targets(self):
        if self.targets is not None:
            return np.array(self.targets, dtype=np.float64)
        starts = self.nominal_starts()
        targets = -starts
        if self.spatial_dim == 3:
            targets[:, 2] = starts[:, 2]
        return targets

    def max_radius(self):
        return self.radius_range[1] if self.radius_range else self.agent_radius

    def feasibility_bound(self):
        """Half the smallest nominal start gap after removing radii"""
        starts = self.nominal_starts()
        r = self.max_radius()
        gaps = [np.linalg.norm(starts[i] - starts[j]) - 2 * r
                for i in range(len(starts)) for j in range(i + 1, len(starts))]
        return 0.5 * min(gaps) if gaps else math.inf

    def perturbs_positions(self):
        return not self.fixed_positions and self.perturbation_radius > 0

    def count(self, split):
        return self.train_count if split == 'train' else self.test_count

    # Conditioning layout

    def theta_layout(self):
        """(label, lower, upper) per encoded component, in declared order"""
        layout = []
        if self.perturbs_positions():
            nominal = self.nominal_starts()
            pr = self.perturbation_radius
            for i in range(self.n_agents):
                for c in range(self.spatial_dim):
                    layout.append((f'x0[{i}][{c}]', nominal[i, c] - pr, nominal[i, c] + pr))
        if self.obstacle_radius_range:
            layout.append(('obstacle_radius', *self.obstacle_radius_range))
        if self.radius_range:
            for i in range(self.n_agents):
                layout.append((f'radius[{i}]', *self.radius_range))
        return layout

    @property
    def theta_dim(self):
        return len(self.theta_layout())

    # Serialization

    def to_dict(self):
        data = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == 'domain':
                value = value.to_dict()
            elif f.name == 'obstacles':
                value = [o.to_dict() for o in value]
            elif f.name == 'cost':
                value = value.to_dict()
            elif isinstance(value, tuple):
                value = json.loads(json.dumps(value))
            data[f.name] = value
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise FamilySpecError(f"Unknown family fields: {sorted(unknown)}")
        if 'domain' in data:
            data['domain'] = obstacle_from_dict({**data['domain'], 'type': 'box'})
        if 'obstacles' in data:
            data['obstacles'] = tuple(obstacle_from_dict(o) for o in data['obstacles'])
        if 'cost' in data:
            data['cost'] = CostSpec.from_dict(data['cost'])
        for key in ('starts', 'targets'):
            if data.get(key) is not None:
                data[key] = tuple(tuple(float(v) for v in p) for p in data[key])
        for key in ('radius_range', 'obstacle_radius_range'):
            if data.get(key) is not None:
                data[key] = tuple(float(v) for v in data[key])
        return cls(**data)

    def digest(self):
        """sha256 of the canonical JSON form"""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def load_maze(path=None):
    with open(path or Config.MAZE_FILE, 'r') as f:
        return json.load(f)


def _free_defaults(N):
    radius = 0.016 if N >= 32 else 0.02
    perturbation = {56: 0.04, 64: 0.025}.get(N, 0.05)
    return {'agent_radius': radius, 'perturbation_radius': perturbation}


def _defaults(name, N):
    if name == 'free':
        return _free_defaults(N)
    if name == 'obstacle':
        return {
            'agent_radius': 0.016 if N >= 56 else 0.02,
            'perturbation_radius': 0.10 if N <= 8 else (0.05 if N <= 16 else 0.025),
            'obstacles': (Circle((0.0, 0.0), 0.15),),
        }
    if name == 'maze':
        maze = load_maze()
        if N != len(maze['starts']):
            raise FamilySpecError(f"Shipped maze has {len(maze['starts'])} agents, requested {N}")
        return {
            'domain': obstacle_from_dict({**maze['domain'], 'type': 'box'}),
            'obstacles': tuple(obstacle_from_dict(w) for w in maze['walls']),
            'starts': tuple(tuple(p) for p in maze['starts']),
            'targets': tuple(tuple(p) for p in maze['targets']),
            'agent_radius': maze['agent_radius'],
            'perturbation_radius': maze['perturbation_radius'],
            'horizon': maze.get('horizon', 1.0),
        }
    if name == 'variable_radius_obstacle':
        return {
            'fixed_positions': True,
            'obstacles': (Circle((0.0, 0.0), 0.15),),
            'obstacle_radius_range': (0.05, 0.25),
            'train_count': 50,
            'test_count': 50,
        }
    if name == 'heterogeneous_2d':
        return {
            'fixed_positions': True,
            'radius_range': (0.01, 0.10) if N == 4 else (0.01, 0.05),
            'obstacles': (Circle((0.0, 0.0), 0.15),),
            'drag_law': 'inverse_radius',
            'train_count': 50,
            'test_count': 50,
        }
    if name == 'heterogeneous_3d':
        return {
            'spatial_dim': 3,
            'domain': AxisBox((-6.0, -6.0, 0.0), (6.0, 6.0, 8.0)),
            'circle_radius': 5.0,
            'circle_height': 3.5,
            'fixed_positions': True,
            'radius_range': (0.1, 0.2),
            'obstacles': (AxisBox((-2.0, -0.5, 0.0), (2.0, 0.5, 7.0)),
                          AxisBox((2.0, -1.0, 0.0), (4.0, 1.0, 4.0))),
            'drag_law': 'none',
            'drag_coeff': 0.0,
            'cost': CostSpec(velocity_weight=0.0, control_weight=0.5),
            'train_count': 50,
            'test_count': 50,
        }
    raise FamilySpecError(f"Unknown family {name!r}; expected one of {FAMILIES}")


def make_family(name, N, overrides=None):
    """Family with the published defaults, then overrides applied"""
    spec = FamilySpec(name=name, n_agents=N, **_defaults(name, N))
    overrides = dict(overrides or {})
    if overrides:
        known = {f.name for f in fields(FamilySpec)}
        unknown = set(overrides) - known
        if unknown:
            raise FamilySpecError(f"Unknown family overrides: {sorted(unknown)}")
        converted = FamilySpec.from_dict({**spec.to_dict(), **overrides})
        spec = replace(spec, **{k: getattr(converted, k) for k in overrides})

    if spec.drag_law not in DRAG_LAWS:
        raise FamilySpecError(f"Unknown drag law {spec.drag_law!r}")

    bound = spec.feasibility_bound()
    if spec.perturbs_positions() and spec.perturbation_radius >= bound:
        if 'perturbation_radius' in overrides:
            raise FamilySpecError(
                f"perturbation_radius {spec.perturbation_radius} exceeds feasibility bound {bound:.4g}")
        clipped = 0.9 * bound
        logging.warning(f"[GEN] ⚠ Perturbation {spec.perturbation_radius} clipped to {clipped:.4g} for N={N}")
        spec = replace(spec, perturbation_radius=clipped)
    return spec


def _ball(rng, dim, radius, count):
    """Uniform samples in a dim-ball: normalized Gaussian direction, radius * U^(1/dim)"""
    direction = rng.standard_normal((count, dim))
    direction /= np.linalg.norm(direction, axis=-1, keepdims=True)
    scale = radius * rng.uniform(size=(count, 1)) ** (1.0 / dim)
    return direction * scale


def _drag(family, radius):
    if family.drag_law == 'inverse_radius':
        return 1.0 / (50.0 * radius)
    if family.drag_law == 'constant':
        return family.drag_coeff
    return 0.0


def build_instance(family, starts, radii=None, obstacle_radius=None, seed=0):
    """Instance from explicit parameters (rest-to-rest, nominal targets)"""
    d = family.spatial_dim
    N = family.n_agents
    radii = np.full(N, family.agent_radius) if radii is None else np.asarray(radii, dtype=np.float64)
    agents = tuple(AgentSpec(float(r), float(_drag(family, r)), 2 * d) for r in radii)

    obstacles = family.obstacles
    if obstacle_radius is not None:
        first = obstacles[0]
        obstacles = (Circle(first.center, float(obstacle_radius)),) + tuple(obstacles[1:])

    env = EnvironmentSpec(family.domain, tuple(obstacles), d)
    zeros = np.zeros((N, d))
    x0 = np.concatenate([np.asarray(starts, dtype=np.float64), zeros], axis=-1)
    xT = np.concatenate([family.nominal_targets(), zeros], axis=-1)
    return ProblemInstance(family.name, agents, env, x0, xT, family.horizon, int(seed), family.cost)


def nominal_instance(family):
    radii = None
    if family.radius_range:
        radii = np.full(family.n_agents, 0.5 * sum(family.radius_range))
    obstacle_radius = 0.5 * sum(family.obstacle_radius_range) if family.obstacle_radius_range else None
    return build_instance(family, family.nominal_starts(), radii, obstacle_radius, family.seed)


def instance_seed(family, split, index):
    """Per-instance seed derived from (master seed, split, index)"""
    sequence = np.random.SeedSequence([family.seed, SPLITS[split], index])
    return int(sequence.generate_state(1)[0])


def sample_instance(family, split, index):
    """Deterministic draw from (seed, split, index), rejection-resampled until valid"""
    if split not in SPLITS:
        raise FamilySpecError(f"Unknown split {split!r}")
    if not 0 <= index < family.count(split):
        raise FamilySpecError(f"Index {index} outside {split} split of size {family.count(split)}")

    rng = np.random.default_rng([family.seed, SPLITS[split], index])
    N, d = family.n_agents, family.spatial_dim
    last = []
    for _ in range(MAX_TRIES):
        starts = family.nominal_starts()
        if family.perturbs_positions():
            starts = starts + _ball(rng, d, family.perturbation_radius, N)
        radii = rng.uniform(*family.radius_range, size=N) if family.radius_range else None
        obstacle_radius = rng.uniform(*family.obstacle_radius_range) if family.obstacle_radius_range else None

        inst = build_instance(family, starts, radii, obstacle_radius, seed=instance_seed(family, split, index))
        last = validate_instance(inst)
        if not last:
            return inst
    raise RejectionBudgetError(
        f"{family.name} {split}[{index}]: no valid instance in {MAX_TRIES} tries; last: {[str(v) for v in last]}")


def sample_split(family, split):
    return [sample_instance(family, split, i) for i in range(family.count(split))]


# Conditioning input

def _raw_theta(inst, family):
    values = []
    if family.perturbs_positions():
        values.extend(inst.start_positions().reshape(-1))
    if family.obstacle_radius_range:
        values.append(inst.env.obstacles[0].radius)
    if family.radius_range:
        values.extend(inst.radii)
    return np.asarray(values, dtype=np.float64)


def encode_theta(inst, family):
    """Family-varied parameters mapped affinely to [-1, 1] by the declared bounds"""
    if inst.family_id != family.name or inst.n_agents != family.n_agents \
            or inst.spatial_dim != family.spatial_dim:
        raise ThetaEncodingError(
            f"Instance ({inst.family_id}, N={inst.n_agents}) does not belong to family "
            f"({family.name}, N={family.n_agents})")
    if family.obstacle_radius_range and not (inst.env.obstacles and isinstance(inst.env.obstacles[0], Circle)):
        raise ThetaEncodingError("Variable-radius family needs a circular first obstacle")
    layout = family.theta_layout()
    raw = _raw_theta(inst, family)
    lo = np.array([b[1] for b in layout])
    hi = np.array([b[2] for b in layout])
    return 2.0 * (raw - lo) / (hi - lo) - 1.0


def decode_theta(theta, family):
    """Inverse of encode_theta, as raw named parameters"""
    layout = family.theta_layout()
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (len(layout),):
        raise ThetaEncodingError(f"Expected theta of length {len(layout)}, got {theta.shape}")
    lo = np.array([b[1] for b in layout])
    hi = np.array([b[2] for b in layout])
    raw = lo + (theta + 1.0) * (hi - lo) / 2.0

    out, cursor = {}, 0
    if family.perturbs_positions():
        size = family.n_agents * family.spatial_dim
        out['starts'] = raw[:size].reshape(family.n_agents, family.spatial_dim)
        cursor = size
    if family.obstacle_radius_range:
        out['obstacle_radius'] = float(raw[cursor])
        cursor += 1
    if family.radius_range:
        out['radii'] = raw[cursor:cursor + family.n_agents]
    return out


# Corridor homotopy signature

def corridor_crossings(path, family):
    """Per agent, the ordered (wall, direction, through_gap) midline crossings of a planar path"""
    path = np.asarray(path, dtype=np.float64)
    walls = [o for o in family.obstacles if isinstance(o, AxisBox)]
    signature = []
    for i in range(path.shape[1]):
        events = []
        track = path[:, i, :2]
        for j in range(1, track.shape[0]):
            for k, wall in enumerate(walls):
                lo, hi = np.asarray(wall.min_corner[:2]), np.asarray(wall.max_corner[:2])
                axis = 1 if (hi[0] - lo[0]) >= (hi[1] - lo[1]) else 0
                mid = 0.5 * (lo[axis] + hi[axis])
                before, after = track[j - 1, axis] - mid, track[j, axis] - mid
                if before * after < 0 or (before != 0 and after == 0):
                    frac = before / (before - after)
                    cross = track[j - 1] + frac * (track[j] - track[j - 1])
                    along = 1 - axis
                    through_gap = not (lo[along] <= cross[along] <= hi[along])
                    events.append((k, 1 if after > before else -1, through_gap))
        signature.append(tuple(events))
    return signature


# Published per-scenario training settings

def scenario_presets(name, N):
    """Config blocks (train / decoder / latent / pretrain) used for each scenario"""
    anneal = {'eps0': 0.1, 'ell0': 0.1, 'rho_eps': 0.6, 'rho_ell': 0.6, 'period_steps': 20}
    fixed = {'eps': 1e-4, 'ell': 1e-4}
    latent = {'variant': 'lqr_rotation', 'C_B': math.pi / 20, 'C_Q': 1.0}
    train = {'adam_steps': 150, 'lbfgs_steps': 100, 'weight_decay': 0.0}
    decoder = {'layers': 3, 'cond_width': 8}
    pretrain = None

    if name == 'free':
        c_q = {4: 1.0, 8: 0.1, 16: 0.05}.get(N, 0.001)
        latent = {'variant': 'lqr_rotation', 'C_B': math.pi / (10 if N >= 32 else 20), 'C_Q': c_q}
        train['weight_decay'] = 5e-5 if N == 16 else 1e-6
        if N >= 32:
            train.update(adam_steps=100, lbfgs_steps=100, anneal=anneal)
        else:
            train['anneal'] = fixed
    elif name == 'obstacle':
        if N >= 56:
            train.update(adam_steps=100, lbfgs_steps=50 if N == 56 else 30, anneal=anneal, weight_decay=1e-6)
        elif N == 32:
            train.update(lbfgs_steps=50, anneal={'eps': 1e-3, 'ell': 1e-3}, weight_decay=1e-5)
        else:
            train.update(lbfgs_steps=200, anneal=fixed)
    elif name == 'maze':
        latent = {'variant': 'lqr', 'C_B': 0.0, 'C_Q': 0.0}
        train['anneal'] = fixed if N <= 4 else {'eps': 1e-3, 'ell': 1e-3}
        pretrain = {'steps': 500}
    elif name == 'variable_radius_obstacle':
        latent = {'variant': 'lqr_rotation', 'C_B': -math.pi / 20, 'C_Q': 1.0}
        train.update(adam_steps=100, lbfgs_steps=200, anneal=anneal)
        decoder['cond_width'] = 16 if N >= 16 else 8
    elif name == 'heterogeneous_2d':
        train.update(adam_steps=100, lbfgs_steps={4: 100, 8: 200}.get(N, 250))
        train['anneal'] = anneal if N <= 8 else {**anneal, 'eps0': 0.01, 'ell0': 0.01, 'rho_eps': 0.8, 'rho_ell': 0.8}
        decoder['cond_width'] = 64
    elif name == 'heterogeneous_3d':
        latent = {'variant': 'lqr', 'C_B': 0.0, 'C_Q': 0.0}
        train.update(adam_steps=100, lbfgs_steps=50,
                     anneal={'eps0': 5e-2, 'ell0': 5e-3, 'rho_eps': 0.8, 'rho_ell': 0.8, 'period_steps': 100})
        decoder['cond_width'] = 32
    else:
        raise FamilySpecError(f"Unknown family {name!r}")

    blocks = {'family': {'name': name, 'N': N}, 'train': train, 'decoder': decoder, 'latent': latent}
    if pretrain:
        blocks['pretrain'] = pretrain
    return blocks
