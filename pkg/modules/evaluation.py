"""
Evaluation Module
Running cost, dense-grid safety violation, pass rates, PMP residual summaries and oracle comparisons
"""

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.integrate import trapezoid

from modules.direct_transcription import solve_direct
from modules.error_handler import FamilySpecError
from modules.geometry import as_tensor, clearance_to_obstacles
from modules.hamiltonian import BarrierParams, PhysicsModel
from modules.latent_solver import LatentConfig, solve_latent_bvp
from modules.phase_core import PhaseTrajectory, TimeGrid
from modules.scenario_gen import build_instance
from modules.symplectic_decoder import from_decoder_layout
from modules.training import (PreparedBatch, TrainConfig, apply_delta, decoded_channels, prepare_batch,
                              prepare_instance, refine_instance, residuals_from_channels)

DEFAULT_BARRIER = BarrierParams(1e-4, 1e-4)


def running_cost(traj, inst):
    """Trapezoidal integral of sum_i c_v |v_i|^2 + c_u |u_i|^2, controls from the costate"""
    if traj.grid.count < 2:
        raise ValueError("running_cost needs at least 2 samples")
    d = inst.dx // 2
    v = traj.x[..., d:]
    u = traj.p[..., d:] / (2.0 * inst.cost.control_weight)
    rate = (inst.cost.velocity_weight * (v * v).sum(-1) + inst.cost.control_weight * (u * u).sum(-1)).sum(-1)
    return float(trapezoid(rate, traj.grid.times))


def interpolate_positions(traj, times):
    """Linear interpolant of positions at new times, (len(times), N, d)"""
    w = traj.positions()
    flat = w.reshape(w.shape[0], -1)
    out = np.stack([np.interp(times, traj.grid.times, flat[:, c]) for c in range(flat.shape[1])], axis=-1)
    return out.reshape((len(times),) + w.shape[1:])


def max_violation(positions, inst):
    """max over samples of max(0, -min_k h_k)"""
    values = PhysicsModel(inst).constraint_values(as_tensor(positions)).numpy()
    if values.shape[-1] == 0:
        return 0.0
    return float(np.maximum(0.0, -values.min(axis=-1)).max())


def safety_violation(traj, inst, refinement=10):
    """(max violation, pass flag) on the nested m-times refinement, linear interpolant between samples"""
    if refinement < 1:
        raise ValueError(f"refinement must be >= 1, got {refinement}")
    dense = traj.grid.nested_refinement(refinement)
    violation = max_violation(interpolate_positions(traj, dense.times), inst)
    return violation, violation == 0.0


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    wall_clock: float = 0.0
    label: str = ''

    @property
    def aggregates(self):
        return aggregate(self.rows)

    def to_dict(self):
        return {'label': self.label, 'rows': self.rows, 'aggregates': self.aggregates,
                'wall_clock': self.wall_clock}

    @classmethod
    def from_dict(cls, data):
        return cls(list(data.get('rows', [])), float(data.get('wall_clock', 0.0)), data.get('label', ''))


def aggregate(rows):
    total = len(rows)
    if not total:
        return {'total': 0, 'passed': 0, 'pass_rate': 0.0, 'avg_cost': 0.0,
                'avg_max_violation': 0.0, 'avg_residual': 0.0}
    passed = sum(1 for r in rows if r['passed'])
    return {
        'total': total,
        'passed': passed,
        'pass_rate': passed / total,
        'avg_cost': float(np.mean([r['cost'] for r in rows])),
        'avg_max_violation': float(np.mean([r['max_violation'] for r in rows])),
        'avg_residual': float(np.mean([r['residual'] for r in rows])),
    }


def _residual_rows(decoder, batch, bp):
    with torch.no_grad():
        x, p, xdot, pdot = decoded_channels(decoder, batch)
        out = []
        for b, item in enumerate(batch.items):
            r_x, r_p = residuals_from_channels(item.model, x[b], p[b], xdot[b], pdot[b], bp)
            out.append(float(((r_x * r_x).sum((-1, -2)) + (r_p * r_p).sum((-1, -2))).mean()))
    return out


def _dense_trajectories(decoder, batch):
    with torch.no_grad():
        out = decoder(batch.theta, batch.times, batch.z)
    x, p = from_decoder_layout(out, decoder.n_agents, decoder.dx)
    return [PhaseTrajectory(batch.grid, x[b], p[b]) for b in range(len(batch))]


def _row(index, inst, traj, residual):
    violation = max_violation(traj.positions(), inst)
    return {
        'index': index,
        'family_id': inst.family_id,
        'seed': inst.seed,
        'cost': running_cost(traj, inst),
        'max_violation': violation,
        'passed': violation == 0.0,
        'residual': residual,
    }


def evaluate_batch(instances, decoder, family, latent_cfg, refinement=10, collocation_count=64,
                   bp=None, refine_steps=0, label=''):
    """Batched inference on the dense grid, per-instance metrics and timing"""
    if not instances:
        return EvalReport(label=label)
    bp = bp or DEFAULT_BARRIER
    horizon = instances[0].horizon
    collocation = TimeGrid.uniform(horizon, collocation_count)
    dense = collocation.nested_refinement(refinement)

    started = time.perf_counter()
    dense_batch = prepare_batch(instances, family, latent_cfg, dense)
    trajectories = _dense_trajectories(decoder, dense_batch)
    wall_clock = time.perf_counter() - started

    residuals = _residual_rows(decoder, prepare_batch(instances, family, latent_cfg, collocation), bp)

    rows = []
    for index, inst in enumerate(instances):
        traj, residual = trajectories[index], residuals[index]
        if refine_steps:
            refined = refine_instance(inst, decoder, family, latent_cfg, refine_steps, bp, collocation,
                                      TrainConfig(weight_decay=0.0))
            local = apply_delta(decoder, refined.delta)
            item = dense_batch.items[index]
            single = PreparedBatch(dense, [item], item.theta[None], item.z[None], item.zdot[None])
            traj = _dense_trajectories(local, single)[0]
            residual = _residual_rows(local, _single(inst, family, latent_cfg, collocation), bp)[0]
            if refined.failed:
                logging.warning(f"[EVAL] ⚠ Refinement of instance {index} stopped early")
        rows.append(_row(index, inst, traj, residual))

    report = EvalReport(rows, wall_clock, label)
    agg = report.aggregates
    logging.info(f"[EVAL] {label or 'batch'}: {agg['passed']}/{agg['total']} passed, "
                 f"avg cost {agg['avg_cost']:.4f}, avg residual {agg['avg_residual']:.3e}, "
                 f"inference {wall_clock:.3f}s")
    return report


def _single(inst, family, latent_cfg, grid):
    item = prepare_instance(inst, family, latent_cfg, grid)
    return PreparedBatch(grid, [item], item.theta[None], item.z[None], item.zdot[None])


def decode_dense(inst, decoder, family, latent_cfg, grid):
    """PhaseTrajectory of one instance on the given grid"""
    return _dense_trajectories(decoder, _single(inst, family, latent_cfg, grid))[0]


def minimal_energy_cost(inst, grid):
    """Cost of the interaction-free optimum: the linear PMP system solved exactly"""
    cfg = LatentConfig('lqr', 0.0, 2.0 * inst.cost.velocity_weight)
    latent = solve_latent_bvp(inst, cfg, grid)
    return running_cost(PhaseTrajectory(grid, latent.y, latent.q), inst)


def format_table(reports):
    """Aligned text rows: split, pass, avg PMP residual, avg cost, avg max violation"""
    header = f"{'Split':<10} {'Pass':>9} {'Avg PMP':>12} {'Avg cost':>12} {'Avg max viol':>14}"
    lines = [header, '-' * len(header)]
    for name, report in reports.items():
        agg = report.aggregates
        lines.append(f"{name:<10} {agg['passed']:>4}/{agg['total']:<4} {agg['avg_residual']:>12.4e} "
                     f"{agg['avg_cost']:>12.6f} {agg['avg_max_violation']:>14.4e}")
    return '\n'.join(lines)


def compare_latent_variants(instances, decoder, family, variants, refinement=10, collocation_count=64, bp=None):
    """Evaluate one checkpoint under several latent priors, keyed by variant label"""
    results = {}
    for cfg in variants:
        key = cfg.variant if cfg.variant == 'lqr' else f"{cfg.variant}({cfg.C_B:g})"
        results[key] = evaluate_batch(instances, decoder, family, cfg, refinement, collocation_count, bp,
                                      label=key)
    return results



def oracle_cost_gap(instances, decoder, family, latent_cfg, count=3, knots=31, refinement=10,
                    collocation_count=64):
    """Decoded running cost against the direct-transcription optimum on the first `count` instances"""
    rows = []
    for index, inst in enumerate(instances[:count]):
        grid = TimeGrid.uniform(inst.horizon, collocation_count).nested_refinement(refinement)
        decoded = running_cost(decode_dense(inst, decoder, family, latent_cfg, grid), inst)
        oracle = solve_direct(inst, knots)
        rows.append({
            'index': index,
            'seed': inst.seed,
            'decoded_cost': decoded,
            'oracle_cost': oracle.cost,
            'relative_gap': _relative_gap(decoded, oracle.cost),
            'oracle_success': oracle.success,
        })

    decoded_mean = float(np.mean([r['decoded_cost'] for r in rows])) if rows else 0.0
    oracle_mean = float(np.mean([r['oracle_cost'] for r in rows])) if rows else 0.0
    gap = _relative_gap(decoded_mean, oracle_mean) if rows else 0.0
    logging.info(f"[EVAL] Oracle comparison on {len(rows)} instances: decoded {decoded_mean:.6f}, "
                 f"oracle {oracle_mean:.6f}, gap {gap:+.2%}")
    return {'rows': rows, 'mean_decoded_cost': decoded_mean, 'mean_oracle_cost': oracle_mean,
            'mean_relative_gap': gap}


def _relative_gap(value, reference):
    if reference > 0:
        return (value - reference) / reference
    return 0.0 if value == reference else math.inf


def clearance_vs_radius(decoder, family, latent_cfg, radii=(0.05, 0.15, 0.25), refinement=10,
                        collocation_count=64):
    """Minimum decoded clearance to the first obstacle at the nominal layout, one entry per obstacle radius"""
    if not family.obstacle_radius_range:
        raise FamilySpecError(f"{family.name} has no variable obstacle radius")
    radii = sorted(float(r) for r in radii)
    clearances = []
    for radius in radii:
        inst = build_instance(family, family.nominal_starts(), obstacle_radius=radius)
        grid = TimeGrid.uniform(inst.horizon, collocation_count).nested_refinement(refinement)
        traj = decode_dense(inst, decoder, family, latent_cfg, grid)
        clearance = clearance_to_obstacles(inst.env, traj.positions(), inst.radii)[..., 0]
        clearances.append(float(clearance.min()))

    positive = all(c > 0 for c in clearances)
    non_increasing = all(b <= a for a, b in zip(clearances, clearances[1:]))
    summary = ', '.join(f"r={r:g}: {c:.4f}" for r, c in zip(radii, clearances))
    logging.info(f"[EVAL] Clearance vs obstacle radius: {summary}")
    return {'radii': radii, 'clearance': clearances, 'positive': positive, 'non_increasing': non_increasing,
            'passed': positive and non_increasing}
