"""
Invariant Check Module
Fast property suite run by `app.py check`: symplecticity, endpoints, latent exactness,
gradients, file formats and sampler determinism
"""

import logging
import math
import os
import tempfile
import time
from dataclasses import dataclass

import numpy as np
import torch

from modules.eikonal_ref import solve_eikonal
from modules.evaluation import minimal_energy_cost, running_cost
from modules.hamiltonian import BarrierParams, hamiltonian_grads, hamiltonian_value
from modules.latent_solver import (LatentConfig, build_latent_matrix, integrate_rk4, latent_energy,
                                   latent_matrices, solve_latent_bvp)
from modules.persistence import load_checkpoint, save_checkpoint
from modules.phase_core import (AgentSpec, AxisBox, CostSpec, EnvironmentSpec, PhaseTrajectory, ProblemInstance,
                                TimeGrid, validate_instance)
from modules.scenario_gen import UNIT_SQUARE, make_family, sample_instance
from modules.symplectic_decoder import (DecoderConfig, SymplecticDecoder, decoder_forward, decoder_jacobian,
                                        randomize_weights, symplectic_defect)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def rest_to_rest_1d():
    """Single 1D agent moving 0 -> 1 between rest states, no drag, no velocity cost"""
    agent = AgentSpec(radius=0.01, drag_coeff=0.0, state_dim=2)
    env = EnvironmentSpec(AxisBox((-2.0,), (2.0,)), (), 1)
    return ProblemInstance('line', (agent,), env, np.array([[0.0, 0.0]]), np.array([[1.0, 0.0]]),
                           cost=CostSpec(0.0, 1.0))


def check_decoder_symplectic(samples=20, seed=0):
    cfg = DecoderConfig(layers=3, cond_width=8, theta_dim=3)
    decoder = randomize_weights(SymplecticDecoder(cfg, n_agents=2, dx=4, horizon=1.0, seed=seed), 0.25, seed)
    rng = np.random.default_rng(seed)
    worst_defect = worst_det = 0.0
    for _ in range(samples):
        jac = decoder_jacobian(decoder, rng.uniform(-1, 1, 3), rng.uniform(0, 1), rng.normal(size=16))
        worst_defect = max(worst_defect, symplectic_defect(jac))
        worst_det = max(worst_det, abs(np.linalg.det(jac) - 1.0))
    return worst_defect < 1e-6 and worst_det < 1e-6, f"defect {worst_defect:.2e}, |det-1| {worst_det:.2e}"


def check_endpoints(samples=20, seed=1):
    cfg = DecoderConfig(layers=3, cond_width=8, theta_dim=2)
    decoder = randomize_weights(SymplecticDecoder(cfg, n_agents=2, dx=4, horizon=1.0, seed=seed), 0.25, seed)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(samples):
        z = rng.normal(size=16)
        theta = rng.uniform(-1, 1, 2)
        for t in (0.0, 1.0):
            x, _ = decoder_forward(decoder, theta, t, z)
            worst = max(worst, float(np.abs(x.numpy() - z[:8]).max()))
    return worst < 1e-14, f"max endpoint drift {worst:.2e}"


def check_latent_exactness():
    inst = rest_to_rest_1d()
    grid = TimeGrid.uniform(1.0, 101)
    latent = solve_latent_bvp(inst, LatentConfig(), grid)
    t = grid.times
    closed = 3 * t ** 2 - 2 * t ** 3
    shape_error = float(np.abs(latent.y[:, 0, 0] - closed).max())

    family = make_family('free', 2)
    planar = sample_instance(family, 'train', 0)
    cfg = LatentConfig('lqr_rotation', math.pi / 20, 1.0)
    latent2 = solve_latent_bvp(planar, cfg, grid)
    energy = latent_energy(latent2, latent_matrices(planar, cfg))
    drift = float(np.abs(energy - energy[0]).max())

    H = build_latent_matrix(planar.agents[0], cfg)
    rk4 = integrate_rk4(H, latent2.z()[0, 0], t, 1e-4)
    rk_error = float(np.abs(rk4 - latent2.z()[:, 0]).max())
    ok = shape_error < 1e-6 and drift < 1e-9 and rk_error < 1e-6
    return ok, f"3t^2-2t^3 error {shape_error:.1e}, energy drift {drift:.1e}, RK4 gap {rk_error:.1e}"


def check_cost_oracle():
    inst = rest_to_rest_1d()
    cost = minimal_energy_cost(inst, TimeGrid.uniform(1.0, 2001))
    return abs(cost - 12.0) < 1e-4, f"rest-to-rest cost {cost:.6f} (exact 12)"


def check_hamiltonian_gradients(seed=2):
    family = make_family('obstacle', 2)
    inst = sample_instance(family, 'train', 0)
    rng = np.random.default_rng(seed)
    x = torch.as_tensor(np.concatenate([inst.start_positions(), rng.normal(size=(2, 2))], -1))
    p = torch.as_tensor(rng.normal(size=(2, 4)))
    bp = BarrierParams(0.5, 0.5)
    gx, gp = hamiltonian_grads(inst, x, p, bp)
    h = 1e-5
    worst = 0.0
    for target, grad in ((x, gx), (p, gp)):
        for idx in np.ndindex(*target.shape):
            up, down = target.clone(), target.clone()
            up[idx] += h
            down[idx] -= h
            if target is x:
                fd = (hamiltonian_value(inst, up, p, bp) - hamiltonian_value(inst, down, p, bp)) / (2 * h)
            else:
                fd = (hamiltonian_value(inst, x, up, bp) - hamiltonian_value(inst, x, down, bp)) / (2 * h)
            g = float(grad[idx])
            worst = max(worst, abs(g - float(fd)) / max(abs(g), 1e-8))
    return worst < 1e-6, f"max relative error {worst:.2e}"


def check_checkpoint_roundtrip(seed=3):
    weights = np.random.default_rng(seed).normal(size=257)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, 'roundtrip.pisn')
        save_checkpoint(path, weights, {'check': True})
        loaded, meta = load_checkpoint(path)
    same = loaded.tobytes() == weights.astype('<f8').tobytes() and meta == {'check': True}
    return same, "bit-identical" if same else "weights or metadata differ"


def check_sampler():
    family = make_family('free', 4)
    a = sample_instance(family, 'test', 3)
    b = sample_instance(family, 'test', 3)
    c = sample_instance(family, 'train', 3)
    same = np.array_equal(a.x0, b.x0) and not np.array_equal(a.x0, c.x0)
    valid = not validate_instance(a) and not validate_instance(c)
    return same and valid, "deterministic, disjoint splits, valid" if same and valid else "sampler mismatch"


def check_running_cost():
    inst = rest_to_rest_1d()
    grid = TimeGrid.uniform(1.0, 5)
    traj = PhaseTrajectory(grid, np.zeros((5, 1, 2)), np.zeros((5, 1, 2)))
    cost = running_cost(traj, inst)
    return cost == 0.0, f"stationary cost {cost}"


def check_eikonal(spacing=0.05):
    env = EnvironmentSpec(UNIT_SQUARE, (), 2)
    field = solve_eikonal(env, (0.0, 0.0), spacing)
    xs, ys = field.axes
    X, Y = np.meshgrid(xs, ys, indexing='ij')
    error = float(np.abs(field.values - np.hypot(X, Y)).max())
    return error < 2 * spacing, f"free-space error {error:.4f} (h = {spacing})"


CHECKS = (
    ('decoder symplecticity', check_decoder_symplectic),
    ('endpoint preservation', check_endpoints),
    ('latent exactness', check_latent_exactness),
    ('minimal-energy oracle', check_cost_oracle),
    ('hamiltonian gradients', check_hamiltonian_gradients),
    ('checkpoint round trip', check_checkpoint_roundtrip),
    ('sampler determinism', check_sampler),
    ('stationary running cost', check_running_cost),
    ('eikonal free space', check_eikonal),
)


def run_invariant_suite(checks=CHECKS):
    results = []
    for name, fn in checks:
        started = time.perf_counter()
        try:
            passed, detail = fn()
        except Exception as e:
            logging.error(f"[CHECK] {name} raised: {e}", exc_info=True)
            passed, detail = False, f"raised {type(e).__name__}: {e}"
        results.append(CheckResult(name, bool(passed), detail, time.perf_counter() - started))
    return results
