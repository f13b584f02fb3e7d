"""
Direct Transcription Module
Trapezoidal collocation + SLSQP reference solver for comparing costs
"""

import logging
import time
from dataclasses import dataclass

import numpy as np
import torch
from scipy import optimize

from modules.geometry import as_tensor
from modules.hamiltonian import PhysicsModel
from modules.latent_solver import LatentConfig, solve_latent_bvp
from modules.phase_core import PhaseTrajectory, TimeGrid


@dataclass
class OracleResult:
    trajectory: PhaseTrajectory
    controls: np.ndarray
    cost: float
    success: bool
    message: str
    iterations: int
    wall_clock: float


class TranscribedProblem:
    """Decision vector = interior states (K-1, N, dx) then controls (K+1, N, d)"""

    def __init__(self, inst, grid):
        self.inst = inst
        self.grid = grid
        self.model = PhysicsModel(inst)
        self.K = grid.count - 1
        self.N, self.dx = inst.n_agents, inst.dx
        self.d = self.dx // 2
        self.h = as_tensor(np.diff(grid.times)).reshape(-1, 1, 1)
        self.x0 = as_tensor(inst.x0)
        self.xT = as_tensor(inst.xT)
        self.n_state = (self.K - 1) * self.N * self.dx
        self.n_control = (self.K + 1) * self.N * self.d

    def unpack(self, z):
        z = as_tensor(z)
        inner = z[:self.n_state].reshape(self.K - 1, self.N, self.dx)
        x = torch.cat([self.x0[None], inner, self.xT[None]], dim=0)
        u = z[self.n_state:].reshape(self.K + 1, self.N, self.d)
        return x, u

    def pack(self, x, u):
        return np.concatenate([np.asarray(x)[1:-1].ravel(), np.asarray(u).ravel()])

    def _rate(self, x, u):
        v = x[..., self.d:]
        c = self.inst.cost
        return (c.velocity_weight * (v * v).sum(-1) + c.control_weight * (u * u).sum(-1)).sum(-1)

    def cost(self, z):
        x, u = self.unpack(z)
        rate = self._rate(x, u)
        return (0.5 * self.h.reshape(-1) * (rate[1:] + rate[:-1])).sum()

    def defects(self, z):
        x, u = self.unpack(z)
        f = self.model.drift(x) + torch.cat([torch.zeros_like(u), u], dim=-1)
        return (x[1:] - x[:-1] - 0.5 * self.h * (f[1:] + f[:-1])).reshape(-1)

    def clearances(self, z):
        x, _ = self.unpack(z)
        return self.model.constraint_values(x[1:-1, :, :self.d]).reshape(-1)


def _numpy_pair(fn):
    def value(z):
        return fn(torch.as_tensor(z)).detach().numpy()

    def jacobian(z):
        return torch.autograd.functional.jacobian(fn, torch.as_tensor(z)).numpy()
    return value, jacobian


def initial_guess(inst, grid):
    """Latent prior trajectory with controls from its costate"""
    rotation = np.pi / 20 if inst.spatial_dim == 2 else 0.0
    variant = 'lqr_rotation' if rotation else 'lqr'
    latent = solve_latent_bvp(inst, LatentConfig(variant, rotation, 2.0 * inst.cost.velocity_weight), grid)
    d = inst.dx // 2
    return latent.y, latent.q[..., d:] / (2.0 * inst.cost.control_weight)


def solve_direct(inst, knots=31, max_iterations=500, tol=1e-9, initial=None):
    """Minimize the running cost subject to trapezoidal dynamics and node-wise clearance"""
    grid = TimeGrid.uniform(inst.horizon, knots)
    problem = TranscribedProblem(inst, grid)
    x_init, u_init = initial if initial is not None else initial_guess(inst, grid)
    z0 = problem.pack(x_init, u_init)

    def cost(z):
        return float(problem.cost(torch.as_tensor(z)))

    def cost_grad(z):
        zt = torch.as_tensor(z).clone().requires_grad_(True)
        problem.cost(zt).backward()
        return zt.grad.numpy()

    eq_fun, eq_jac = _numpy_pair(problem.defects)
    constraints = [{'type': 'eq', 'fun': eq_fun, 'jac': eq_jac}]
    if problem.model.n_constraints:
        ineq_fun, ineq_jac = _numpy_pair(problem.clearances)
        constraints.append({'type': 'ineq', 'fun': ineq_fun, 'jac': ineq_jac})

    started = time.perf_counter()
    result = optimize.minimize(cost, z0, jac=cost_grad, constraints=constraints, method='SLSQP',
                               options={'maxiter': max_iterations, 'ftol': tol})
    elapsed = time.perf_counter() - started

    x, u = problem.unpack(result.x)
    x, u = x.detach().numpy(), u.detach().numpy()
    p = np.concatenate([np.zeros_like(u), 2.0 * inst.cost.control_weight * u], axis=-1)
    traj = PhaseTrajectory(grid, x, p)
    level = logging.INFO if result.success else logging.WARNING
    logging.log(level, f"[ORACLE] {'✓' if result.success else '⚠'} SLSQP {result.message} "
                       f"({result.nit} iterations, cost {result.fun:.6f}, {elapsed:.1f}s)")
    return OracleResult(traj, u, float(result.fun), bool(result.success), str(result.message),
                        int(result.nit), elapsed)
