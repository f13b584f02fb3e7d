"""
Latent Solver Module
Per-agent linear Hamiltonian priors solved exactly with matrix exponentials
"""

import logging
import os
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg

from modules.error_handler import ConjugatePointError, UnsupportedVariantError
from modules.phase_core import LatentTrajectory

VARIANTS = ('lqr', 'lqr_rotation', 'lqr_composed')
CONDITION_LIMIT = 1e12


@dataclass(frozen=True)
class LatentConfig:
    variant: str = 'lqr'
    C_B: float = 0.0
    C_Q: float = 0.0
    composed_checkpoint: str | None = None

    def validate(self):
        problems = []
        if self.variant not in VARIANTS:
            problems.append(f"unknown latent variant {self.variant!r}")
        if not self.C_Q >= 0:
            problems.append(f"C_Q must be >= 0, got {self.C_Q}")
        if self.variant == 'lqr_composed' and not self.composed_checkpoint:
            problems.append("lqr_composed requires composed_checkpoint")
        return problems

    @property
    def rotation(self):
        return self.C_B if self.variant in ('lqr_rotation', 'lqr_composed') else 0.0

    def to_dict(self):
        return {'variant': self.variant, 'C_B': self.C_B, 'C_Q': self.C_Q,
                'composed_checkpoint': self.composed_checkpoint}

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - {'variant', 'C_B', 'C_Q', 'composed_checkpoint'}
        if unknown:
            raise ValueError(f"Unknown latent config keys: {sorted(unknown)}")
        return cls(**data)


def symplectic_form(dim):
    """J = [[0, I], [-I, 0]] for a 2*dim phase space"""
    eye = np.eye(dim)
    zero = np.zeros((dim, dim))
    return np.block([[zero, eye], [-eye, zero]])


def build_latent_matrix(agent, cfg, control_weight=1.0):
    """H_i = [[A, C], [Q, -A^T]] with A = [[0, I], [0, Omega]]"""
    dx = agent.state_dim
    d = dx // 2
    omega = np.zeros((d, d))
    if cfg.rotation != 0.0 or cfg.variant == 'lqr_rotation':
        if d != 2:
            raise UnsupportedVariantError(f"Rotation prior needs a planar agent, got spatial_dim={d}")
        omega = np.array([[0.0, -cfg.C_B], [cfg.C_B, 0.0]])

    zero = np.zeros((d, d))
    eye = np.eye(d)
    A = np.block([[zero, eye], [zero, omega]])
    C = np.block([[zero, zero], [zero, eye / (2.0 * control_weight)]])
    Q = np.block([[zero, zero], [zero, cfg.C_Q * eye]])
    return np.block([[A, C], [Q, -A.T]])


def matrix_exponential(M, t=1.0):
    """exp(tM), scaling and squaring with a degree-13 Pade approximant"""
    M = np.asarray(M, dtype=np.float64)
    if not (np.all(np.isfinite(M)) and np.isfinite(t)):
        raise ValueError("matrix_exponential: non-finite input")
    return scipy.linalg.expm(t * M)


@lru_cache(maxsize=64)
def _flow_stack(matrix_bytes, dim, times_bytes):
    matrix = np.frombuffer(matrix_bytes, dtype=np.float64).reshape(dim, dim)
    times = np.frombuffer(times_bytes, dtype=np.float64)
    flows = scipy.linalg.expm(times[:, None, None] * matrix)
    flows.setflags(write=False)
    return flows


def flow_stack(matrix, times):
    """exp(t_j H) for every grid time, shared across instances with the same H"""
    matrix = np.ascontiguousarray(matrix, dtype=np.float64)
    times = np.ascontiguousarray(times, dtype=np.float64)
    return _flow_stack(matrix.tobytes(), matrix.shape[0], times.tobytes())


def _solve_pivoted(matrix, rhs):
    q, r, perm = scipy.linalg.qr(matrix, pivoting=True)
    sol = np.empty_like(rhs)
    sol[perm] = scipy.linalg.solve_triangular(r, q.T @ rhs)
    return sol


def latent_matrices(inst, cfg):
    c_u = inst.cost.control_weight
    return [build_latent_matrix(agent, cfg, c_u) for agent in inst.agents]


def solve_latent_bvp(inst, cfg, grid, matrices=None):
    """Fixed-endpoint latent trajectory y(0) = x0, y(T) = xT per agent"""
    matrices = matrices if matrices is not None else latent_matrices(inst, cfg)
    times = grid.times
    horizon = inst.horizon
    Nt, N, dx = times.shape[0], inst.n_agents, inst.dx

    z = np.empty((Nt, N, 2 * dx))
    zdot = np.empty_like(z)
    for i, H in enumerate(matrices):
        flows = flow_stack(H, times)
        M = flows[-1] if times[-1] == horizon else matrix_exponential(H, horizon)
        M_yy, M_yq = M[:dx, :dx], M[:dx, dx:]

        condition = np.linalg.cond(M_yq)
        if not condition <= CONDITION_LIMIT:
            raise ConjugatePointError(i, condition)

        q0 = _solve_pivoted(M_yq, inst.xT[i] - M_yy @ inst.x0[i])
        z0 = np.concatenate([inst.x0[i], q0])
        z[:, i] = flows @ z0
        zdot[:, i] = z[:, i] @ H.T

    latent = LatentTrajectory(grid, z[..., :dx], z[..., dx:], zdot[..., :dx], zdot[..., dx:])

    if cfg.variant == 'lqr_composed':
        latent = compose_pretrained(latent, cached_pretrained(cfg.composed_checkpoint))
    return latent


def latent_energy(traj, matrices):
    """H~(y, q) summed over agents at every sample"""
    dx = traj.y.shape[-1]
    energy = np.zeros(traj.y.shape[0])
    for i, H in enumerate(matrices):
        A, C, Q = H[:dx, :dx], H[:dx, dx:], H[dx:, :dx]
        y, q = traj.y[:, i], traj.q[:, i]
        energy += (np.einsum('tj,jk,tk->t', q, A, y)
                   - 0.5 * np.einsum('tj,jk,tk->t', y, Q, y)
                   + 0.5 * np.einsum('tj,jk,tk->t', q, C, q))
    return energy


def integrate_rk4(matrix, z0, times, dt):
    """Classical RK4 for z' = H z, sampled at the given times"""
    out = np.empty((len(times), len(z0)))
    z = np.array(z0, dtype=np.float64)
    t = 0.0
    for j, target in enumerate(times):
        while t < target - 1e-15:
            h = min(dt, target - t)
            k1 = matrix @ z
            k2 = matrix @ (z + 0.5 * h * k1)
            k3 = matrix @ (z + 0.5 * h * k2)
            k4 = matrix @ (z + h * k3)
            z = z + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            t += h
        out[j] = z
    return out


@dataclass
class PretrainedDecoder:
    decoder: object
    theta: np.ndarray
    metadata: dict = field(default_factory=dict)


def cached_pretrained(path):
    """Pretrained decoder for a checkpoint, reloaded only when the file changes"""
    stat = os.stat(path)
    return _load_pretrained(path, stat.st_mtime_ns, stat.st_size)


@lru_cache(maxsize=8)
def _load_pretrained(path, mtime_ns, size):
    from modules.persistence import load_pretrained
    return load_pretrained(path)


def compose_pretrained(latent, pretrained):
    """Push the latent trajectory through a single-instance decoder

    Velocities become D(Phi) zdot + dPhi/dt, not H z.
    """
    import torch
    from modules.error_handler import CheckpointMismatchError
    from modules.symplectic_decoder import from_decoder_layout, to_decoder_layout

    decoder = pretrained.decoder
    N, dx = latent.y.shape[1], latent.y.shape[2]
    if decoder.n_agents != N or decoder.dx != dx:
        raise CheckpointMismatchError(
            f"Pretrained decoder is for N={decoder.n_agents}, dx={decoder.dx}; latent has N={N}, dx={dx}")

    times = torch.as_tensor(latent.grid.times)
    z = to_decoder_layout(latent.y, latent.q).unsqueeze(0)
    zdot = to_decoder_layout(latent.ydot, latent.qdot).unsqueeze(0)
    theta = torch.as_tensor(np.asarray(pretrained.theta, dtype=np.float64)).reshape(1, -1)

    with torch.no_grad():
        out, vel = decoder.forward_with_velocity(theta, times, z, zdot)

    y, q = from_decoder_layout(out[0], N, dx)
    ydot, qdot = from_decoder_layout(vel[0], N, dx)
    logging.info(f"[LATENT] Composed latent through pretrained decoder ({N} agents)")
    return LatentTrajectory(latent.grid, y, q, ydot, qdot)
