"""
Hamiltonian Module
Drag dynamics, collision constraints, smooth barrier, Pontryagin Hamiltonian and exact gradients
"""

from dataclasses import dataclass

import torch

from modules.geometry import DTYPE, as_tensor, distance_and_grad, safe_norm
from modules.phase_core import CostSpec  # noqa: F401  (re-exported)

DRAG_DELTA = 1e-8


@dataclass(frozen=True)
class BarrierParams:
    eps: float
    ell: float

    def is_valid(self):
        return self.eps > 0 and self.ell > 0

    def to_dict(self):
        return {'eps': self.eps, 'ell': self.ell}


def reg_norm(v):
    """sqrt(|v|^2 + delta^2) over the last axis, keepdim"""
    return torch.sqrt((v * v).sum(-1, keepdim=True) + DRAG_DELTA ** 2)


def barrier(h, bp):
    """U = (ell/eps) * sum_k log(1 + exp(-h_k/ell)), summed over the last axis"""
    h = as_tensor(h)
    z = -h / bp.ell
    return (bp.ell / bp.eps) * torch.logaddexp(torch.zeros_like(z), z).sum(-1)


def barrier_slope(h, bp):
    """dU/dh_k, strictly negative"""
    return -torch.sigmoid(-h / bp.ell) / bp.eps


class PhysicsModel:
    """Per-instance tensors for H and its gradients; accepts any leading batch shape"""

    def __init__(self, inst):
        self.inst = inst
        self.N = inst.n_agents
        self.dx = inst.dx
        self.d = inst.dx // 2
        self.radii = as_tensor(inst.radii)
        self.drag = as_tensor(inst.drag).unsqueeze(-1)
        self.c_v = float(inst.cost.velocity_weight)
        self.c_u = float(inst.cost.control_weight)
        self.obstacles = tuple(inst.env.obstacles)

        pairs = torch.triu_indices(self.N, self.N, offset=1)
        self.pair_i, self.pair_j = pairs[0], pairs[1]
        self.pair_radii = self.radii[self.pair_i] + self.radii[self.pair_j]
        incidence = torch.zeros(self.pair_i.shape[0], self.N, dtype=DTYPE)
        rows = torch.arange(self.pair_i.shape[0])
        incidence[rows, self.pair_i] = 1.0
        incidence[rows, self.pair_j] = -1.0
        self.incidence = incidence

    @property
    def n_constraints(self):
        return int(self.pair_i.shape[0]) + self.N * len(self.obstacles)

    def split(self, x):
        return x[..., :self.d], x[..., self.d:]

    def drift(self, x):
        """f(x) = (v, -k v |v|_delta) per agent"""
        _, v = self.split(x)
        return torch.cat([v, -self.drag * v * reg_norm(v)], dim=-1)

    def _constraint_parts(self, w):
        diff = w[..., self.pair_i, :] - w[..., self.pair_j, :]
        dist = safe_norm(diff)
        h_pair = dist - self.pair_radii
        e_pair = diff / torch.where(dist > 0, dist, torch.ones_like(dist)).unsqueeze(-1)

        if self.obstacles:
            parts = [distance_and_grad(o, w) for o in self.obstacles]
            h_obs = torch.stack([p[0] for p in parts], dim=-1) - self.radii.unsqueeze(-1)
            g_obs = torch.stack([p[1] for p in parts], dim=-2)
        else:
            h_obs = w.new_zeros(w.shape[:-1] + (0,))
            g_obs = w.new_zeros(w.shape[:-1] + (0, self.d))
        return h_pair, e_pair, h_obs, g_obs

    def constraint_values(self, w):
        """Pairwise (i<j) entries first, then agent-major obstacle entries"""
        h_pair, _, h_obs, _ = self._constraint_parts(as_tensor(w))
        return torch.cat([h_pair, h_obs.flatten(-2)], dim=-1)

    def barrier_value(self, w, bp):
        return barrier(self.constraint_values(w), bp)

    def barrier_grad(self, w, bp):
        """dU/dw, shape (..., N, d)"""
        h_pair, e_pair, h_obs, g_obs = self._constraint_parts(w)
        s_pair = barrier_slope(h_pair, bp)
        grad = torch.einsum('pn,...pd->...nd', self.incidence, s_pair.unsqueeze(-1) * e_pair)
        if self.obstacles:
            grad = grad + (barrier_slope(h_obs, bp).unsqueeze(-1) * g_obs).sum(-2)
        return grad

    def controls(self, p):
        """Velocity-block costate over 2 c_u"""
        return p[..., self.d:] / (2.0 * self.c_u)

    def hamiltonian(self, x, p, bp):
        w, v = self.split(x)
        p_w, p_v = self.split(p)
        nv = reg_norm(v).squeeze(-1)
        per_agent = ((p_w * v).sum(-1)
                     - self.drag.squeeze(-1) * nv * (p_v * v).sum(-1)
                     - self.c_v * (v * v).sum(-1)
                     + (p_v * p_v).sum(-1) / (4.0 * self.c_u))
        return per_agent.sum(-1) - self.barrier_value(w, bp)

    def grads(self, x, p, bp):
        """(dH/dx, dH/dp) in closed form"""
        w, v = self.split(x)
        p_w, p_v = self.split(p)
        nv = reg_norm(v)
        vp = (v * p_v).sum(-1, keepdim=True)

        dp = torch.cat([v, -self.drag * v * nv + p_v / (2.0 * self.c_u)], dim=-1)
        dw = -self.barrier_grad(w, bp)
        dv = p_w - self.drag * (nv * p_v + v * vp / nv) - 2.0 * self.c_v * v
        return torch.cat([dw, dv], dim=-1), dp

    def running_cost_rate(self, x, p):
        """sum_i c_v |v_i|^2 + c_u |u_i|^2 with u recovered from p"""
        _, v = self.split(x)
        u = self.controls(p)
        return (self.c_v * (v * v).sum(-1) + self.c_u * (u * u).sum(-1)).sum(-1)


def dynamics_drift(inst, i, x_i):
    x_i = as_tensor(x_i)
    v = x_i[..., x_i.shape[-1] // 2:]
    drag = float(inst.agents[i].drag_coeff)
    return torch.cat([v, -drag * v * reg_norm(v)], dim=-1)


def constraint_values(inst, w):
    return PhysicsModel(inst).constraint_values(as_tensor(w))


def conjugate_control(inst, i, p_i):
    """Unique maximizer of <p, Bu> - c_u |u|^2"""
    p_i = as_tensor(p_i)
    d = p_i.shape[-1] // 2
    return p_i[..., d:] / (2.0 * float(inst.cost.control_weight))


def hamiltonian_value(inst, x, p, bp):
    return PhysicsModel(inst).hamiltonian(as_tensor(x), as_tensor(p), bp)


def hamiltonian_grads(inst, x, p, bp):
    return PhysicsModel(inst).grads(as_tensor(x), as_tensor(p), bp)
