"""
Symplectic Decoder Module
Conditional shear stack mapping latent (y, q) to physical (x, p), with exact tangents
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn

from modules.geometry import DTYPE, as_tensor

ARCHITECTURES = ('symplectic', 'mlp')


@dataclass(frozen=True)
class DecoderConfig:
    layers: int = 3
    cond_width: int = 8
    activation: str = 'tanh'
    block_diagonal: bool = True
    theta_dim: int = 0
    theta_encoding: tuple = ()
    hidden_layers: int = 2
    architecture: str = 'symplectic'
    mlp_width: int = 256
    mlp_activation: str = 'silu'

    def validate(self):
        problems = []
        if self.layers < 0:
            problems.append(f"layers must be >= 0, got {self.layers}")
        if self.cond_width < 1:
            problems.append(f"cond_width must be >= 1, got {self.cond_width}")
        if self.hidden_layers < 1:
            problems.append(f"hidden_layers must be >= 1, got {self.hidden_layers}")
        if self.activation not in _ACTIVATIONS or self.mlp_activation not in _ACTIVATIONS:
            problems.append(f"activation must be one of {sorted(_ACTIVATIONS)}")
        if self.architecture not in ARCHITECTURES:
            problems.append(f"unknown architecture {self.architecture!r}")
        return problems

    def to_dict(self):
        return {
            'layers': self.layers,
            'cond_width': self.cond_width,
            'activation': self.activation,
            'block_diagonal': self.block_diagonal,
            'theta_dim': self.theta_dim,
            'theta_encoding': list(self.theta_encoding),
            'hidden_layers': self.hidden_layers,
            'architecture': self.architecture,
            'mlp_width': self.mlp_width,
            'mlp_activation': self.mlp_activation,
        }

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"Unknown decoder config keys: {sorted(unknown)}")
        if 'theta_encoding' in data:
            data['theta_encoding'] = tuple(data['theta_encoding'])
        return cls(**data)


def _tanh_grad(pre):
    t = torch.tanh(pre)
    return 1.0 - t * t


def _silu_grad(pre):
    s = torch.sigmoid(pre)
    return s * (1.0 + pre * (1.0 - s))


_ACTIVATIONS = {
    'tanh': (torch.tanh, _tanh_grad),
    'silu': (nn.functional.silu, _silu_grad),
}


class TangentMLP(nn.Module):
    """Feed-forward net that also pushes one input tangent through"""

    def __init__(self, in_dim, width, out_dim=None, hidden=2, activation='tanh', zero_last=False):
        super().__init__()
        dims = [in_dim] + [width] * hidden
        self.hidden = nn.ModuleList(nn.Linear(a, b, dtype=DTYPE) for a, b in zip(dims[:-1], dims[1:]))
        self.out = nn.Linear(dims[-1], out_dim, dtype=DTYPE) if out_dim else None
        self.act, self.act_grad = _ACTIVATIONS[activation]
        if zero_last and self.out is not None:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def forward(self, x, dx=None):
        h, dh = x, dx
        for lin in self.hidden:
            pre = lin(h)
            h = self.act(pre)
            if dh is not None:
                dh = self.act_grad(pre) * (dh @ lin.weight.T)
        if self.out is not None:
            h = self.out(h)
            if dh is not None:
                dh = dh @ self.out.weight.T
        return h, dh


def _mv(K, v):
    return (K @ v.unsqueeze(-1)).squeeze(-1)


def _mtv(K, v):
    return (K.transpose(-1, -2) @ v.unsqueeze(-1)).squeeze(-1)


def _up_shift(y, beta, sigma):
    return y + beta * sigma


class ConditionalShear(nn.Module):
    """One triangular shear with K(theta), b(theta), a(theta, t/T)"""

    def __init__(self, direction, theta_dim, n_blocks, block, cfg):
        super().__init__()
        self.direction = direction
        self.n_blocks = n_blocks
        self.block = block
        n = n_blocks * block
        width, hidden, act = cfg.cond_width, cfg.hidden_layers, cfg.activation

        self.k_trunk = TangentMLP(theta_dim, width, None, hidden, act)
        bound = 1.0 / math.sqrt(width)
        self.k_weight = nn.Parameter(torch.empty(n_blocks, block * block, width, dtype=DTYPE).uniform_(-bound, bound))
        self.k_bias = nn.Parameter(torch.empty(n_blocks, block * block, dtype=DTYPE).uniform_(-bound, bound))
        self.b_net = TangentMLP(theta_dim, width, n, hidden, act)
        self.a_net = TangentMLP(theta_dim + 1, width, n, hidden, act, zero_last=True)

    def static_coefficients(self, theta):
        """K (B, nb, m, m) and b (B, nb, m); no time dependence"""
        B = theta.shape[0]
        trunk, _ = self.k_trunk(theta)
        K = torch.einsum('bw,kew->bke', trunk, self.k_weight) + self.k_bias
        K = K.reshape(B, self.n_blocks, self.block, self.block)
        b = self.b_net(theta)[0].reshape(B, self.n_blocks, self.block)
        return K, b

    def gate(self, theta, tau, rate):
        """a and da/dt at every (instance, time); tau = t/T, rate = 1/T"""
        B, Tn = theta.shape[0], tau.shape[0]
        inp = torch.cat([theta.unsqueeze(1).expand(B, Tn, theta.shape[-1]),
                         tau.reshape(1, Tn, 1).expand(B, Tn, 1)], dim=-1)
        direction = torch.zeros_like(inp)
        direction[..., -1] = rate
        a, adot = self.a_net(inp, direction)
        shape = (B, Tn, self.n_blocks, self.block)
        return a.reshape(shape), adot.reshape(shape)


class SymplecticDecoder(nn.Module):
    """Alternating low/up conditional shears; low then up within each pair"""

    def __init__(self, cfg, n_agents, dx, horizon=1.0, seed=None):
        super().__init__()
        self.cfg = cfg
        self.n_agents = n_agents
        self.dx = dx
        self.n = n_agents * dx
        self.horizon = float(horizon)
        if cfg.block_diagonal:
            n_blocks, block = n_agents, dx
        else:
            n_blocks, block = 1, self.n
        with torch.random.fork_rng(enabled=seed is not None):
            if seed is not None:
                torch.manual_seed(seed)
            self.shears = nn.ModuleList(
                ConditionalShear(direction, cfg.theta_dim, n_blocks, block, cfg)
                for _ in range(cfg.layers) for direction in ('low', 'up'))

    def _blocks(self, v):
        return v.reshape(*v.shape[:-1], -1, self.shears[0].block) if len(self.shears) else v

    def propagate(self, theta, t, z, tangent=None, time_derivative=False):
        """Forward map with optional JVP channel(s) and dPhi/dt

        theta (B, m), t (Nt,), z (B, Nt, 2n); tangent (B, Nt, 2n) or (B, Nt, D, 2n).
        """
        n = self.n
        if not len(self.shears):
            zeros = torch.zeros_like(z) if time_derivative else None
            return z, tangent, zeros

        single = tangent is not None and tangent.dim() == z.dim()
        if single:
            tangent = tangent.unsqueeze(-2)

        y, q = self._blocks(z[..., :n]), self._blocks(z[..., n:])
        dy = dq = None
        if tangent is not None:
            dy, dq = self._blocks(tangent[..., :n]), self._blocks(tangent[..., n:])
        sy = sq = None
        if time_derivative:
            sy, sq = torch.zeros_like(y), torch.zeros_like(q)

        T = self.horizon
        beta = (t * (T - t)).reshape(1, -1, 1, 1)
        dbeta = (T - 2.0 * t).reshape(1, -1, 1, 1)
        tau = t / T

        for shear in self.shears:
            K, b = shear.static_coefficients(theta)
            a, adot = shear.gate(theta, tau, 1.0 / T)
            K = K.unsqueeze(1)
            b = b.unsqueeze(1)
            Kd, ad = K.unsqueeze(2), a.unsqueeze(2)

            if shear.direction == 'low':
                u = _mv(K, y) + b
                sigma = _mtv(K, a * u)
                if dq is not None:
                    dq = dq + _mtv(Kd, ad * _mv(Kd, dy))
                if sq is not None:
                    sq = sq + _mtv(K, a * _mv(K, sy)) + _mtv(K, adot * u)
                q = q + sigma
            else:
                u = _mv(K, q) + b
                sigma = _mtv(K, a * u)
                if dy is not None:
                    dy = dy + beta.unsqueeze(2) * _mtv(Kd, ad * _mv(Kd, dq))
                if sy is not None:
                    sy = sy + dbeta * sigma + beta * (_mtv(K, a * _mv(K, sq)) + _mtv(K, adot * u))
                y = _up_shift(y, beta, sigma)

        out = torch.cat([y.flatten(-2), q.flatten(-2)], dim=-1)
        tangent_out = None
        if dy is not None:
            tangent_out = torch.cat([dy.flatten(-2), dq.flatten(-2)], dim=-1)
            if single:
                tangent_out = tangent_out.squeeze(-2)
        time_out = torch.cat([sy.flatten(-2), sq.flatten(-2)], dim=-1) if time_derivative else None
        return out, tangent_out, time_out

    def forward(self, theta, t, z):
        return self.propagate(theta, t, z)[0]

    def forward_with_velocity(self, theta, t, z, zdot):
        """Phi and d/dt Phi(t, z(t)) = DPhi zdot + dPhi/dt"""
        out, jvp, dt = self.propagate(theta, t, z, tangent=zdot, time_derivative=True)
        return out, jvp + dt

    def weight_norm_sq(self):
        return sum((p * p).sum() for p in self.parameters()) if len(self.shears) else torch.zeros((), dtype=DTYPE)

    def layer_params(self, theta, t):
        """Per-shear (K as a full block-diagonal n x n matrix, b, a) for one theta and time"""
        theta = as_tensor(theta).reshape(1, -1)
        t = as_tensor(t).reshape(1)
        out = []
        with torch.no_grad():
            for shear in self.shears:
                K, b = shear.static_coefficients(theta)
                a, _ = shear.gate(theta, t / self.horizon, 1.0 / self.horizon)
                full = torch.block_diag(*K[0]).numpy()
                out.append(LayerParams(full, b[0].flatten().numpy(), a[0, 0].flatten().numpy(), shear.direction))
        return out


class MLPBaseline(nn.Module):
    """Plain network on (z, theta, t/T); state output pinned at both endpoints"""

    def __init__(self, cfg, n_agents, dx, horizon=1.0, seed=None):
        super().__init__()
        self.cfg = cfg
        self.n_agents = n_agents
        self.dx = dx
        self.n = n_agents * dx
        self.horizon = float(horizon)
        with torch.random.fork_rng(enabled=seed is not None):
            if seed is not None:
                torch.manual_seed(seed)
            self.net = TangentMLP(2 * self.n + cfg.theta_dim + 1, cfg.mlp_width, 2 * self.n,
                                  cfg.hidden_layers, cfg.mlp_activation)

    def _inputs(self, theta, t, z):
        B, Tn = z.shape[0], z.shape[1]
        return torch.cat([z, theta.unsqueeze(1).expand(B, Tn, theta.shape[-1]),
                          (t / self.horizon).reshape(1, Tn, 1).expand(B, Tn, 1)], dim=-1)

    def propagate(self, theta, t, z, tangent=None, time_derivative=False):
        n, T = self.n, self.horizon
        inp = self._inputs(theta, t, z)
        gate = (t * (T - t) / T ** 2).reshape(1, -1, 1)
        dgate = ((T - 2.0 * t) / T ** 2).reshape(1, -1, 1)

        raw, _ = self.net(inp)
        out = torch.cat([z[..., :n] + gate * raw[..., :n], raw[..., n:]], dim=-1)

        tangent_out = None
        if tangent is not None:
            single = tangent.dim() == z.dim()
            tan = tangent if single else tangent.movedim(-2, 0)
            direction = torch.cat([tan, torch.zeros(tan.shape[:-1] + (inp.shape[-1] - 2 * n,), dtype=tan.dtype)], -1)
            inp_b = inp if single else inp.unsqueeze(0).expand(direction.shape)
            _, draw = self.net(inp_b, direction)
            tangent_out = torch.cat([tan[..., :n] + gate * draw[..., :n], draw[..., n:]], dim=-1)
            if not single:
                tangent_out = tangent_out.movedim(0, -2)

        time_out = None
        if time_derivative:
            direction = torch.zeros_like(inp)
            direction[..., -1] = 1.0 / T
            _, draw = self.net(inp, direction)
            time_out = torch.cat([dgate * raw[..., :n] + gate * draw[..., :n], draw[..., n:]], dim=-1)
        return out, tangent_out, time_out

    def forward(self, theta, t, z):
        return self.propagate(theta, t, z)[0]

    def forward_with_velocity(self, theta, t, z, zdot):
        out, jvp, dt = self.propagate(theta, t, z, tangent=zdot, time_derivative=True)
        return out, jvp + dt

    def weight_norm_sq(self):
        return sum((p * p).sum() for p in self.parameters())


@dataclass
class LayerParams:
    K: np.ndarray
    b: np.ndarray
    a: np.ndarray
    direction: str = 'low'


def build_decoder(cfg, n_agents, dx, horizon=1.0, seed=None):
    problems = cfg.validate()
    if problems:
        raise ValueError(f"Invalid decoder config: {'; '.join(problems)}")
    if cfg.architecture == 'mlp':
        return MLPBaseline(cfg, n_agents, dx, horizon, seed)
    return SymplecticDecoder(cfg, n_agents, dx, horizon, seed)


def zero_weights(decoder):
    with torch.no_grad():
        for p in decoder.parameters():
            p.zero_()
    return decoder


def randomize_weights(decoder, std=0.5, seed=0):
    """Every weight drawn from N(0, std^2), gates included"""
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in decoder.parameters():
            p.copy_(std * torch.randn(p.shape, generator=generator, dtype=p.dtype))
    return decoder


def _mlp_count(in_dim, width, out_dim, hidden):
    dims = [in_dim] + [width] * hidden
    count = sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    if out_dim:
        count += dims[-1] * out_dim + out_dim
    return count


def count_parameters(cfg, N, dx):
    """Trainable parameters of the configured architecture"""
    n = N * dx
    m, w, h = cfg.theta_dim, cfg.cond_width, cfg.hidden_layers
    if cfg.architecture == 'mlp':
        return _mlp_count(2 * n + m + 1, cfg.mlp_width, 2 * n, h)
    heads = N * (dx * dx * w + dx * dx) if cfg.block_diagonal else n * n * w + n * n
    per_shear = (_mlp_count(m, w, None, h) + heads
                 + _mlp_count(m, w, n, h)
                 + _mlp_count(m + 1, w, n, h))
    return 2 * cfg.layers * per_shear


def matched_mlp_width(cfg, N, dx):
    """Hidden width whose MLP parameter count is closest to the decoder's"""
    target = count_parameters(replace(cfg, architecture='symplectic'), N, dx)
    best, best_gap = 1, None
    for width in range(1, 4097):
        gap = abs(count_parameters(replace(cfg, architecture='mlp', mlp_width=width), N, dx) - target)
        if best_gap is None or gap < best_gap:
            best, best_gap = width, gap
    return best


def to_decoder_layout(y, q):
    """(..., N, dx) latent halves -> (..., 2n) flat agent-major tensor"""
    y, q = as_tensor(y), as_tensor(q)
    return torch.cat([y.flatten(-2), q.flatten(-2)], dim=-1)


def from_decoder_layout(z, N, dx):
    """(..., 2n) -> numpy (x, p) halves shaped (..., N, dx)"""
    z = z.detach() if isinstance(z, torch.Tensor) else as_tensor(z)
    n = N * dx
    lead = z.shape[:-1]
    return (z[..., :n].reshape(*lead, N, dx).numpy(),
            z[..., n:].reshape(*lead, N, dx).numpy())


# Pointwise operations on a single (theta, t, z)

def _point_inputs(theta_vec, t, z):
    theta = as_tensor(theta_vec).reshape(1, -1)
    t = as_tensor(t).reshape(1)
    z = as_tensor(z).reshape(1, 1, -1)
    return theta, t, z


def condition_params(weights, theta_vec, t):
    return weights.layer_params(theta_vec, t)


def shear_forward(z, layer, t, direction, T):
    """One shear with explicit (K, b, a)"""
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[-1] // 2
    y, q = z[:n], z[n:]
    K = np.atleast_2d(layer.K)
    sigma = lambda v: K.T @ (np.asarray(layer.a) * (K @ v + np.asarray(layer.b)))
    if direction == 'low':
        return y, q + sigma(y)
    return y + t * (T - t) * sigma(q), q


def decoder_forward(weights, theta_vec, t, z_latent):
    theta, t, z = _point_inputs(theta_vec, t, z_latent)
    with torch.no_grad():
        out = weights(theta, t, z)[0, 0]
    return out[:weights.n], out[weights.n:]


def decoder_jvp(weights, theta_vec, t, z, zdot):
    theta, t, z = _point_inputs(theta_vec, t, z)
    with torch.no_grad():
        _, jvp, _ = weights.propagate(theta, t, z, tangent=as_tensor(zdot).reshape(1, 1, -1))
    return jvp[0, 0]


def decoder_time_derivative(weights, theta_vec, t, z):
    theta, t, z = _point_inputs(theta_vec, t, z)
    with torch.no_grad():
        _, _, dt = weights.propagate(theta, t, z, time_derivative=True)
    return dt[0, 0]


def decoder_jacobian(weights, theta_vec, t, z):
    """Full 2n x 2n Jacobian assembled from JVPs on the basis vectors"""
    theta, t, z = _point_inputs(theta_vec, t, z)
    dim = z.shape[-1]
    basis = torch.eye(dim, dtype=DTYPE).reshape(1, 1, dim, dim)
    with torch.no_grad():
        _, cols, _ = weights.propagate(theta, t, z, tangent=basis)
    return cols[0, 0].T.numpy()


def symplectic_defect(jacobian):
    """|D^T J D - J|_F"""
    n = jacobian.shape[0] // 2
    eye, zero = np.eye(n), np.zeros((n, n))
    J = np.block([[zero, eye], [-eye, zero]])
    return float(np.linalg.norm(jacobian.T @ J @ jacobian - J))


@dataclass
class AdjointSample:
    theta: np.ndarray
    t: float
    z: np.ndarray
    zdot: np.ndarray
    out_adjoint: np.ndarray
    velocity_adjoint: np.ndarray = field(default=None)


def decoder_param_gradient(weights, batch):
    """Reverse accumulation of sum <adjoint, Phi> + <adjoint_v, d/dt Phi> over the batch"""
    params = [p for p in weights.parameters()]
    grads = [torch.zeros_like(p) for p in params]
    for sample in batch:
        theta, t, z = _point_inputs(sample.theta, sample.t, sample.z)
        out, vel = weights.forward_with_velocity(theta, t, z, as_tensor(sample.zdot).reshape(1, 1, -1))
        scalar = (out[0, 0] * as_tensor(sample.out_adjoint)).sum()
        if sample.velocity_adjoint is not None:
            scalar = scalar + (vel[0, 0] * as_tensor(sample.velocity_adjoint)).sum()
        for acc, g in zip(grads, torch.autograd.grad(scalar, params, allow_unused=True)):
            if g is not None:
                acc += g
    return grads
