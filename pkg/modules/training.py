"""
Training Module
PMP residual loss, Adam + L-BFGS with barrier continuation, pretraining and refinement
"""

import copy
import logging
import math
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np
import torch

from modules.error_handler import GridMismatchError, NonFiniteLossError
from modules.geometry import DTYPE, as_tensor
from modules.hamiltonian import BarrierParams, PhysicsModel
from modules.latent_solver import solve_latent_bvp
from modules.phase_core import PhaseTrajectory, TimeGrid
from modules.scenario_gen import encode_theta
from modules.symplectic_decoder import build_decoder, from_decoder_layout, to_decoder_layout

ENDPOINT_TOLERANCE = 1e-16


@dataclass(frozen=True)
class TrainConfig:
    adam_steps: int = 150
    lbfgs_steps: int = 100
    adam_lr: float = 1e-3
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    lbfgs_memory: int = 10
    weight_decay: float = 0.0
    ic_weight: float = 0.0
    tc_weight: float = 0.0
    anneal: dict = field(default_factory=lambda: {'eps': 1e-4, 'ell': 1e-4})
    batch_size: int | None = None
    collocation_count: int = 64
    rng_seed: int = 0
    log_every: int = 10
    gradcheck_every: int = 0
    init_checkpoint: str | None = None

    def validate(self):
        problems = []
        if self.adam_steps < 0 or self.lbfgs_steps < 0:
            problems.append("step counts must be >= 0")
        if self.collocation_count < 2:
            problems.append(f"collocation_count must be >= 2, got {self.collocation_count}")
        if self.batch_size is not None and self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.weight_decay < 0:
            problems.append("weight_decay must be >= 0")
        try:
            AnnealSchedule.from_dict(self.anneal)
        except ValueError as e:
            problems.append(str(e))
        return problems

    def to_dict(self):
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data['adam_betas'] = list(self.adam_betas)
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"Unknown train config keys: {sorted(unknown)}")
        if 'adam_betas' in data:
            data['adam_betas'] = tuple(data['adam_betas'])
        return cls(**data)


@dataclass(frozen=True)
class AnnealState:
    stage: int
    eps: float
    ell: float
    carried: bool = True

    @property
    def barrier(self):
        return BarrierParams(self.eps, self.ell)


@dataclass(frozen=True)
class AnnealSchedule:
    eps0: float
    ell0: float
    rho_eps: float = 1.0
    rho_ell: float = 1.0
    period_steps: int = 0

    @classmethod
    def from_dict(cls, data):
        if 'eps' in data or 'ell' in data:
            extra = set(data) - {'eps', 'ell'}
            if extra:
                raise ValueError(f"Fixed barrier takes only eps/ell, got {sorted(extra)}")
            eps, ell = float(data['eps']), float(data['ell'])
            if not (eps > 0 and ell > 0):
                raise ValueError("eps and ell must be > 0")
            return cls(eps, ell)
        extra = set(data) - {'eps0', 'ell0', 'rho_eps', 'rho_ell', 'period_steps'}
        if extra:
            raise ValueError(f"Unknown anneal keys: {sorted(extra)}")
        schedule = cls(float(data['eps0']), float(data['ell0']), float(data['rho_eps']),
                       float(data['rho_ell']), int(data['period_steps']))
        if not (0 < schedule.rho_eps < 1 and 0 < schedule.rho_ell < 1):
            raise ValueError("annealing factors must lie in (0, 1)")
        if schedule.period_steps < 1:
            raise ValueError("period_steps must be >= 1")
        if not (schedule.eps0 > 0 and schedule.ell0 > 0):
            raise ValueError("eps0 and ell0 must be > 0")
        return schedule

    @property
    def annealed(self):
        return self.period_steps > 0

    def at(self, step):
        stage = step // self.period_steps if self.annealed else 0
        return AnnealState(stage, self.eps0 * self.rho_eps ** stage, self.ell0 * self.rho_ell ** stage)


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    eps: list = field(default_factory=list)
    ell: list = field(default_factory=list)
    wall_clock: list = field(default_factory=list)
    phases: list = field(default_factory=list)
    pretrain_losses: list = field(default_factory=list)
    checkpoint: str | None = None

    def record(self, phase, loss, residual, state, elapsed):
        self.phases.append(phase)
        self.losses.append(float(loss))
        self.residuals.append(float(residual))
        self.eps.append(state.eps)
        self.ell.append(state.ell)
        self.wall_clock.append(elapsed)

    def to_dict(self):
        return {
            'losses': self.losses,
            'residuals': self.residuals,
            'eps': self.eps,
            'ell': self.ell,
            'wall_clock': self.wall_clock,
            'phases': self.phases,
            'pretrain_losses': self.pretrain_losses,
            'checkpoint': self.checkpoint,
        }


@dataclass
class PreparedInstance:
    inst: object
    theta: torch.Tensor
    latent: object
    model: PhysicsModel
    z: torch.Tensor
    zdot: torch.Tensor


@dataclass
class PreparedBatch:
    grid: TimeGrid
    items: list
    theta: torch.Tensor
    z: torch.Tensor
    zdot: torch.Tensor

    @property
    def times(self):
        return as_tensor(self.grid.times)

    def __len__(self):
        return len(self.items)


def prepare_instance(inst, family, latent_cfg, grid, latent=None):
    latent = latent if latent is not None else solve_latent_bvp(inst, latent_cfg, grid)
    return PreparedInstance(
        inst=inst,
        theta=as_tensor(encode_theta(inst, family)),
        latent=latent,
        model=PhysicsModel(inst),
        z=to_decoder_layout(latent.y, latent.q),
        zdot=to_decoder_layout(latent.ydot, latent.qdot),
    )


def prepare_batch(instances, family, latent_cfg, grid):
    items = [prepare_instance(inst, family, latent_cfg, grid) for inst in instances]
    return PreparedBatch(
        grid=grid,
        items=items,
        theta=torch.stack([it.theta for it in items]) if items else torch.zeros(0, family.theta_dim, dtype=DTYPE),
        z=torch.stack([it.z for it in items]) if items else None,
        zdot=torch.stack([it.zdot for it in items]) if items else None,
    )


def select_items(batch, indices):
    """Sub-batch of the given instance indices"""
    idx = torch.as_tensor(np.asarray(indices, dtype=np.int64))
    items = [batch.items[int(i)] for i in idx]
    return PreparedBatch(batch.grid, items, batch.theta[idx], batch.z[idx], batch.zdot[idx])


def minibatch_indices(count, batch_size, step, seed):
    """Instance indices for one Adam step; None means the full set"""
    if not batch_size or batch_size >= count:
        return None
    per_pass = -(-count // batch_size)
    sweep, slot = divmod(step, per_pass)
    order = np.random.default_rng([seed, sweep]).permutation(count)
    return np.sort(order[slot * batch_size:(slot + 1) * batch_size])


def _split_phase(flat, N, dx):
    n = N * dx
    lead = flat.shape[:-1]
    return flat[..., :n].reshape(*lead, N, dx), flat[..., n:].reshape(*lead, N, dx)


def decoded_channels(decoder, batch):
    """Decoded (x, p) and their time derivatives, each (B, Nt, N, dx)"""
    out, vel = decoder.forward_with_velocity(batch.theta, batch.times, batch.z, batch.zdot)
    N, dx = decoder.n_agents, decoder.dx
    x, p = _split_phase(out, N, dx)
    xdot, pdot = _split_phase(vel, N, dx)
    return x, p, xdot, pdot


def residuals_from_channels(model, x, p, xdot, pdot, bp):
    gx, gp = model.grads(x, p, bp)
    return xdot - gp, pdot + gx


def pmp_residuals(inst, decoder, latent, bp, family, grid=None):
    """(r_x, r_p) over the collocation grid, each (Nt, N, dx)"""
    if grid is not None and not latent.grid.same_as(grid):
        raise GridMismatchError(
            f"Latent grid ({latent.grid.count} points) differs from collocation grid ({grid.count} points)")
    item = prepare_instance(inst, family, None, latent.grid, latent=latent)
    batch = PreparedBatch(latent.grid, [item], item.theta[None], item.z[None], item.zdot[None])
    x, p, xdot, pdot = decoded_channels(decoder, batch)
    r_x, r_p = residuals_from_channels(item.model, x[0], p[0], xdot[0], pdot[0], bp)
    return r_x, r_p


@dataclass
class LossParts:
    total: torch.Tensor
    residual: torch.Tensor
    per_instance: torch.Tensor
    ic: torch.Tensor
    tc: torch.Tensor
    weight: torch.Tensor


def total_loss(batch, decoder, bp, cfg):
    """Mean squared PMP residual + endpoint penalties + weight decay"""
    x, p, xdot, pdot = decoded_channels(decoder, batch)
    per_instance, ic, tc = [], [], []
    for b, item in enumerate(batch.items):
        r_x, r_p = residuals_from_channels(item.model, x[b], p[b], xdot[b], pdot[b], bp)
        per_instance.append(((r_x * r_x).sum((-1, -2)) + (r_p * r_p).sum((-1, -2))).mean())
        x0 = as_tensor(item.inst.x0)
        xT = as_tensor(item.inst.xT)
        ic.append(((x[b, 0] - x0) ** 2).sum())
        tc.append(((x[b, -1] - xT) ** 2).sum())

    per_instance = torch.stack(per_instance)
    residual = per_instance.mean()
    ic_mean, tc_mean = torch.stack(ic).mean(), torch.stack(tc).mean()
    weight = decoder.weight_norm_sq()
    total = residual + cfg.ic_weight * ic_mean + cfg.tc_weight * tc_mean + cfg.weight_decay * weight
    return LossParts(total, residual, per_instance, ic_mean, tc_mean, weight)


def _check_loss(parts, step, phase):
    if not torch.isfinite(parts.total):
        bad = torch.nonzero(~torch.isfinite(parts.per_instance))
        instance = int(bad[0, 0]) if bad.numel() else -1
        raise NonFiniteLossError(step, instance, phase)
    worst = max(float(parts.ic), float(parts.tc))
    if worst > ENDPOINT_TOLERANCE:
        logging.warning(f"[TRAIN] ⚠ Endpoint mismatch {worst:.3e} at {phase} step {step}")


def _decoder_for(family, decoder_cfg, horizon, seed):
    cfg = replace(decoder_cfg, theta_dim=family.theta_dim,
                  theta_encoding=tuple(label for label, _, _ in family.theta_layout()))
    return build_decoder(cfg, family.n_agents, 2 * family.spatial_dim, horizon, seed)


def pretrain_regression(decoder, batch, references, steps, lr=1e-3):
    """Adam on the mean squared position mismatch against reference paths"""
    refs = np.asarray(references, dtype=np.float64)
    if refs.ndim == 3:
        refs = np.broadcast_to(refs, (len(batch),) + refs.shape)
    target = as_tensor(np.ascontiguousarray(refs))
    d = decoder.dx // 2

    optimizer = torch.optim.Adam(decoder.parameters(), lr=lr)
    losses = []
    for step in range(steps):
        optimizer.zero_grad()
        out = decoder(batch.theta, batch.times, batch.z)
        x, _ = _split_phase(out, decoder.n_agents, decoder.dx)
        loss = ((x[..., :d] - target) ** 2).sum((-1, -2)).mean()
        if not torch.isfinite(loss):
            raise NonFiniteLossError(step, -1, 'pretrain')
        loss.backward()
        optimizer.step()
        losses.append(float(loss))
        if step % 50 == 0:
            logging.info(f"[TRAIN] pretrain step {step}: loss={losses[-1]:.4e}")
    if steps:
        with torch.no_grad():
            out = decoder(batch.theta, batch.times, batch.z)
            x, _ = _split_phase(out, decoder.n_agents, decoder.dx)
            losses.append(float(((x[..., :d] - target) ** 2).sum((-1, -2)).mean()))
        logging.info(f"[TRAIN] ✓ Pretraining done: {losses[0]:.4e} -> {losses[-1]:.4e}")
    return losses


@dataclass
class TrainResult:
    decoder: object
    report: TrainReport
    anneal_state: AnnealState
    schedule: AnnealSchedule


def train(family, train_set, cfg, decoder_cfg, latent_cfg, pretrain_refs=None, init_decoder=None):
    """Optional regression pretraining, Adam with continuation, then L-BFGS"""
    if not train_set:
        raise ValueError("train_set is empty")
    torch.manual_seed(cfg.rng_seed)
    schedule = AnnealSchedule.from_dict(cfg.anneal)
    horizon = train_set[0].horizon
    grid = TimeGrid.uniform(horizon, cfg.collocation_count)

    decoder = _decoder_for(family, decoder_cfg, horizon, cfg.rng_seed)
    if init_decoder is not None:
        decoder.load_state_dict(init_decoder.state_dict())
        logging.info("[TRAIN] → Warm start from checkpoint weights")

    batch = prepare_batch(train_set, family, latent_cfg, grid)
    report = TrainReport()
    started = time.perf_counter()
    logging.info(f"[TRAIN] {family.name}: {len(batch)} instances, N={family.n_agents}, "
                 f"{cfg.adam_steps} Adam + {cfg.lbfgs_steps} L-BFGS steps")

    if pretrain_refs is not None:
        report.pretrain_losses = pretrain_regression(
            decoder, batch, pretrain_refs['references'], int(pretrain_refs.get('steps', 500)), cfg.adam_lr)

    params = list(decoder.parameters())
    state = schedule.at(0)
    optimizer = torch.optim.Adam(params, lr=cfg.adam_lr, betas=tuple(cfg.adam_betas), eps=cfg.adam_eps)

    for step in range(cfg.adam_steps):
        new_state = schedule.at(step)
        if new_state.stage != state.stage:
            logging.info(f"[TRAIN] → Stage {new_state.stage}: eps={new_state.eps:.4g}, ell={new_state.ell:.4g} "
                         f"(optimizer state carried)")
        state = new_state

        indices = minibatch_indices(len(batch), cfg.batch_size, step, cfg.rng_seed)
        step_batch = batch if indices is None else select_items(batch, indices)

        optimizer.zero_grad()
        parts = total_loss(step_batch, decoder, state.barrier, cfg)
        _check_loss(parts, step, 'adam')
        parts.total.backward()
        optimizer.step()

        report.record('adam', parts.total.item(), parts.residual.item(), state, time.perf_counter() - started)
        _progress(cfg, step, report)
        _spot_check(cfg, step, decoder, batch, state)

    if cfg.adam_steps:
        state = schedule.at(cfg.adam_steps - 1)
    bp = state.barrier
    # L-BFGS always sees the full set
    lbfgs = torch.optim.LBFGS(params, lr=1.0, max_iter=1, history_size=cfg.lbfgs_memory,
                              line_search_fn='strong_wolfe')

    for k in range(cfg.lbfgs_steps):
        step = cfg.adam_steps + k

        def closure():
            lbfgs.zero_grad()
            parts = total_loss(batch, decoder, bp, cfg)
            _check_loss(parts, step, 'lbfgs')
            parts.total.backward()
            return parts.total

        lbfgs.step(closure)
        with torch.no_grad():
            parts = total_loss(batch, decoder, bp, cfg)
        _check_loss(parts, step, 'lbfgs')
        report.record('lbfgs', parts.total.item(), parts.residual.item(), state, time.perf_counter() - started)
        _progress(cfg, step, report)

    if report.losses:
        logging.info(f"[TRAIN] ✓ Done in {report.wall_clock[-1]:.1f}s: loss={report.losses[-1]:.4e}, "
                     f"residual={report.residuals[-1]:.4e}")
    return TrainResult(decoder, report, state, schedule)


def _progress(cfg, step, report):
    if cfg.log_every and (step % cfg.log_every == 0):
        logging.info(f"[TRAIN] step {step} ({report.phases[-1]}): loss={report.losses[-1]:.4e} "
                     f"eps={report.eps[-1]:.3g} ell={report.ell[-1]:.3g} elapsed={report.wall_clock[-1]:.1f}s")


def _spot_check(cfg, step, decoder, batch, state):
    if not cfg.gradcheck_every or step % cfg.gradcheck_every:
        return
    item = batch.items[0]
    single = PreparedBatch(batch.grid, [item], item.theta[None], item.z[None], item.zdot[None])
    error = _gradient_error(decoder, single, state.barrier, cfg)
    level = logging.INFO if error < 1e-4 else logging.WARNING
    logging.log(level, f"[TRAIN] gradient check at step {step}: max relative error {error:.3e}")


# Decoding and per-instance refinement

def decode_trajectory(decoder, item, grid=None):
    """PhaseTrajectory of one prepared instance on its latent grid"""
    times = as_tensor(item.latent.grid.times)
    with torch.no_grad():
        out = decoder(item.theta[None], times, item.z[None])[0]
    x, p = from_decoder_layout(out, decoder.n_agents, decoder.dx)
    return PhaseTrajectory(item.latent.grid, x, p)


@dataclass
class RefineResult:
    delta: list
    trajectory: PhaseTrajectory
    failed: bool
    losses: list


def refine_instance(inst, decoder, family, latent_cfg, max_steps, bp, grid, cfg=None):
    """L-BFGS on one instance's PMP loss, on a private copy of the shared weights"""
    cfg = cfg or TrainConfig(weight_decay=0.0)
    local = copy.deepcopy(decoder)
    item = prepare_instance(inst, family, latent_cfg, grid)
    batch = PreparedBatch(grid, [item], item.theta[None], item.z[None], item.zdot[None])
    params = list(local.parameters())

    def current_loss():
        with torch.no_grad():
            return float(total_loss(batch, local, bp, cfg).total)

    best_loss = current_loss()
    best_state = copy.deepcopy(local.state_dict())
    losses = [best_loss]
    failed = False

    if max_steps > 0:
        optimizer = torch.optim.LBFGS(params, lr=1.0, max_iter=1, history_size=cfg.lbfgs_memory,
                                      line_search_fn='strong_wolfe')

        def closure():
            optimizer.zero_grad()
            loss = total_loss(batch, local, bp, cfg).total
            loss.backward()
            return loss

        for _ in range(max_steps):
            try:
                optimizer.step(closure)
            except RuntimeError as e:
                logging.warning(f"[REFINE] ⚠ Line search failed: {e}")
                failed = True
                break
            loss = current_loss()
            losses.append(loss)
            if not math.isfinite(loss):
                failed = True
                break
            if loss < best_loss:
                best_loss = loss
                best_state = copy.deepcopy(local.state_dict())

        local.load_state_dict(best_state)

    shared = dict(decoder.named_parameters())
    delta = [(p.detach() - shared[name].detach()).clone() for name, p in local.named_parameters()]
    return RefineResult(delta, decode_trajectory(local, item), failed, losses)


def apply_delta(decoder, delta):
    """Copy of the shared decoder with a per-instance weight delta added"""
    local = copy.deepcopy(decoder)
    with torch.no_grad():
        for p, d in zip(local.parameters(), delta):
            p.add_(d)
    return local


# Finite-difference check of the loss gradient

def _gradient_error(decoder, batch, bp, cfg, step=1e-5):
    params = list(decoder.parameters())
    decoder.zero_grad()
    total_loss(batch, decoder, bp, cfg).total.backward()
    analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    decoder.zero_grad()

    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat, gflat = p.view(-1), g.view(-1)
            for idx in range(flat.numel()):
                original = flat[idx].item()
                flat[idx] = original + step
                up = total_loss(batch, decoder, bp, cfg).total.item()
                flat[idx] = original - step
                down = total_loss(batch, decoder, bp, cfg).total.item()
                flat[idx] = original
                fd = (up - down) / (2 * step)
                ga = gflat[idx].item()
                worst = max(worst, abs(ga - fd) / max(abs(ga), 1e-8))
    return worst


def gradient_check(decoder, inst, bp, family, latent_cfg, grid, cfg=None):
    """Max relative error of the autograd loss gradient against central differences"""
    cfg = cfg or TrainConfig(weight_decay=0.0)
    item = prepare_instance(inst, family, latent_cfg, grid)
    batch = PreparedBatch(grid, [item], item.theta[None], item.z[None], item.zdot[None])
    return _gradient_error(decoder, batch, bp, cfg)
