from dataclasses import replace

import numpy as np
import pytest
import torch

from modules import symplectic_decoder, training
from modules.error_handler import GridMismatchError
from modules.hamiltonian import BarrierParams, PhysicsModel
from modules.latent_solver import LatentConfig, solve_latent_bvp
from modules.persistence import flatten_weights
from modules.phase_core import TimeGrid
from modules.scenario_gen import make_family, sample_instance, sample_split
from modules.symplectic_decoder import DecoderConfig, build_decoder, randomize_weights, zero_weights
from modules.training import (AnnealSchedule, TrainConfig, apply_delta, decode_trajectory, gradient_check,
                              minibatch_indices, pmp_residuals, prepare_batch, prepare_instance,
                              pretrain_regression, refine_instance, total_loss, train)

FIXED = {'eps': 1e-4, 'ell': 1e-4}
NO_DECAY = TrainConfig(weight_decay=0.0)


def _decoder(family, cfg, seed=0):
    cfg = replace(cfg, theta_dim=family.theta_dim)
    return build_decoder(cfg, family.n_agents, 2 * family.spatial_dim, family.horizon, seed)


@pytest.fixture
def lone_agent():
    """No drag, no interactions: latent and physical PMP systems coincide"""
    family = make_family('free', 1, {'drag_law': 'none', 'train_count': 2, 'test_count': 2})
    return family, sample_instance(family, 'train', 0)


class _FlippedShift(torch.autograd.Function):
    """Correct up-shear forward, sign-flipped gradient into sigma"""

    @staticmethod
    def forward(ctx, y, beta, sigma):
        ctx.save_for_backward(beta)
        return y + beta * sigma

    @staticmethod
    def backward(ctx, grad):
        (beta,) = ctx.saved_tensors
        return grad, None, -beta * grad


def test_identity_decoder_solves_zero_interaction_case(lone_agent, small_decoder_cfg):
    family, inst = lone_agent
    grid = TimeGrid.uniform(1.0, 17)
    latent = solve_latent_bvp(inst, LatentConfig('lqr', 0.0, 2.0 * inst.cost.velocity_weight), grid)
    decoder = zero_weights(_decoder(family, small_decoder_cfg))
    r_x, r_p = pmp_residuals(inst, decoder, latent, BarrierParams(1e-4, 1e-4), family, grid)
    assert r_x.shape == (17, 1, 4)
    assert float(r_x.abs().max()) < 1e-8
    assert float(r_p.abs().max()) < 1e-8


def test_residuals_reject_a_different_grid(lone_agent, small_decoder_cfg):
    family, inst = lone_agent
    latent = solve_latent_bvp(inst, LatentConfig(), TimeGrid.uniform(1.0, 9))
    with pytest.raises(GridMismatchError):
        pmp_residuals(inst, _decoder(family, small_decoder_cfg), latent, BarrierParams(1, 1), family,
                      TimeGrid.uniform(1.0, 17))


def test_costate_residual_carries_the_barrier_gradient(obstacle2, small_decoder_cfg, fine_grid):
    inst = sample_instance(obstacle2, 'train', 0)
    cfg = LatentConfig('lqr', 0.0, 2.0)
    latent = solve_latent_bvp(inst, cfg, fine_grid)
    decoder = zero_weights(_decoder(obstacle2, small_decoder_cfg))
    bp = BarrierParams(0.1, 0.1)
    _, r_p = pmp_residuals(inst, decoder, latent, bp, obstacle2, fine_grid)

    # zero weights: decoded (x, p) is the latent point, whose own flow lacks the barrier
    model = PhysicsModel(inst)
    x = torch.as_tensor(latent.y)
    gx_barrier = -model.barrier_grad(x[..., :2], bp)
    expected = torch.as_tensor(latent.qdot[..., :2]) + gx_barrier
    np.testing.assert_allclose(r_p[..., :2].detach().numpy(), expected.detach().numpy(), atol=1e-12)
    assert float(gx_barrier.abs().max()) > 0


def test_endpoint_penalties_vanish(free2, small_decoder_cfg, fine_grid):
    decoder = randomize_weights(_decoder(free2, small_decoder_cfg), 0.25, seed=1)
    batch = prepare_batch(sample_split(free2, 'train'), free2, LatentConfig(), fine_grid)
    parts = total_loss(batch, decoder, BarrierParams(1e-2, 1e-2), NO_DECAY)
    assert float(parts.ic) < 1e-16
    assert float(parts.tc) < 1e-16


def test_duplicating_the_batch_keeps_the_loss(free2, small_decoder_cfg, fine_grid):
    decoder = randomize_weights(_decoder(free2, small_decoder_cfg), 0.25, seed=2)
    instances = sample_split(free2, 'train')[:2]
    bp = BarrierParams(1e-2, 1e-2)
    once = total_loss(prepare_batch(instances, free2, LatentConfig(), fine_grid), decoder, bp, NO_DECAY)
    twice = total_loss(prepare_batch(instances * 2, free2, LatentConfig(), fine_grid), decoder, bp, NO_DECAY)
    assert float(twice.total) == pytest.approx(float(once.total), rel=1e-12)


def test_weight_decay_is_the_only_loss_of_an_exact_decoder(lone_agent, small_decoder_cfg, fine_grid):
    family, inst = lone_agent
    decoder = _decoder(family, small_decoder_cfg)
    cfg = TrainConfig(weight_decay=1e-3)
    batch = prepare_batch([inst], family, LatentConfig('lqr', 0.0, 2.0), fine_grid)
    parts = total_loss(batch, decoder, BarrierParams(1e-4, 1e-4), cfg)
    assert float(parts.residual) < 1e-16
    assert float(parts.total) == pytest.approx(1e-3 * float(decoder.weight_norm_sq()), rel=1e-10)


def test_gradient_check_zero_weights(lone_agent, small_decoder_cfg, fine_grid):
    family, inst = lone_agent
    decoder = zero_weights(_decoder(family, small_decoder_cfg))
    error = gradient_check(decoder, inst, BarrierParams(1e-4, 1e-4), family, LatentConfig(), fine_grid)
    assert error < 1e-6


def test_gradient_check_random_weights(obstacle2, small_decoder_cfg, fine_grid):
    inst = sample_instance(obstacle2, 'train', 0)
    decoder = randomize_weights(_decoder(obstacle2, small_decoder_cfg), 0.25, seed=3)
    error = gradient_check(decoder, inst, BarrierParams(0.5, 0.5), obstacle2, LatentConfig(), fine_grid)
    assert error < 1e-4


def test_gradient_check_catches_a_broken_backward(obstacle2, small_decoder_cfg, fine_grid, monkeypatch):
    inst = sample_instance(obstacle2, 'train', 0)
    decoder = randomize_weights(_decoder(obstacle2, small_decoder_cfg), 0.25, seed=3)
    monkeypatch.setattr(symplectic_decoder, '_up_shift', _FlippedShift.apply)
    error = gradient_check(decoder, inst, BarrierParams(0.5, 0.5), obstacle2, LatentConfig(), fine_grid)
    assert error > 1e-1


def test_annealing_schedule():
    schedule = AnnealSchedule.from_dict({'eps0': 0.1, 'ell0': 0.1, 'rho_eps': 0.6, 'rho_ell': 0.6,
                                         'period_steps': 20})
    state = schedule.at(60)
    assert state.stage == 3
    assert state.eps == pytest.approx(0.0216)
    assert schedule.at(19).stage == 0

    fixed = AnnealSchedule.from_dict(FIXED)
    assert fixed.at(1000).eps == 1e-4


@pytest.mark.parametrize('anneal', [
    {'eps0': 0.1, 'ell0': 0.1, 'rho_eps': 1.0, 'rho_ell': 0.5, 'period_steps': 20},
    {'eps0': 0.1, 'ell0': 0.1, 'rho_eps': 0.5, 'rho_ell': 0.5, 'period_steps': 0},
    {'eps': 0.0, 'ell': 1e-4},
    {'eps': 1e-4, 'ell': 1e-4, 'period_steps': 3},
])
def test_invalid_anneal_blocks(anneal):
    assert TrainConfig(anneal=anneal).validate()


def test_train_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        TrainConfig.from_dict({'adam_steps': 1, 'momentum': 0.9})
    assert TrainConfig.from_dict(TrainConfig().to_dict()) == TrainConfig()


def test_minibatches_cover_each_instance_once_per_pass():
    assert minibatch_indices(5, None, 0, 0) is None
    assert minibatch_indices(5, 5, 3, 0) is None
    for sweep in range(2):
        chunks = [minibatch_indices(5, 2, 3 * sweep + slot, 7) for slot in range(3)]
        assert [len(c) for c in chunks] == [2, 2, 1]
        assert sorted(np.concatenate(chunks).tolist()) == [0, 1, 2, 3, 4]
    np.testing.assert_array_equal(minibatch_indices(5, 2, 1, 7), minibatch_indices(5, 2, 1, 7))


def test_batch_size_must_be_positive():
    assert TrainConfig(batch_size=0).validate()
    assert not TrainConfig(batch_size=2).validate()


def test_adam_steps_use_minibatches(free2, small_decoder_cfg, monkeypatch):
    sizes = []

    def spy(batch, decoder, bp, cfg):
        sizes.append(len(batch))
        return total_loss(batch, decoder, bp, cfg)

    monkeypatch.setattr(training, 'total_loss', spy)
    cfg = TrainConfig(adam_steps=4, lbfgs_steps=1, collocation_count=8, batch_size=3)
    result = train(free2, sample_split(free2, 'train'), cfg, small_decoder_cfg, LatentConfig())
    assert sizes[:4] == [3, 1, 3, 1]
    # L-BFGS always sees the full set
    assert set(sizes[4:]) == {4}
    assert result.report.phases == ['adam'] * 4 + ['lbfgs']


def test_zero_steps_returns_the_initialization(free2, small_decoder_cfg):
    cfg = TrainConfig(adam_steps=0, lbfgs_steps=0, collocation_count=8, rng_seed=4)
    result = train(free2, sample_split(free2, 'train'), cfg, small_decoder_cfg, LatentConfig())
    expected = _decoder(free2, small_decoder_cfg, seed=4)
    np.testing.assert_array_equal(flatten_weights(result.decoder), flatten_weights(expected))
    assert result.report.losses == []


def test_training_is_deterministic(free2, small_decoder_cfg):
    cfg = TrainConfig(adam_steps=4, lbfgs_steps=2, collocation_count=8, anneal={'eps': 1e-2, 'ell': 1e-2})
    instances = sample_split(free2, 'train')
    first = train(free2, instances, cfg, small_decoder_cfg, LatentConfig())
    second = train(free2, instances, cfg, small_decoder_cfg, LatentConfig())
    assert first.report.losses == second.report.losses
    assert len(first.report.losses) == 6
    assert first.report.phases == ['adam'] * 4 + ['lbfgs'] * 2


def test_annealed_training_records_each_stage(free2, small_decoder_cfg):
    anneal = {'eps0': 0.1, 'ell0': 0.1, 'rho_eps': 0.5, 'rho_ell': 0.5, 'period_steps': 2}
    cfg = TrainConfig(adam_steps=6, lbfgs_steps=1, collocation_count=8, anneal=anneal)
    result = train(free2, sample_split(free2, 'train'), cfg, small_decoder_cfg, LatentConfig())
    assert result.report.eps[:6] == pytest.approx([0.1, 0.1, 0.05, 0.05, 0.025, 0.025])
    # quasi-Newton runs at the last Adam stage
    assert result.report.eps[-1] == pytest.approx(0.025)
    assert result.anneal_state.stage == 2


def test_pretraining_on_latent_positions_stays_at_zero(free2, small_decoder_cfg, fine_grid):
    instances = sample_split(free2, 'train')
    batch = prepare_batch(instances, free2, LatentConfig(), fine_grid)
    refs = np.stack([it.latent.y[..., :2] for it in batch.items])
    decoder = _decoder(free2, small_decoder_cfg)
    losses = pretrain_regression(decoder, batch, refs, steps=5)
    assert len(losses) == 6
    assert max(losses) < 1e-20


def test_pretraining_reduces_the_mismatch(free2, small_decoder_cfg, fine_grid):
    instances = sample_split(free2, 'train')
    batch = prepare_batch(instances, free2, LatentConfig(), fine_grid)
    shifted = batch.items[0].latent.y[..., :2] + 0.05 * np.sin(np.pi * fine_grid.times)[:, None, None]
    decoder = _decoder(free2, small_decoder_cfg)
    losses = pretrain_regression(decoder, batch, shifted, steps=100, lr=1e-2)
    assert losses[-1] < losses[0]


def test_refinement_with_no_steps_is_the_identity(free2, small_decoder_cfg, fine_grid):
    inst = sample_instance(free2, 'test', 0)
    decoder = randomize_weights(_decoder(free2, small_decoder_cfg), 0.25, seed=6)
    before = flatten_weights(decoder)
    result = refine_instance(inst, decoder, free2, LatentConfig(), 0, BarrierParams(1e-2, 1e-2), fine_grid)
    assert all(float(d.abs().max()) == 0.0 for d in result.delta)
    baseline = decode_trajectory(decoder, prepare_instance(inst, free2, LatentConfig(), fine_grid))
    np.testing.assert_array_equal(result.trajectory.x, baseline.x)
    np.testing.assert_array_equal(flatten_weights(decoder), before)


def test_refinement_does_not_touch_shared_weights(free2, small_decoder_cfg, fine_grid):
    inst = sample_instance(free2, 'test', 1)
    decoder = randomize_weights(_decoder(free2, small_decoder_cfg), 0.1, seed=8)
    before = flatten_weights(decoder)
    bp = BarrierParams(1e-2, 1e-2)
    result = refine_instance(inst, decoder, free2, LatentConfig(), 3, bp, fine_grid)
    np.testing.assert_array_equal(flatten_weights(decoder), before)
    assert min(result.losses) <= result.losses[0]

    refined = apply_delta(decoder, result.delta)
    batch = prepare_batch([inst], free2, LatentConfig(), fine_grid)
    with torch.no_grad():
        loss = float(total_loss(batch, refined, bp, NO_DECAY).total)
    assert loss == pytest.approx(min(result.losses), rel=1e-9)


@pytest.mark.slow
def test_two_agent_free_family_converges():
    family = make_family('free', 2)
    cfg = TrainConfig(adam_steps=150, lbfgs_steps=100, anneal=FIXED)
    result = train(family, sample_split(family, 'train'), cfg, DecoderConfig(), LatentConfig('lqr', 0.0, 2.0))
    assert result.report.residuals[-1] < 1e-2
