#!/usr/bin/env python3
"""
pisonet - Multi-agent optimal-control trajectories from a latent Hamiltonian solve and a symplectic decoder
Command-line entry point and read-only run dashboard
"""

import argparse
import logging
import os
import sys

import numpy as np
import torch
from flask import Flask, Response, jsonify, request

from config import Config, load_config
from modules.eikonal_ref import SdeConfig, generate_reference
from modules.error_handler import ErrorHandler, PisonetError
from modules.evaluation import (clearance_vs_radius, decode_dense, evaluate_batch, format_table,
                                interpolate_positions, oracle_cost_gap)
from modules.hamiltonian import BarrierParams
from modules.invariant_check import run_invariant_suite
from modules.latent_solver import LatentConfig
from modules.logging_system import RunLedger
from modules.persistence import (checkpoint_metadata, load_decoder, read_instance_set, read_json, read_trajectory,
                                 save_checkpoint, write_instance_set, write_json, write_trajectory)
from modules.phase_core import EnvironmentSpec, PhaseTrajectory, TimeGrid
from modules.render_svg import RenderOptions, render_svg, render_svg_string
from modules.scenario_gen import make_family, nominal_instance, sample_split
from modules.symplectic_decoder import DecoderConfig
from modules.training import TrainConfig, train
from utils.logger import banner, setup_logging

app = Flask(__name__)

CONFIG = load_config()

# Initialized on first use so importing the app has no side effects on disk
ledger = None
error_handler = None

# Reference rollouts in the maze need much weaker repulsion than the shipped defaults
MAZE_SDE = SdeConfig(c1=1e3, c2=1e5)


def get_ledger():
    global ledger
    if ledger is None:
        ledger = RunLedger(Config.DATABASE_FILE)
    return ledger


def get_error_handler():
    global error_handler
    if error_handler is None:
        error_handler = ErrorHandler(get_ledger())
        error_handler.initialize(CONFIG)
    return error_handler


# Dashboard

@app.route('/api/dashboard/stats', methods=['GET'])
def dashboard_stats():
    """Run counts, failures and pass rates"""
    return jsonify(get_ledger().get_statistics())


@app.route('/api/dashboard/runs', methods=['GET'])
def dashboard_runs():
    limit = request.args.get('limit', 100, type=int)
    return jsonify(get_ledger().get_recent_runs(limit))


@app.route('/api/dashboard/errors', methods=['GET'])
def dashboard_errors():
    limit = request.args.get('limit', 50, type=int)
    return jsonify(get_ledger().get_recent_errors(limit))


@app.route('/api/plot', methods=['GET'])
def plot_trajectory():
    """SVG for a trajectory CSV in an environment file"""
    traj_path = request.args.get('traj')
    env_path = request.args.get('env')
    if not env_path or not os.path.exists(env_path):
        return jsonify({'error': 'Environment not found'}), 404
    try:
        env = load_environment(env_path)
        traj, controls = None, None
        if traj_path:
            if not os.path.exists(traj_path):
                return jsonify({'error': 'Trajectory not found'}), 404
            traj, controls, _ = read_trajectory(traj_path)
        arrows = request.args.get('arrows', 'false').lower() == 'true'
        svg = render_svg_string(traj, env, RenderOptions(arrows=arrows), controls)
        return Response(svg, mimetype='image/svg+xml')
    except Exception as e:
        logging.error(f"Plot error: {str(e)}", exc_info=True)
        return jsonify({'error': str(e)}), 500


# Helpers shared by commands

def load_environment(path):
    """EnvironmentSpec from an environment, family or instance JSON document"""
    data = read_json(path)
    if 'env' in data:
        data = data['env']
    return EnvironmentSpec.from_dict(data)


def _block(config, name, cls):
    try:
        return cls.from_dict(config.get(name, {}))
    except (TypeError, ValueError) as e:
        raise ValueError(f"Invalid '{name}' block: {e}") from e


def _check(problems, name):
    if problems:
        raise ValueError(f"Invalid '{name}' block: {'; '.join(problems)}")


def _pretrain_references(block, grid):
    if not block:
        return None
    traj, _, _ = read_trajectory(block['references'])
    return {'references': interpolate_positions(traj, grid.times), 'steps': int(block.get('steps', 500))}


def _reference_trajectory(positions, grid):
    velocities = np.gradient(positions, grid.times, axis=0)
    x = np.concatenate([positions, velocities], axis=-1)
    return PhaseTrajectory(grid, x, np.zeros_like(x))


# Commands

def cmd_gen(args):
    overrides = {'train_count': args.train, 'test_count': args.test, 'seed': args.seed}
    family = make_family(args.family, args.n, overrides)
    splits = {split: sample_split(family, split) for split in ('train', 'test')}
    write_instance_set(args.out, family, splits)
    return 0


def cmd_train(args):
    config = read_json(args.config)
    unknown = set(config) - {'family', 'train', 'decoder', 'latent', 'pretrain'}
    if unknown:
        raise ValueError(f"Unknown config blocks: {sorted(unknown)}")

    fam = config.get('family', {})
    family = make_family(fam['name'], int(fam['N']), fam.get('overrides'))
    train_cfg = _block(config, 'train', TrainConfig)
    decoder_cfg = _block(config, 'decoder', DecoderConfig)
    latent_cfg = _block(config, 'latent', LatentConfig)
    _check(train_cfg.validate(), 'train')
    _check(decoder_cfg.validate(), 'decoder')
    _check(latent_cfg.validate(), 'latent')

    instances = sample_split(family, 'train')
    grid = TimeGrid.uniform(family.horizon, train_cfg.collocation_count)
    pretrain = _pretrain_references(config.get('pretrain'), grid)
    init_decoder = None
    if train_cfg.init_checkpoint:
        init_decoder, _ = load_decoder(train_cfg.init_checkpoint, family)

    run_id = get_ledger().log_train_start(family.name, family.n_agents, len(instances), train_cfg)
    try:
        result = train(family, instances, train_cfg, decoder_cfg, latent_cfg, pretrain, init_decoder)
    except Exception as e:
        get_ledger().log_train_complete(run_id, False, error_message=str(e))
        raise

    meta = checkpoint_metadata(result.decoder, family, latent_cfg, train_cfg, result.anneal_state, result.report)
    save_checkpoint(args.out, result.decoder, meta)
    result.report.checkpoint = args.out
    write_json(args.out + '.report.json', result.report.to_dict())
    get_ledger().log_train_complete(run_id, True, result.report, args.out)
    return 0


def _barrier_from(meta):
    state = meta.get('anneal_state')
    return BarrierParams(state['eps'], state['ell']) if state else None


def cmd_infer(args):
    family, splits = read_instance_set(args.instances)
    decoder, meta = load_decoder(args.ckpt, family)
    latent_cfg = LatentConfig.from_dict(meta['latent'])
    os.makedirs(args.out, exist_ok=True)
    count = CONFIG['COLLOCATION_COUNT']
    for split, instances in splits.items():
        if not instances:
            continue
        grid = TimeGrid.uniform(instances[0].horizon, count).refine(CONFIG['DENSE_REFINEMENT'])
        for i, inst in enumerate(instances):
            traj = decode_dense(inst, decoder, family, latent_cfg, grid)
            write_trajectory(os.path.join(args.out, f'{split}_{i:03d}.csv'), traj, inst)
    logging.info(f"[CLI] ✓ Trajectories written to {args.out}")
    return 0


def cmd_eval(args):
    family, splits = read_instance_set(args.instances)
    decoder, meta = load_decoder(args.ckpt, family)
    latent_cfg = LatentConfig.from_dict(meta['latent'])
    reports = {}
    for split, instances in splits.items():
        reports[split] = evaluate_batch(instances, decoder, family, latent_cfg, CONFIG['DENSE_REFINEMENT'],
                                        CONFIG['COLLOCATION_COUNT'], _barrier_from(meta), args.refine, split)
        get_ledger().log_eval(args.ckpt, split, reports[split])
    document = {split: report.to_dict() for split, report in reports.items()}

    if args.oracle:
        document['oracle'] = oracle_cost_gap(splits.get('test') or [], decoder, family, latent_cfg, args.oracle,
                                             CONFIG['ORACLE_KNOTS'], CONFIG['DENSE_REFINEMENT'],
                                             CONFIG['COLLOCATION_COUNT'])
    if args.clearance:
        document['clearance'] = clearance_vs_radius(decoder, family, latent_cfg,
                                                    refinement=CONFIG['DENSE_REFINEMENT'],
                                                    collocation_count=CONFIG['COLLOCATION_COUNT'])

    write_json(args.report, document)
    print(format_table(reports))
    if 'oracle' in document:
        print(f"Oracle gap: {document['oracle']['mean_relative_gap']:+.2%}")
    if 'clearance' in document:
        print(f"Clearance vs radius: {'PASS' if document['clearance']['passed'] else 'FAIL'}")
    return 0


def cmd_eikonal(args):
    family = make_family(args.family, args.n)
    inst = nominal_instance(family)
    sde = MAZE_SDE if family.name == 'maze' else SdeConfig()
    sde = SdeConfig(**{**sde.to_dict(), 'trials': args.trials})
    grid = TimeGrid.uniform(inst.horizon, CONFIG['COLLOCATION_COUNT'])
    result = generate_reference(inst, grid, sde, args.spacing or CONFIG['EIKONAL_SPACING'], Config.THREADS)

    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, 'reference.csv')
    metrics = {'trial': result.trial, 'detour_ratio': result.detour,
               'reached': [r.reached for r in result.rollouts], 'sde': sde.to_dict()}
    write_trajectory(path, _reference_trajectory(result.positions, grid), inst, metrics)
    write_json(os.path.join(args.out, 'env.json'), inst.env.to_dict())
    return 0


def cmd_plot(args):
    env = load_environment(args.env)
    render_svg(args.traj, env, args.out, RenderOptions(arrows=args.arrows))
    return 0


def cmd_check(args):
    results = run_invariant_suite()
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<26} {r.detail} ({r.seconds:.2f}s)")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} invariants hold")
    return 1 if failed else 0


def cmd_serve(args):
    port = args.port or CONFIG['DASHBOARD_PORT']
    logging.info(f"→ Dashboard: http://0.0.0.0:{port}/api/dashboard/stats")
    app.run(host='0.0.0.0', port=port, debug=False, threaded=True)
    return 0


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog='app.py', description='pisonet command line')
    sub = parser.add_subparsers(dest='command', parser_class=_Parser)

    p = sub.add_parser('gen', help='sample train/test instance sets')
    p.add_argument('--family', required=True)
    p.add_argument('--n', type=int, required=True)
    p.add_argument('--train', type=int, default=20)
    p.add_argument('--test', type=int, default=20)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_gen)

    p = sub.add_parser('train', help='train a decoder from a JSON config')
    p.add_argument('--config', required=True)
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser('infer', help='write trajectory files for an instance set')
    p.add_argument('--ckpt', required=True)
    p.add_argument('--instances', required=True)
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_infer)

    p = sub.add_parser('eval', help='evaluate a checkpoint on an instance set')
    p.add_argument('--ckpt', required=True)
    p.add_argument('--instances', required=True)
    p.add_argument('--report', required=True)
    p.add_argument('--refine', type=int, default=0)
    p.add_argument('--oracle', type=int, default=0, help='compare this many test instances with the direct solver')
    p.add_argument('--clearance', action='store_true', help='clearance vs obstacle radius check')
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser('eikonal', help='generate a reference path for pretraining')
    p.add_argument('--family', default='maze')
    p.add_argument('--n', type=int, default=4)
    p.add_argument('--spacing', type=float, default=None)
    p.add_argument('--trials', type=int, default=5)
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_eikonal)

    p = sub.add_parser('plot', help='render a trajectory file as SVG')
    p.add_argument('--traj', required=True)
    p.add_argument('--env', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--arrows', action='store_true')
    p.set_defaults(handler=cmd_plot)

    p = sub.add_parser('check', help='run the invariant suite')
    p.set_defaults(handler=cmd_check)

    p = sub.add_parser('serve', help='run the read-only dashboard')
    p.add_argument('--port', type=int, default=None)
    p.set_defaults(handler=cmd_serve)
    return parser


def main(argv=None):
    """Exit code: 0 success, 1 validation or usage failure, 2 I/O failure"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    if not getattr(args, 'handler', None):
        parser.print_usage(sys.stderr)
        return 1

    setup_logging(Config.LOG_FILE)
    torch.set_num_threads(max(1, Config.THREADS))
    banner(f"PISONET {args.command.upper()}")
    try:
        return args.handler(args)
    except (PisonetError, OSError, ValueError, KeyError, TypeError, RuntimeError) as e:
        logging.error(f"[CLI] {args.command} failed: {e}", exc_info=True)
        get_error_handler().handle_error(e, args.command)
        return ErrorHandler.exit_code(e)


if __name__ == '__main__':
    sys.exit(main())
