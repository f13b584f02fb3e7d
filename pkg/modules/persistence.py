"""
Persistence Module
Binary checkpoints, trajectory CSV files with JSON sidecars, instance sets and reports
"""

import csv
import hashlib
import json
import logging
import os
import struct
import zlib

import numpy as np
import torch
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from modules.error_handler import (CheckpointFormatError, CheckpointIntegrityError, CheckpointMismatchError,
                                   CheckpointVersionError)
from modules.latent_solver import PretrainedDecoder
from modules.phase_core import PhaseTrajectory, ProblemInstance, TimeGrid
from modules.scenario_gen import FamilySpec
from modules.symplectic_decoder import DecoderConfig, build_decoder, count_parameters

MAGIC = b'PISN'
VERSION = 1
_HEADER = struct.Struct('<4sIQ')
_COUNT = struct.Struct('<Q')
_CRC = struct.Struct('<I')


def _dump_json(data):
    return json.dumps(data, sort_keys=True, indent=2, allow_nan=True)


def _ensure_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


# Checkpoints

def flatten_weights(decoder):
    params = list(decoder.parameters())
    if not params:
        return np.zeros(0)
    return parameters_to_vector(params).detach().numpy().astype('<f8')


def save_checkpoint(path, weights, metadata):
    """Magic + version, JSON metadata, length-prefixed little-endian f8 payload, CRC32"""
    if isinstance(weights, torch.nn.Module):
        weights = flatten_weights(weights)
    payload = np.ascontiguousarray(weights, dtype='<f8').tobytes()
    meta = _dump_json(metadata).encode('utf-8')

    _ensure_parent(path)
    with open(path, 'wb') as f:
        f.write(_HEADER.pack(MAGIC, VERSION, len(meta)))
        f.write(meta)
        f.write(_COUNT.pack(len(payload) // 8))
        f.write(payload)
        f.write(_CRC.pack(zlib.crc32(payload) & 0xFFFFFFFF))
    logging.info(f"[CKPT] ✓ Saved {len(payload) // 8} weights to {path}")


def load_checkpoint(path):
    """(weights, metadata); raises on truncation, bad magic, version, length or CRC"""
    with open(path, 'rb') as f:
        blob = f.read()

    if len(blob) < _HEADER.size:
        raise CheckpointFormatError(f"{path}: truncated header")
    magic, version, meta_len = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, reader supports {VERSION}")

    cursor = _HEADER.size
    if len(blob) < cursor + meta_len + _COUNT.size:
        raise CheckpointFormatError(f"{path}: truncated metadata")
    try:
        metadata = json.loads(blob[cursor:cursor + meta_len].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{path}: unreadable metadata ({e})") from e
    cursor += meta_len

    (count,) = _COUNT.unpack_from(blob, cursor)
    cursor += _COUNT.size
    expected = cursor + 8 * count + _CRC.size
    if len(blob) != expected:
        raise CheckpointFormatError(f"{path}: length mismatch ({len(blob)} bytes, expected {expected})")

    payload = blob[cursor:cursor + 8 * count]
    (crc,) = _CRC.unpack_from(blob, cursor + 8 * count)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CheckpointIntegrityError(f"{path}: payload CRC mismatch")
    weights = np.frombuffer(payload, dtype='<f8').astype(np.float64)
    return weights, metadata


def checkpoint_metadata(decoder, family, latent_cfg, train_cfg=None, anneal_state=None, report=None, theta=None):
    meta = {
        'decoder': decoder.cfg.to_dict(),
        'n_agents': decoder.n_agents,
        'dx': decoder.dx,
        'horizon': decoder.horizon,
        'family': family.to_dict(),
        'family_digest': family.digest(),
        'latent': latent_cfg.to_dict(),
    }
    if train_cfg is not None:
        meta['train'] = train_cfg.to_dict()
    if anneal_state is not None:
        meta['anneal_state'] = {'stage': anneal_state.stage, 'eps': anneal_state.eps, 'ell': anneal_state.ell}
    if report is not None:
        meta['summary'] = {
            'steps': len(report.losses),
            'final_loss': report.losses[-1] if report.losses else None,
            'final_residual': report.residuals[-1] if report.residuals else None,
            'wall_clock': report.wall_clock[-1] if report.wall_clock else 0.0,
        }
    if theta is not None:
        meta['theta'] = [float(v) for v in theta]
    return meta


def load_decoder(path, family=None):
    """Rebuild the decoder a checkpoint was written from; (decoder, metadata)"""
    weights, meta = load_checkpoint(path)
    try:
        cfg = DecoderConfig.from_dict(meta['decoder'])
        N, dx, horizon = int(meta['n_agents']), int(meta['dx']), float(meta.get('horizon', 1.0))
    except (KeyError, ValueError, TypeError) as e:
        raise CheckpointFormatError(f"{path}: incomplete metadata ({e})") from e

    expected = count_parameters(cfg, N, dx)
    if weights.shape[0] != expected:
        raise CheckpointMismatchError(
            f"{path}: {weights.shape[0]} weights stored, architecture needs {expected}")

    decoder = build_decoder(cfg, N, dx, horizon)
    if expected:
        vector_to_parameters(torch.as_tensor(weights.copy()), list(decoder.parameters()))

    if family is not None and meta.get('family_digest') != family.digest():
        logging.warning(f"[CKPT] ⚠ {path} was trained on a different family spec "
                        f"({meta.get('family', {}).get('name')}); continuing")
    return decoder, meta


def checkpoint_family(meta):
    return FamilySpec.from_dict(meta['family'])


def load_pretrained(path):
    decoder, meta = load_decoder(path)
    theta = np.asarray(meta.get('theta', [0.0] * decoder.cfg.theta_dim), dtype=np.float64)
    return PretrainedDecoder(decoder, theta, meta)


# Trajectory files

def trajectory_columns(d):
    return (['t', 'agent'] + [f'w{c}' for c in range(d)] + [f'v{c}' for c in range(d)]
            + [f'pw{c}' for c in range(d)] + [f'pv{c}' for c in range(d)] + [f'u{c}' for c in range(d)])


def instance_digest(inst):
    canonical = json.dumps(inst.to_dict(), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def write_trajectory(path, traj, inst, metrics=None):
    """One row per (t, agent), floats in shortest round-trip form; sidecar JSON next to it"""
    d = inst.dx // 2
    controls = traj.p[..., d:] / (2.0 * inst.cost.control_weight)
    _ensure_parent(path)
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(trajectory_columns(d))
        for j, t in enumerate(traj.grid.times):
            for i in range(inst.n_agents):
                values = np.concatenate([traj.x[j, i], traj.p[j, i], controls[j, i]])
                writer.writerow([repr(float(t)), i] + [repr(float(v)) for v in values])

    sidecar = {'instance_digest': instance_digest(inst), 'instance': inst.to_dict(), 'metrics': metrics or {}}
    with open(path + '.json', 'w') as f:
        f.write(_dump_json(sidecar))


def read_trajectory(path):
    """(PhaseTrajectory, controls, sidecar dict or None)"""
    with open(path, 'r', newline='') as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader if row]
    d = (len(header) - 2) // 5
    if header != trajectory_columns(d):
        raise ValueError(f"{path}: unexpected trajectory header {header}")

    sidecar = None
    if os.path.exists(path + '.json'):
        with open(path + '.json', 'r') as f:
            sidecar = json.load(f)

    if not rows:
        return None, np.zeros((0, 0, d)), sidecar
    data = np.asarray(rows)
    times = np.unique(data[:, 0])
    N = int(data[:, 1].max()) + 1
    block = data[:, 2:].reshape(len(times), N, 5 * d)
    x, p, u = block[..., :2 * d], block[..., 2 * d:4 * d], block[..., 4 * d:]
    return PhaseTrajectory(TimeGrid(times), x, p), u, sidecar


# Instance sets and reports

def write_instance_set(directory, family, splits):
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, 'family.json'), 'w') as f:
        f.write(_dump_json(family.to_dict()))
    for split, instances in splits.items():
        with open(os.path.join(directory, f'{split}.json'), 'w') as f:
            f.write(_dump_json([inst.to_dict() for inst in instances]))
    logging.info(f"[GEN] ✓ Wrote {sum(len(v) for v in splits.values())} instances to {directory}")


def read_instance_set(directory, splits=('train', 'test')):
    with open(os.path.join(directory, 'family.json'), 'r') as f:
        family = FamilySpec.from_dict(json.load(f))
    out = {}
    for split in splits:
        path = os.path.join(directory, f'{split}.json')
        if os.path.exists(path):
            with open(path, 'r') as f:
                out[split] = [ProblemInstance.from_dict(d) for d in json.load(f)]
    return family, out


def write_json(path, data):
    _ensure_parent(path)
    with open(path, 'w') as f:
        f.write(_dump_json(data))


def read_json(path):
    with open(path, 'r') as f:
        return json.load(f)
