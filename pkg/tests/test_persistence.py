import json
import struct

import numpy as np
import pytest
import torch

from modules.error_handler import (CheckpointFormatError, CheckpointIntegrityError, CheckpointMismatchError,
                                   CheckpointVersionError)
from modules.latent_solver import LatentConfig
from modules.persistence import (checkpoint_family, checkpoint_metadata, load_checkpoint, load_decoder,
                                 read_instance_set, read_trajectory, save_checkpoint, write_instance_set,
                                 write_trajectory)
from modules.phase_core import PhaseTrajectory, TimeGrid
from modules.scenario_gen import make_family, sample_split
from modules.symplectic_decoder import DecoderConfig, build_decoder, randomize_weights


@pytest.fixture
def weights():
    return np.random.default_rng(0).normal(size=37)


@pytest.fixture
def saved(tmp_path, weights):
    path = str(tmp_path / 'model.pisn')
    save_checkpoint(path, weights, {'note': 'unit', 'value': 1.5})
    return path


def test_checkpoint_round_trip_is_bit_exact(saved, weights):
    back, meta = load_checkpoint(saved)
    assert back.tobytes() == weights.astype('<f8').tobytes()
    assert meta == {'note': 'unit', 'value': 1.5}


def test_header_layout(saved):
    with open(saved, 'rb') as f:
        magic, version, meta_len = struct.unpack('<4sIQ', f.read(16))
    assert magic == b'PISN' and version == 1
    assert meta_len > 0


def test_flipped_payload_bit_fails_crc(saved):
    with open(saved, 'r+b') as f:
        blob = bytearray(f.read())
        blob[-10] ^= 0x01
        f.seek(0)
        f.write(blob)
    with pytest.raises(CheckpointIntegrityError):
        load_checkpoint(saved)


def test_unknown_version_is_rejected(saved):
    with open(saved, 'r+b') as f:
        f.seek(4)
        f.write(struct.pack('<I', 2))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(saved)


def test_bad_magic_and_truncation(saved, tmp_path):
    with open(saved, 'rb') as f:
        blob = f.read()
    wrong = tmp_path / 'wrong.pisn'
    wrong.write_bytes(b'NOPE' + blob[4:])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(str(wrong))

    for size in (3, 20, len(blob) - 1):
        cut = tmp_path / f'cut{size}.pisn'
        cut.write_bytes(blob[:size])
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(str(cut))


def test_decoder_reload_matches(tmp_path, free2, small_decoder_cfg):
    cfg = DecoderConfig.from_dict({**small_decoder_cfg.to_dict(), 'theta_dim': free2.theta_dim})
    decoder = randomize_weights(build_decoder(cfg, 2, 4), 0.3, seed=1)
    path = str(tmp_path / 'decoder.pisn')
    save_checkpoint(path, decoder, checkpoint_metadata(decoder, free2, LatentConfig()))

    loaded, meta = load_decoder(path, free2)
    for a, b in zip(decoder.parameters(), loaded.parameters()):
        assert torch.equal(a, b)
    assert checkpoint_family(meta) == free2
    assert meta['family_digest'] == free2.digest()


def test_weight_count_mismatch(tmp_path, free2, small_decoder_cfg):
    decoder = build_decoder(small_decoder_cfg, 2, 4)
    meta = checkpoint_metadata(decoder, free2, LatentConfig())
    path = str(tmp_path / 'short.pisn')
    save_checkpoint(path, np.zeros(3), meta)
    with pytest.raises(CheckpointMismatchError):
        load_decoder(path)


def test_trajectory_csv_round_trip(tmp_path, line_instance):
    grid = TimeGrid.uniform(1.0, 5)
    t = grid.times
    x = np.stack([3 * t ** 2 - 2 * t ** 3, 6 * t - 6 * t ** 2], axis=-1)[:, None, :]
    p = np.stack([np.full_like(t, 12.0), 6.0 - 12.0 * t], axis=-1)[:, None, :] * 0.1
    path = str(tmp_path / 'out' / 'traj.csv')
    write_trajectory(path, PhaseTrajectory(grid, x, p), line_instance, {'cost': 12.0})

    traj, controls, sidecar = read_trajectory(path)
    np.testing.assert_array_equal(traj.x, x)
    np.testing.assert_array_equal(traj.p, p)
    np.testing.assert_array_equal(controls[..., 0], p[..., 1] / (2.0 * line_instance.cost.control_weight))
    assert sidecar['metrics'] == {'cost': 12.0}
    assert len(sidecar['instance_digest']) == 64

    with open(path) as f:
        assert f.readline().strip() == 't,agent,w0,v0,pw0,pv0,u0'


def test_trajectory_header_is_checked(tmp_path):
    path = tmp_path / 'bad.csv'
    path.write_text('t,agent,x,y\n0.0,0,1.0,2.0\n')
    with pytest.raises(ValueError):
        read_trajectory(str(path))


def test_instance_set_round_trip(tmp_path):
    family = make_family('obstacle', 2, {'train_count': 2, 'test_count': 1})
    splits = {'train': sample_split(family, 'train'), 'test': sample_split(family, 'test')}
    write_instance_set(str(tmp_path / 'set'), family, splits)

    back_family, back = read_instance_set(str(tmp_path / 'set'))
    assert back_family == family
    assert [i.to_dict() for i in back['train']] == [i.to_dict() for i in splits['train']]
    assert len(back['test']) == 1
    with open(tmp_path / 'set' / 'family.json') as f:
        assert json.load(f)['name'] == 'obstacle'
