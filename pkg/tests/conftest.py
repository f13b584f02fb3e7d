import numpy as np
import pytest
import torch

from config import Config
from modules.invariant_check import rest_to_rest_1d
from modules.logging_system import RunLedger
from modules.phase_core import AgentSpec, Circle, EnvironmentSpec, ProblemInstance, TimeGrid
from modules.scenario_gen import UNIT_SQUARE, make_family
from modules.symplectic_decoder import DecoderConfig

torch.set_num_threads(1)


@pytest.fixture(autouse=True)
def isolated_paths(tmp_path, monkeypatch):
    """Log file and run ledger under the test's tmp dir"""
    monkeypatch.setattr(Config, 'LOG_FILE', str(tmp_path / 'pisonet.log'))
    monkeypatch.setattr(Config, 'DATABASE_FILE', str(tmp_path / 'pisonet.db'))
    return tmp_path


@pytest.fixture
def ledger(tmp_path):
    return RunLedger(str(tmp_path / 'ledger.db'))


@pytest.fixture
def line_instance():
    return rest_to_rest_1d()


@pytest.fixture
def free2():
    return make_family('free', 2, {'train_count': 4, 'test_count': 3})


@pytest.fixture
def obstacle2():
    return make_family('obstacle', 2, {'train_count': 3, 'test_count': 3})


@pytest.fixture
def small_decoder_cfg():
    return DecoderConfig(layers=1, cond_width=2, hidden_layers=1)


@pytest.fixture
def fine_grid():
    return TimeGrid.uniform(1.0, 9)


@pytest.fixture
def crossing_instance():
    """One agent whose straight path runs through a circular obstacle"""
    agent = AgentSpec(radius=0.02, drag_coeff=0.0)
    env = EnvironmentSpec(UNIT_SQUARE, (Circle((0.0, 0.0), 0.15),), 2)
    x0 = np.array([[-0.5, 0.0, 0.0, 0.0]])
    xT = np.array([[0.5, 0.0, 0.0, 0.0]])
    return ProblemInstance('adhoc', (agent,), env, x0, xT)
