import os
import json
import logging
from dotenv import load_dotenv

load_dotenv()

class Config:
    # Runtime
    THREADS = int(os.environ.get('PISONET_THREADS') or os.cpu_count() or 1)

    # Logging / run ledger
    LOG_FILE = os.environ.get('PISONET_LOG_FILE') or 'logs/pisonet.log'
    DATABASE_FILE = os.environ.get('PISONET_DB') or 'logs/pisonet.db'

    # Shipped data
    DATA_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'data')
    MAZE_FILE = os.path.join(DATA_DIR, 'maze.json')

    # Notification Configuration
    NOTIFICATION_URL = os.environ.get('PISONET_NOTIFICATION_URL') or None


DEFAULT_CONFIG = {
    'DENSE_REFINEMENT': 10,  # m, evaluation grid refinement
    'COLLOCATION_COUNT': 64,
    'EIKONAL_SPACING': 0.005,
    'ORACLE_KNOTS': 31,  # direct-transcription knots for eval --oracle
    'DASHBOARD_PORT': 5000,
    'notification_url': None,
}


def load_config(path='config.json'):
    """Defaults updated by config.json when present"""
    config = dict(DEFAULT_CONFIG)
    if os.path.exists(path):
        try:
            with open(path, 'r') as f:
                config.update(json.load(f))
        except Exception as e:
            logging.warning(f"Error loading {path}: {e}, using defaults")
    if Config.NOTIFICATION_URL:
        config['notification_url'] = Config.NOTIFICATION_URL
    return config
