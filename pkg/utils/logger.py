import os
import logging
from config import Config

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'


def setup_logging(log_file=None, level=logging.INFO):
    """Configure root logging to file + console (idempotent)"""
    log_file = log_file or Config.LOG_FILE
    root = logging.getLogger()
    if getattr(root, '_pisonet_configured', False):
        return root

    handlers = [logging.StreamHandler()]
    try:
        os.makedirs(os.path.dirname(log_file) or '.', exist_ok=True)
        handlers.insert(0, logging.FileHandler(log_file))
    except OSError as e:
        # Read-only working dirs still get console output
        print(f"⚠ Log file unavailable ({e}), logging to console only")

    logging.basicConfig(level=level, format=LOG_FORMAT, handlers=handlers, force=True)
    root._pisonet_configured = True
    return root


def banner(title, width=60):
    """Start-up banner in the log"""
    logging.info("=" * width)
    logging.info(title)
    logging.info("=" * width)
