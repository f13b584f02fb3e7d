"""
Error Handler Module
Domain exceptions, error classification and failure notifications
"""

import logging
import requests
from datetime import datetime
from modules.logging_system import RunLedger


class PisonetError(Exception):
    """Base class; error_type is the ledger classification tag"""
    error_type = 'system_error'


class InstanceValidationError(PisonetError):
    error_type = 'validation'

    def __init__(self, message, violations=None):
        super().__init__(message)
        self.violations = list(violations or [])


class UnsupportedVariantError(PisonetError):
    error_type = 'validation'


class ThetaEncodingError(PisonetError):
    error_type = 'validation'


class FamilySpecError(PisonetError):
    error_type = 'validation'


class GridMismatchError(PisonetError):
    error_type = 'validation'


class RejectionBudgetError(PisonetError):
    error_type = 'sampling'


class ConjugatePointError(PisonetError):
    error_type = 'conjugate_point'

    def __init__(self, agent, condition):
        super().__init__(
            f"Latent BVP ill-posed for agent {agent}: cond(M_yq) = {condition:.3e} (conjugate point)")
        self.agent = agent
        self.condition = condition


class NonFiniteLossError(PisonetError):
    error_type = 'non_finite_loss'

    def __init__(self, step, instance, stage='adam'):
        super().__init__(f"Non-finite loss at {stage} step {step} (instance {instance})")
        self.step = step
        self.instance = instance


class CheckpointFormatError(PisonetError):
    error_type = 'checkpoint'


class CheckpointIntegrityError(CheckpointFormatError):
    pass


class CheckpointVersionError(CheckpointFormatError):
    pass


class CheckpointMismatchError(PisonetError):
    error_type = 'checkpoint'


class EikonalError(PisonetError):
    error_type = 'eikonal'


class ReferenceSelectionError(PisonetError):
    error_type = 'eikonal'

    def __init__(self, diagnoses):
        lines = '; '.join(f"trial {i}: {d}" for i, d in enumerate(diagnoses))
        super().__init__(f"No admissible reference path ({lines})")
        self.diagnoses = list(diagnoses)


class ErrorHandler:
    def __init__(self, ledger=None, notification_url=None):
        self.ledger = ledger or RunLedger()
        self.notification_url = notification_url

    def initialize(self, config=None):
        """Pick up the webhook from the loaded CONFIG dict"""
        try:
            if config:
                self.notification_url = config.get('notification_url') or self.notification_url
            logging.info("Error handler initialized")
        except Exception as e:
            logging.error(f"Error initializing error handler: {str(e)}")

    def handle_error(self, error, context=None):
        """Classify, record and notify; never raises"""
        try:
            error_type = self.classify(error)
            message = str(error)
            if context:
                message = f"{context}: {message}"

            self.ledger.log_error(error_type, message)
            self._send_notification(error_type, message)

            logging.warning(f"Error handled: {error_type} - {message}")
            return error_type

        except Exception as e:
            logging.error(f"Error in error handler: {str(e)}")
            return 'system_error'

    @staticmethod
    def classify(error):
        """Classify error type"""
        if isinstance(error, PisonetError):
            return error.error_type
        if isinstance(error, OSError):
            return 'io_error'
        if isinstance(error, (ValueError, KeyError, TypeError)):
            return 'validation'
        return 'system_error'

    @staticmethod
    def exit_code(error):
        """CLI exit status for an exception"""
        if isinstance(error, (OSError, CheckpointFormatError)):
            return 2
        return 1

    def _send_notification(self, error_type, error_message):
        """POST the failure to the configured webhook"""
        if not self.notification_url:
            return
        try:
            payload = {
                'error_type': error_type,
                'error_message': error_message,
                'timestamp': datetime.now().isoformat()
            }
            response = requests.post(self.notification_url, json=payload, timeout=5)
            if response.status_code == 200:
                logging.info("Notification sent successfully")
            else:
                logging.warning(f"Notification failed: {response.status_code}")
        except Exception as e:
            logging.error(f"Error sending notification: {str(e)}")
