"""
Run logging middleware for the command-line application.

Wraps every sub-command so that one RunRecord per invocation lands in the
registry database.
"""

import logging
from pathlib import Path
from typing import Any, Dict, Optional

from app.extensions import db
from app.services.run_registry_service import RunRegistryService

logger = logging.getLogger(__name__)


def _json_safe(value: Any) -> Any:
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if value is None or isinstance(value, (str, int, float, bool)):
        return value
    return repr(value)


class RunLogger:
    """Opens a record before a command runs and closes it afterwards."""

    def __init__(self, app):
        self.app = app
        self.service = RunRegistryService()

    def before_run(self, command: str, arguments: Optional[Dict[str, Any]] = None) -> Optional[int]:
        """Record the start of a run; returns the run id, or None if the registry is unavailable."""
        try:
            record = self.service.start_run(command, _json_safe(arguments or {}))
            return record.id
        except Exception as e:
            # Registry failures never stop the command
            self.app.logger.error(f"Error recording run start: {e}")
            db.session.rollback()
            return None

    def after_run(self, run_id: Optional[int], exit_code: int, error_message: Optional[str] = None,
                  metrics: Optional[Dict[str, Any]] = None, artifact_dir: Optional[str] = None) -> None:
        if run_id is None:
            return
        try:
            self.service.finish_run(run_id, exit_code, error_message=error_message,
                                    metrics=_json_safe(metrics) if metrics else None,
                                    artifact_dir=str(artifact_dir) if artifact_dir else None)
        except Exception as e:
            self.app.logger.error(f"Error recording run result: {e}")
            db.session.rollback()


def init_run_logging(app) -> Optional[RunLogger]:
    """Attach a RunLogger to the app unless ENABLE_RUN_LOGGING is off."""
    if not app.config.get('ENABLE_RUN_LOGGING', True):
        app.logger.info("Run logging disabled")
        app.run_logger = None
        return None
    app.run_logger = RunLogger(app)
    app.logger.debug("Run logging middleware initialized")
    return app.run_logger
