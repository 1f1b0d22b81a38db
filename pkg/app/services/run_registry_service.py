"""
Run registry service.

Records every CLI invocation in the registry database and answers the queries
behind ``run.py runs``.
"""

import logging
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional

from sqlalchemy import func, select

from app.extensions import db
from app.models.run_record import RunRecord

logger = logging.getLogger(__name__)


def _naive(value: datetime) -> datetime:
    return value.replace(tzinfo=None) if value.tzinfo else value


class RunRegistryService:
    """Service for writing and querying run records."""

    def start_run(self, command: str, arguments: Optional[Dict[str, Any]] = None) -> RunRecord:
        """
        Insert a record in ``running`` state.

        Args:
            command: Sub-command name
            arguments: Parsed CLI arguments (JSON-serializable)

        Returns:
            The persisted RunRecord
        """
        record = RunRecord(command=command, arguments=arguments or {})
        db.session.add(record)
        db.session.commit()
        return record

    def finish_run(self, run_id: int, exit_code: int, error_message: Optional[str] = None,
                   metrics: Optional[Dict[str, Any]] = None,
                   artifact_dir: Optional[str] = None) -> Optional[RunRecord]:
        """
        Close a run: status ``ok`` for exit code 0, ``error`` otherwise.

        Returns:
            Updated RunRecord, or None if the id is unknown
        """
        record = db.session.get(RunRecord, run_id)
        if record is None:
            logger.warning(f"Run {run_id} not found in registry")
            return None
        record.finished_at = datetime.now(timezone.utc)
        record.duration_ms = (_naive(record.finished_at) - _naive(record.started_at)).total_seconds() * 1000
        record.exit_code = exit_code
        record.status = 'ok' if exit_code == 0 else 'error'
        record.error_message = error_message
        record.metrics = metrics
        record.artifact_dir = artifact_dir
        db.session.commit()
        return record

    def get_run(self, run_id: int) -> Optional[dict]:
        record = db.session.get(RunRecord, run_id)
        return record.to_dict() if record else None

    def list_runs(self, command: Optional[str] = None, status: Optional[str] = None,
                  limit: int = 100) -> List[dict]:
        """
        Most recent runs first, optionally filtered.

        Args:
            command: Only this sub-command
            status: Only this status (running, ok, error)
            limit: Maximum number of records

        Returns:
            List of run dictionaries
        """
        query = select(RunRecord)
        if command:
            query = query.where(RunRecord.command == command)
        if status:
            query = query.where(RunRecord.status == status)
        query = query.order_by(RunRecord.started_at.desc(), RunRecord.id.desc()).limit(limit)
        return [record.to_dict() for record in db.session.scalars(query)]

    def run_stats(self) -> Dict[str, Any]:
        """Counts by command and status, and the mean duration of finished runs."""
        total = db.session.scalar(select(func.count(RunRecord.id))) or 0
        by_command = db.session.execute(
            select(RunRecord.command, func.count(RunRecord.id)).group_by(RunRecord.command)
        ).all()
        by_status = db.session.execute(
            select(RunRecord.status, func.count(RunRecord.id)).group_by(RunRecord.status)
        ).all()
        avg_duration = db.session.scalar(select(func.avg(RunRecord.duration_ms)))
        return {
            'total_runs': total,
            'by_command': {command: count for command, count in by_command},
            'by_status': {status: count for status, count in by_status},
            'avg_duration_ms': round(avg_duration, 2) if avg_duration is not None else None,
        }
