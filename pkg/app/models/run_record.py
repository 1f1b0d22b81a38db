from datetime import datetime, timezone

from sqlalchemy import JSON, DateTime, Float, Integer, String, Text
from sqlalchemy.orm import Mapped, mapped_column

from app.extensions import db


def _utcnow():
    return datetime.now(timezone.utc)


class RunRecord(db.Model):
    """One CLI invocation: what ran, how long it took and what it produced."""

    __tablename__ = 'run_records'

    # Primary key
    id: Mapped[int] = mapped_column(Integer, primary_key=True)

    # Invocation
    command: Mapped[str] = mapped_column(String(50), nullable=False, index=True)
    arguments: Mapped[dict] = mapped_column(JSON, nullable=True)
    started_at: Mapped[datetime] = mapped_column(DateTime, default=_utcnow, nullable=False, index=True)
    finished_at: Mapped[datetime] = mapped_column(DateTime, nullable=True)

    # Outcome
    status: Mapped[str] = mapped_column(String(20), default='running', nullable=False, index=True)
    exit_code: Mapped[int] = mapped_column(Integer, nullable=True)
    duration_ms: Mapped[float] = mapped_column(Float, nullable=True)
    error_message: Mapped[str] = mapped_column(Text, nullable=True)

    # Results
    metrics: Mapped[dict] = mapped_column(JSON, nullable=True)
    artifact_dir: Mapped[str] = mapped_column(String(1000), nullable=True)

    def to_dict(self):
        """Convert the run record to a JSON-serializable dictionary."""
        return {
            'id': self.id,
            'command': self.command,
            'arguments': self.arguments,
            'started_at': self.started_at.isoformat() if self.started_at else None,
            'finished_at': self.finished_at.isoformat() if self.finished_at else None,
            'status': self.status,
            'exit_code': self.exit_code,
            'duration_ms': self.duration_ms,
            'error_message': self.error_message,
            'metrics': self.metrics,
            'artifact_dir': self.artifact_dir,
        }

    def __repr__(self):
        return f'<RunRecord {self.id}: {self.command} [{self.status}]>'
