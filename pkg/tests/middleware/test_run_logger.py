"""
Tests for the run logging middleware.
"""
from pathlib import Path

from app.middleware.run_logger import RunLogger, init_run_logging
from app.services.run_registry_service import RunRegistryService


class TestRunLogger:
    """Test recording runs around commands."""

    def test_records_a_run(self, app):
        """Test before_run and after_run produce one closed record."""
        run_id = app.run_logger.before_run('gen-data', {'out': Path('/tmp/data'), 'seed': 3})
        app.run_logger.after_run(run_id, 0, metrics={'train': 8}, artifact_dir=Path('/tmp/data'))
        run = RunRegistryService().get_run(run_id)
        assert run['status'] == 'ok'
        assert run['arguments'] == {'out': '/tmp/data', 'seed': 3}
        assert run['metrics'] == {'train': 8}
        assert run['artifact_dir'] == '/tmp/data'

    def test_unserializable_arguments_stored_as_repr(self, app):
        """Test arbitrary objects in the arguments are stored as text."""
        run_id = app.run_logger.before_run('train', {'kinds': ('jpeg',), 'thing': object()})
        arguments = RunRegistryService().get_run(run_id)['arguments']
        assert arguments['kinds'] == ['jpeg']
        assert arguments['thing'].startswith('<object object')

    def test_start_failure_is_swallowed(self, app, mocker):
        """Test a registry failure on start returns None instead of raising."""
        mocker.patch.object(RunRegistryService, 'start_run', side_effect=RuntimeError('db down'))
        assert RunLogger(app).before_run('eval') is None

    def test_finish_failure_is_swallowed(self, app, mocker):
        """Test a registry failure on finish does not raise."""
        logger = RunLogger(app)
        run_id = logger.before_run('eval')
        mocker.patch.object(RunRegistryService, 'finish_run', side_effect=RuntimeError('db down'))
        logger.after_run(run_id, 0)

    def test_after_run_without_id_is_noop(self, app, mocker):
        """Test after_run with no run id touches nothing."""
        finish = mocker.patch.object(RunRegistryService, 'finish_run')
        RunLogger(app).after_run(None, 0)
        finish.assert_not_called()


class TestInitRunLogging:
    """Test attaching the middleware."""

    def test_enabled(self, app):
        """Test the app carries a RunLogger when enabled."""
        assert isinstance(init_run_logging(app), RunLogger)
        assert isinstance(app.run_logger, RunLogger)

    def test_disabled(self, app):
        """Test ENABLE_RUN_LOGGING=False leaves the app without a logger."""
        app.config['ENABLE_RUN_LOGGING'] = False
        assert init_run_logging(app) is None
        assert app.run_logger is None
