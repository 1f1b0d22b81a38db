import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

from config import Config


class App:
    """Application context shared by the CLI, the utility scripts and the tests."""

    def __init__(self, config: Dict[str, Any], settings, logger: logging.Logger):
        self.config = config
        self.settings = settings
        self.logger = logger
        self.run_logger = None

    @property
    def device(self) -> str:
        return self.config['DEVICE']

    @property
    def runs_dir(self) -> Path:
        return Path(self.config['RUNS_DIR'])

    @property
    def data_dir(self) -> Path:
        return Path(self.config['DATA_DIR'])


def _config_dict(config_object, overrides: Dict[str, Any]) -> Dict[str, Any]:
    config = {key: getattr(config_object, key) for key in dir(config_object) if key.isupper()}
    for key, value in overrides.items():
        config[key.upper()] = value
    return config


def configure_logging(level: str, fmt: str) -> logging.Logger:
    logging.basicConfig(level=level, format=fmt)
    logger = logging.getLogger('app')
    logger.setLevel(level)
    return logger


def _ensure_sqlite_dir(uri: str):
    prefix = 'sqlite:///'
    if uri.startswith(prefix) and ':memory:' not in uri:
        Path(uri[len(prefix):]).parent.mkdir(parents=True, exist_ok=True)


def create_app(config_path: Optional[Union[str, Path]] = None, config_object=Config, **overrides) -> App:
    """
    Create and configure the application.

    Args:
        config_path: YAML or JSON file with structured settings
        config_object: Environment-backed configuration class
        **overrides: Replacement values for ``config_object`` attributes (e.g. ``RUNS_DIR``)

    Returns:
        App with settings, logger, registry database and run logger
    """
    from app.settings import Settings

    config = _config_dict(config_object, overrides)
    logger = configure_logging(config['LOG_LEVEL'], config['LOG_FORMAT'])
    settings = Settings.from_file(config_path) if config_path else Settings()
    app = App(config, settings, logger)

    # Initialize the registry database
    from app.extensions import db
    _ensure_sqlite_dir(config['REGISTRY_DATABASE_URI'])
    db.init_app(config['REGISTRY_DATABASE_URI'])

    # Import models before creating tables
    from app.models import run_record  # noqa: F401
    db.create_all()
    logger.debug("Registry tables created")

    from app.middleware.run_logger import init_run_logging
    init_run_logging(app)
    return app
