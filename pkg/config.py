import os
from pathlib import Path
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

ROOT_DIR = Path(__file__).parent


class Config:
    # Filesystem layout
    DATA_DIR = Path(os.getenv('FORENSICS_DATA_DIR', ROOT_DIR / 'data'))
    RUNS_DIR = Path(os.getenv('FORENSICS_RUNS_DIR', ROOT_DIR / 'runs'))

    # Run registry database
    REGISTRY_DATABASE_URI = os.getenv(
        'REGISTRY_DATABASE_URI',
        f'sqlite:///{ROOT_DIR / "runs" / "registry.db"}'
    )
    ENABLE_RUN_LOGGING = os.getenv('ENABLE_RUN_LOGGING', 'true').lower() == 'true'

    # Compute settings
    DEVICE = os.getenv('FORENSICS_DEVICE', 'cpu')
    NUM_WORKERS = int(os.getenv('NUM_WORKERS', '0'))
    SEED = int(os.getenv('FORENSICS_SEED', '0'))

    # Logging
    LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO').upper()
    LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'
