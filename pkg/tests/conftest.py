"""
Pytest configuration and shared fixtures.

Provides a tiny configuration (32x32 images, shallow nets) so unit tests run in
seconds, an application bound to a temporary registry, a seeded record factory
and a briefly pretrained prior shared by the whole session.
"""

import copy
import os

import pytest
import torch
import yaml

from app import create_app
from app.extensions import db as _db
from app.nets.detect_guide_amplify import DetectGuideAmplifyNet
from app.services.mae_service import MAEService
from app.services.synth_data_service import SynthDataService
from app.settings import Settings
from tests.fixtures.forgery_factory import ForgeryFactory

TINY_CONFIG = {
    'data': {'resolution': 32, 'n_train': 8, 'n_val': 4, 'n_test': 4, 'seed': 0,
             'area_range': [0.05, 0.4]},
    'mae': {'patch_size': 8, 'embed_dim': 32, 'encoder_depth': 1, 'decoder_embed_dim': 16,
            'decoder_depth': 1, 'num_heads': 2, 'lr': 1e-3, 'epochs': 30, 'batch_size': 16,
            'n_images': 32},
    'dssn': {'stage_dims': [8, 16, 16, 16], 'num_heads': [1, 1, 2, 2], 'depths': [1, 1, 1, 1],
             'sr_ratios': [8, 4, 2, 1], 'decoder_dim': 16},
    'prompt': {'channels': [4, 4, 8, 8], 'downsample': 16, 'prompt_dim': 16},
    'train': {'lr': 1e-3, 'batch_size': 4, 'max_epochs': 3, 'patience': 2},
    'robustness': [
        {'kind': 'jpeg', 'levels': [100, 50]},
        {'kind': 'gaussian_blur', 'levels': [0, 8]},
    ],
}


def should_run_slow_tests():
    """Check if desk-scale runs are enabled."""
    return os.getenv('ENABLE_SLOW_TESTS', 'false').lower() == 'true'


@pytest.fixture
def tiny_settings():
    """
    Provide validated tiny settings.

    Returns:
        Settings: 32x32 images, one block per stage, 3 training epochs
    """
    return Settings.from_dict(copy.deepcopy(TINY_CONFIG))


@pytest.fixture
def tiny_config_file(tmp_path):
    """Write the tiny configuration as YAML and return its path."""
    path = tmp_path / 'tiny.yaml'
    path.write_text(yaml.safe_dump(TINY_CONFIG), encoding='utf-8')
    return path


@pytest.fixture
def app(tmp_path):
    """
    Create an application bound to a temporary registry database and directories.
    """
    app = create_app(
        REGISTRY_DATABASE_URI=f"sqlite:///{tmp_path / 'registry.db'}",
        RUNS_DIR=tmp_path / 'runs',
        DATA_DIR=tmp_path / 'data',
        ENABLE_RUN_LOGGING=True,
        LOG_LEVEL='WARNING',
    )
    app.settings = Settings.from_dict(copy.deepcopy(TINY_CONFIG))
    yield app
    _db.session.remove()


@pytest.fixture
def session(app):
    """
    Provide the registry session and roll back after the test.
    """
    yield _db.session
    _db.session.rollback()


@pytest.fixture
def forgery_factory():
    """
    Provide a ForgeryFactory for 32x32 records.

    Returns:
        ForgeryFactory: seeded factory
    """
    return ForgeryFactory(seed=42, resolution=32)


@pytest.fixture
def forged_records(forgery_factory):
    """Four forged records (splice, copy_move, noise_fill, splice)."""
    return forgery_factory.create_batch(count=4)


@pytest.fixture
def splits(forgery_factory):
    """Small train (8) and val (4) splits."""
    return forgery_factory.create_splits(n_train=8, n_val=4)


@pytest.fixture(scope='session')
def pretrained_mae():
    """
    A tiny prior pretrained for a few epochs on authentic 32x32 scenes.

    Shared by the session: tests must ``copy.deepcopy`` it before building a network.
    """
    settings = Settings.from_dict(copy.deepcopy(TINY_CONFIG))
    synth = SynthDataService(settings.data, patch_size=settings.mae.patch_size)
    images = synth.generate_real_images(settings.mae.n_images, seed=0)
    model, _ = MAEService(settings.mae, settings.resolution).pretrain(images, seed=0)
    return model


@pytest.fixture
def net(pretrained_mae, tiny_settings):
    """A freshly initialized two-stage network on a private copy of the prior."""
    torch.manual_seed(0)
    return DetectGuideAmplifyNet.from_settings(copy.deepcopy(pretrained_mae), tiny_settings)
