import pytest
import sys
import os
import json

# Add project directory to sys.path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from click.testing import CliRunner

from core import HSCLConfig
from augmentation import AugmentationPolicy
from encoder import EncoderSpec
from datasets import make_synthetic_blobs
from scenarios import ScenarioSpec, build_scenario
from main import create_app, cli


TINY_DIM = 8
TINY_D = 16


def tiny_run_config(**hscl):
    """Run config dict for a small, fast synthetic problem"""
    return {
        'hscl': {'D': TINY_D, 'K': 1, 'batch_size': 32, 'epochs': 2, 'warmup_epochs': 1, 'lr': 1e-3, **hscl},
        'scenario': {'normal_class': 0, 'scenario': 'S1_SEMI', 'gamma_l': 0.1},
        'source': {'kind': 'blobs', 'n_classes': 3, 'dim': TINY_DIM, 'separation': 8.0, 'n_per_class': 40},
        'encoder': {'kind': 'MLP', 'mlp_hidden': [32]},
        'augmentation': {'vector_noise_std': 0.1},
    }


@pytest.fixture
def blobs():
    """Three well separated Gaussian clusters in 8 dimensions"""
    return make_synthetic_blobs(n_classes=3, dim=TINY_DIM, separation=8.0, n_per_class=60, seed=0)


@pytest.fixture
def scenario_spec():
    return ScenarioSpec(normal_class=0, gamma_l=0.1, seed=0)


@pytest.fixture
def split(blobs, scenario_spec):
    return build_scenario(scenario_spec, blobs)


@pytest.fixture
def tiny_config():
    return HSCLConfig(D=TINY_D, K=1, batch_size=32, epochs=2, warmup_epochs=1, lr=1e-3, seed=0)


@pytest.fixture
def vector_policy():
    return AugmentationPolicy.for_vectors()


@pytest.fixture
def mlp_spec():
    return EncoderSpec(input_shape=(TINY_DIM,), projection_dim=TINY_D, mlp_hidden=(32,))


@pytest.fixture
def config_file(tmp_path):
    """Tiny run config written to disk"""
    path = tmp_path / 'config.json'
    path.write_text(json.dumps(tiny_run_config()))
    return path


@pytest.fixture
def runner():
    """A test runner for the CLI commands."""
    return CliRunner()


@pytest.fixture
def trained_run(tmp_path, config_file, runner):
    """Run directory produced by the train command"""
    run_dir = tmp_path / 'run'
    result = runner.invoke(cli, ['train', str(config_file), '--out', str(run_dir)])
    assert result.exit_code == 0, result.output
    return run_dir


@pytest.fixture
def app(trained_run):
    """Scoring app serving the trained run."""
    app = create_app(trained_run)
    app.config['TESTING'] = True
    yield app


@pytest.fixture
def client(app):
    """A test client for the app."""
    return app.test_client()
