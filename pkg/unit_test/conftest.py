import numpy as np
import pytest

from pyslucache import load_config
from pyslucache.cloud_sim import shared_frontend
from pyslucache.dataset_ops import SynthSpec, synth_dataset

SMALL_OVERRIDES = {
    "seed": 0,
    "frontend": {"n_filters": 16, "conv_channels": 12, "calibration_clips": 2},
    "l1": {"k": 12, "max_iter": 50, "fit_on_augmented": False},
    "l2": {"hidden": 8},
    "thresholds": {"mlp_hidden": 8, "mlp_epochs": 50},
    "cloud": {"train": {"max_epochs": 2, "batch_size": 4}, "augment": {"versions": 1}},
    "synth": {"n_words": 8, "n_transcripts": 3, "words_per_transcript": [1, 2], "speakers": 1, "repeats": 2},
}


@pytest.fixture(autouse=True)
def _clear_seed_env(monkeypatch):
    monkeypatch.delenv("PYSLUCACHE_SEED", raising=False)


@pytest.fixture
def small_config():
    """Reduced shapes so device and cloud tests run in seconds"""
    return load_config(overrides=SMALL_OVERRIDES)


@pytest.fixture
def config_with():
    """Small config with extra per-section overrides merged in"""

    def build(extra):
        overrides = {k: dict(v) if isinstance(v, dict) else v for k, v in SMALL_OVERRIDES.items()}
        for section, values in extra.items():
            overrides.setdefault(section, {}).update(values)
        return load_config(overrides=overrides)

    return build


@pytest.fixture
def small_frontend(small_config):
    return shared_frontend(small_config)


@pytest.fixture
def small_corpus(small_config):
    return synth_dataset(SynthSpec.from_config(small_config.synth), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
