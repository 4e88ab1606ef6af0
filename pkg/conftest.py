"""
Shared fixtures for the ICL geometry lab tests
"""

import os

import numpy as np
import pytest

from lab.core.config import get_settings
from lab.models.config import ExperimentConfig, ModelConfig
from lab.taskgen import default_tokenizer
from lab.transformer import init_model

RUN_SLOW = os.environ.get("ICL_LAB_RUN_SLOW") == "1"


def pytest_collection_modifyitems(config, items):
    if RUN_SLOW:
        return
    skip = pytest.mark.skip(reason="set ICL_LAB_RUN_SLOW=1 to run end-to-end training checks")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def isolated_settings(tmp_path, monkeypatch):
    """Every test writes under its own output root"""
    monkeypatch.setenv("ICL_LAB_OUTPUT_ROOT", str(tmp_path / "runs"))
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tokenizer():
    return default_tokenizer()


@pytest.fixture
def tiny_config(tokenizer):
    return ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32, vocab_size=len(tokenizer), p_max=128, seed=3)


@pytest.fixture
def tiny_model(tiny_config):
    return init_model(tiny_config)


@pytest.fixture
def tiny_experiment(tmp_path):
    """Factory for experiment configs small enough to train in seconds"""

    def make(kind: str = "tdnv", **overrides) -> ExperimentConfig:
        fields = dict(
            kind=kind,
            seed=0,
            output_dir=str(tmp_path / kind),
            tasks=["copy", "next", "upper"],
            n_instances=6,
            k=4,
            n_layers=2,
            d_model=16,
            n_heads=2,
            d_ff=32,
            p_max=128,
            steps=3,
            warmup_steps=1,
            batch_size=6,
            k_train=4,
            eval_every=2,
            eval_instances=3,
            eval_k=3,
            saliency_instances=1,
        )
        fields.update(overrides)
        return ExperimentConfig(**fields)

    return make
