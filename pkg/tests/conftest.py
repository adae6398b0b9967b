from pathlib import Path

import pytest

from maskrouter.engine.data import GenSpec, gen_data
from maskrouter.engine.model import ModelConfig, build_backbone
from maskrouter.engine.training import TrainConfig

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def tiny_cfg() -> ModelConfig:
    return ModelConfig(vocab_size=16, d_model=16, n_heads=2, n_blocks=2, ffn_mult=2, max_seq_len=16, seed=0)


@pytest.fixture(scope="session")
def small_suite():
    return gen_data(GenSpec(n_tasks=3, train_per_task=48, eval_per_task=48, seq_len=12, seed=0))


@pytest.fixture
def frozen_backbone(tiny_cfg):
    backbone = build_backbone(tiny_cfg)
    backbone.freeze()
    return backbone


@pytest.fixture
def fast_cfg() -> TrainConfig:
    return TrainConfig(steps=12, batch_size=16, eval_interval=6, peak_lr=5e-3, seed=0)
