import numpy as np
import pytest
import torch

from minivlp.config import ModelConfig, TrainConfig
from minivlp.data import PairDataset, generate_pairs
from minivlp.model import VLModel
from minivlp.training import Trainer


def tiny_model_cfg(**overrides) -> ModelConfig:
    base = dict(
        hidden_dim=16,
        text_layers=1,
        image_layers=1,
        cross_layers=2,
        num_heads=2,
        image_patch_size=8,
        image_resolution=16,
        vocab_size=48,
        max_text_len=48,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tiny_cfg() -> ModelConfig:
    return tiny_model_cfg()


@pytest.fixture
def tiny_model(tiny_cfg) -> VLModel:
    torch.manual_seed(0)
    return VLModel(tiny_cfg)


@pytest.fixture
def desk_cfg() -> ModelConfig:
    return ModelConfig()


@pytest.fixture(scope="session")
def clean_records():
    return generate_pairs(160, noise_rate=0.0, seed=11)


@pytest.fixture(scope="session")
def noisy_records():
    return generate_pairs(160, noise_rate=0.25, seed=13)


@pytest.fixture(scope="session")
def clean_dataset(clean_records) -> PairDataset:
    return PairDataset(list(clean_records), 32)


@pytest.fixture(scope="session")
def trained_setup():
    """One real (small) pre-training run shared by evaluation-level tests."""
    torch.set_num_threads(2)
    records = generate_pairs(330, noise_rate=0.0, seed=101)
    dataset = PairDataset(records, 32)
    model_cfg = ModelConfig()
    train_cfg = TrainConfig(epochs=40, batch_size=32, seed=7, learning_rate=1e-3)
    trainer = Trainer(model_cfg, train_cfg, dataset)
    result = trainer.run()
    result.model.eval()
    return result.model, result.bank, dataset
