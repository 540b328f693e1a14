"""Shared fixtures: the seeded phase-1-trained toy model is expensive, so it
is built once per session and reused by the attribution and acceptance tests."""

import pytest

from getam.data import generate_dataset
from getam.training import LossConfig, run_training
from getam.vit import ModelConfig, VisionTransformer

PILOT_SEED = 0
PILOT_MODEL = dict(image_size=32, patch_size=8, d=16, L=3, heads=2, C=3)


@pytest.fixture(scope="session")
def pilot():
    """Phase-1-trained toy model plus eval splits (the seeded fixture run)."""
    train = generate_dataset(200, 3, seed=PILOT_SEED, nonsalient_fraction=0.25)
    evals = generate_dataset(50, 3, seed=PILOT_SEED + 1000,
                             nonsalient_fraction=0.2, extra_object_fraction=0.7)
    mining_evals = generate_dataset(40, 3, seed=PILOT_SEED + 2000,
                                    nonsalient_fraction=0.7)
    model = VisionTransformer(ModelConfig(**PILOT_MODEL), seed=PILOT_SEED)
    run_training(train, model,
                 LossConfig(phase1_epochs=40, total_epochs=40, seed=PILOT_SEED))
    return dict(model=model, train=train, evals=evals,
                mining_evals=mining_evals)
