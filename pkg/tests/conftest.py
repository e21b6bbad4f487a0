import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from protopose.skeletons import SkeletonRegistry
from protopose.synthdata import dataset, make_families
from protopose.trainer import TrainConfig, train


@pytest.fixture(scope="session")
def fams():
    return make_families(0)


@pytest.fixture()
def registry3(fams):
    """Fresh registry of the three training families (tests may mutate it)."""
    reg = SkeletonRegistry()
    for fam in fams.train_families:
        reg.register(fam.spec)
    return reg


@pytest.fixture(scope="session")
def tiny_sets(fams):
    """Small per-family train/val splits shared by trainer-level tests.

    Treat as read-only: the fixture is session-scoped to keep the suite
    fast.
    """
    H = W = 20
    train_sets, val_sets = {}, {}
    for did, fam in enumerate(fams.train_families):
        train_sets[did] = dataset(fams.canonical, fam, did, 24, "train", 0, H, W)
        val_sets[did] = dataset(fams.canonical, fam, did, 8, "val", 0, H, W)
    return train_sets, val_sets


@pytest.fixture(scope="session")
def tiny_config():
    return TrainConfig(
        epochs=6,
        batch_size=16,
        seed=0,
        lr=1e-3,
        phase1_end=0.34,
        phase2_end=0.67,
        embed_dim=12,
        embed_hidden=16,
        protos_per_joint=2,
        kmeans_k=10,
        cross_start=0.34,
        use_proto=True,
        use_css=True,
    )


@pytest.fixture(scope="session")
def trained_tiny(fams, tiny_sets, tiny_config):
    """One full three-phase run at toy scale, shared across tests."""
    reg = SkeletonRegistry()
    for fam in fams.train_families:
        reg.register(fam.spec)
    return train(tiny_config, tiny_sets[0], reg)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
