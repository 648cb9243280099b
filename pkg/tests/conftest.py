import os

# Thread policy must be pinned before numpy initializes its BLAS.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_WAIT_POLICY", "PASSIVE")

import numpy as np
import pytest

from specedit.runtime import configure

configure()

from specedit import synthdata as sd
from specedit.training import (
    TrainConfig,
    load_checkpoint,
    pretrain_base,
    result_to_checkpoint,
    train_adapter,
)


@pytest.fixture(scope="session")
def tiny_records():
    return sd.build_dataset(48, 7)


@pytest.fixture(scope="session")
def tiny_ckpts(tmp_path_factory, tiny_records):
    """Very small checkpoints for mechanics tests (not for quality checks)."""
    root = tmp_path_factory.mktemp("tiny_ckpts")
    base_path = str(root / "base.ckpt")
    adapter_path = str(root / "adapter.ckpt")
    res = pretrain_base(
        TrainConfig(stage="base", steps=120, batch_size=8, seed=11, log_every=40),
        tiny_records)
    result_to_checkpoint(base_path, res)
    base = load_checkpoint(base_path)
    res2 = train_adapter(
        base,
        TrainConfig(stage="adapter", steps=60, batch_size=8, seed=12, log_every=30),
        tiny_records)
    result_to_checkpoint(adapter_path, res2)
    return base_path, adapter_path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
