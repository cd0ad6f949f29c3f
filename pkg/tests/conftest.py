"""Shared fixtures and deterministic environment for the test suite.

Thread pinning happens before numpy is imported anywhere so BLAS cannot
introduce run-to-run reduction-order differences; the determinism tests
rely on it.
"""

from __future__ import annotations

import os

for _var in (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
):
    os.environ.setdefault(_var, "1")

import pytest

from margintrack.evaluation import split_dataset
from margintrack.synthdata import (
    DatasetConfig,
    OracleParams,
    SequenceConfig,
    generate_dataset,
)
from margintrack.trainer import TrainConfig


def tiny_dataset_config(
    n_sequences: int = 2, n_frames: int = 6, n_pos: int = 8, n_neg: int = 24
) -> DatasetConfig:
    """A dataset small enough for second-scale training in unit tests."""
    return DatasetConfig(
        n_sequences=n_sequences,
        n_pos=n_pos,
        n_neg=n_neg,
        sequence=SequenceConfig(
            n_frames=n_frames,
            confuser_count=2,
            oracle=OracleParams(feature_dim=6),
        ),
    )


def tiny_train_config(**overrides) -> TrainConfig:
    """Training knobs matched to the tiny dataset."""
    defaults = dict(
        epochs=2,
        n_pos=8,
        n_neg=24,
        embed_hidden=(16,),
        embed_out=8,
        cls_hidden=(8,),
        seed=0,
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(tiny_dataset_config(), seed=0)


@pytest.fixture(scope="session")
def tiny_split(tiny_dataset):
    return split_dataset(tiny_dataset, holdout_fraction=0.2)
