"""Shared fixtures.

Thread pools are pinned before NumPy loads: the convolution GEMMs here are
small enough that OpenBLAS worker threads only add spin-wait contention
(results are identical either way).
"""

import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_phantom(tmp_path_factory):
    """Small 3-class phantom set for plumbing tests (not for learnability)."""
    from spatiodec.data import desk_phantom_spec, phantom_generate

    spec = desk_phantom_spec(
        num_classes=3,
        num_subjects=10,
        blocks_per_subject_per_class=1,
        block_length=(20, 24, 19),
        snr=2.0,
        seed=99,
    )
    out = tmp_path_factory.mktemp("tiny_phantom")
    manifest = phantom_generate(spec, out)
    return spec, manifest


@pytest.fixture
def tiny_model_config():
    """Smallest config that still exercises every stage."""
    from spatiodec.model import ModelConfig

    return ModelConfig(
        input_extents=(8, 16, 20, 18),  # matches the tiny phantom volumes
        conv_channels=2,
        temporal_kernel=3,
        stage_channels=(4, 4, 4, 4),
        stage_strides=(1, 2, 1, 1),
        attention_depths=(1, 1, 1, 1),
        num_classes=3,
        seed=5,
    )
