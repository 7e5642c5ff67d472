from __future__ import annotations

import numpy as np
import pytest

from amrod import config as cfgmod
from amrod import streams
from amrod.toydet import Box, Detection, DetectorConfig, Image, init_params


@pytest.fixture(scope="session")
def source_model():
    """Default pretraining recipe; shared by every test that needs a real source."""
    store, prov = streams.pretrain_source()
    return store, prov


@pytest.fixture(scope="session")
def tiny_source():
    """A briefly trained source: something with non-trivial detections, cheap to build."""
    store, prov = streams.pretrain_source(n_frames=150, epochs=2, heldout=40, min_map=0.0, target_map=1.1)
    return store, prov


@pytest.fixture
def seed0_params():
    return init_params(DetectorConfig(), seed=0)


@pytest.fixture
def tiny_cfg():
    """Two domains, a handful of frames, two rounds."""
    base = cfgmod.short_term_config(0, frames_per_domain=3)
    return cfgmod.apply_overrides(
        base,
        {"stream.domains": "gaussian_noise-5,blur-5", "stream.rounds": "2", "run.name": "tiny"},
    )


def det(cls: int, score: float, box=(0.5, 0.5, 0.2, 0.2)) -> Detection:
    return Detection(Box(*box), cls, score)


def rand_image(seed: int = 0) -> Image:
    return Image(np.random.default_rng(seed).random((1, 32, 32)))
