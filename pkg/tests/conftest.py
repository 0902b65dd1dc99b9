import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from factored_slt.corpus import (
    SyntheticSpec,
    build_vocabulary,
    generate_synthetic_corpus,
    trim_vocabulary,
)
from factored_slt.visual_encoder import VisualEncoderConfig

settings.register_profile(
    "suite",
    deadline=None,
    max_examples=30,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


TINY_SPEC = SyntheticSpec(
    glyph_vocab_size=5,
    sentence_length_range=(2, 4),
    frames_per_glyph=4,
    jitter=1,
    image_size=(32, 32),
    counts=(16, 4, 4),
    seed=3,
)

MICRO_VISUAL = VisualEncoderConfig(
    backbone_channels=(4, 8, 16, 32), feature_dim=32, temporal_kernel=5
)


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_synthetic_corpus(TINY_SPEC)


@pytest.fixture(scope="session")
def tiny_vocab(tiny_corpus):
    base = build_vocabulary(
        tok for s in tiny_corpus.train for tok in s.transcript.split()
    )
    return trim_vocabulary(base, tiny_corpus)


@pytest.fixture(scope="session")
def trend_results(tmp_path_factory):
    """The 3-seed acceptance experiment matrix; built once per session."""
    from tests.trendkit import run_trend_suite

    return run_trend_suite(tmp_path_factory.mktemp("trend"))


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(1234)
    yield


@pytest.fixture()
def rng():
    return np.random.default_rng(99)
