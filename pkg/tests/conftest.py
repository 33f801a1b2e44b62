"""Shared fixtures: a small separable synthetic corpus and tiny model configs."""

import numpy as np
import pytest

from fewshotlib.episodes import Split
from fewshotlib.features import Corpus, SynthClassSpec, generate_synthetic_corpus
from fewshotlib.model import EncoderConfig, ExtractorConfig, ExtractorKind, ModelConfig, ModelState

CHANNELS = 6


def class_specs(num_classes=4, channels=CHANNELS, separation=3.0, noise=0.5, shift=0.0, seed=0):
    rng = np.random.default_rng(seed)
    shift_vector = np.full(channels, shift)
    return [
        SynthClassSpec(
            class_id=f"c{c}",
            channel_means=rng.normal(0.0, separation, size=channels),
            channel_stddevs=np.full(channels, noise),
            length_range=(4, 8),
            dataset_shift=shift_vector,
        )
        for c in range(num_classes)
    ]


def make_corpus(per_class=30, num_datasets=2, seed=0, heldout=None, **spec_kwargs) -> Corpus:
    synthetic = generate_synthetic_corpus(
        class_specs(**spec_kwargs),
        per_class=per_class,
        num_datasets=num_datasets,
        rng=np.random.default_rng(seed),
        heldout=heldout,
    )
    return synthetic.as_corpus()


def tiny_config(kind=ExtractorKind.GLU, dann=False, num_datasets=0) -> ModelConfig:
    return ModelConfig(
        encoder=EncoderConfig(CHANNELS, hidden_channels=8, num_layers=1, kernel_width=3),
        extractor=ExtractorConfig(kind=kind, embedding_dim=8, glu_kernel=3),
        dann_enabled=dann,
        num_datasets=num_datasets,
    )


def tiny_model(kind=ExtractorKind.GLU, dann=False, num_datasets=0, seed=0) -> ModelState:
    return ModelState.init(tiny_config(kind, dann, num_datasets), np.random.default_rng(seed))


@pytest.fixture
def corpus() -> Corpus:
    return make_corpus()


@pytest.fixture
def shifted_corpus() -> Corpus:
    """Two training datasets plus a shifted dataset held out for testing."""
    return make_corpus(num_datasets=3, heldout={2: Split.TEST}, shift=1.0)
