import numpy as np
import pytest

from emoface.dataset import SyntheticCorpusConfig, generate_corpus, load_corpus
from emoface.face_model import SyntheticModelConfig, build_synthetic_model
from emoface.trainer import TrainConfig, train


@pytest.fixture(scope="session")
def default_model():
    return build_synthetic_model(SyntheticModelConfig(), seed=1000)


@pytest.fixture(scope="session")
def small_model():
    cfg = SyntheticModelConfig(rows=4, cols=12, n_expression=10, n_pose=4, n_shape=2)
    return build_synthetic_model(cfg, seed=7)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


TINY_CORPUS_CONFIG = SyntheticCorpusConfig(
    n_clips=14,
    duration_range=(1.0, 1.5),
    model=SyntheticModelConfig(rows=6, cols=16, n_shape=2),
    seed=77,
)

TINY_TRAIN_CONFIG = TrainConfig(
    epochs=4,
    predictor_epochs=3,
    augment_epochs=12,
    batch_size=8,
    seed=1000,
    checkpoint_every=2,
)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_corpus")
    generate_corpus(TINY_CORPUS_CONFIG, out)
    return load_corpus(out)


@pytest.fixture(scope="session")
def tiny_run(tiny_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_run")
    return train(TINY_TRAIN_CONFIG, tiny_corpus, out)
