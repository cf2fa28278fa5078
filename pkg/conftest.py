"""Session fixtures: one small trained model set shared by the pipeline-level tests."""
import pytest

import config
from dnn import save_network
from eval_harness import CorpusSpec, synthesize_corpus, train_models
from fusion import FusionConfig, KwsPipeline


@pytest.fixture(scope="session")
def train_corpus():
    return synthesize_corpus(CorpusSpec(n_positive=40, n_negative=40, seed=1))


@pytest.fixture(scope="session")
def trained_models(train_corpus):
    return train_models(train_corpus, hidden_layers=2, hidden_nodes=64, epochs=15, learning_rate=0.05,
                        vad_components=8, em_iters=50, seed=0)


@pytest.fixture(scope="session")
def pipeline(trained_models):
    return KwsPipeline(trained_models.params, trained_models.vad, FusionConfig())


@pytest.fixture(scope="session")
def eval_corpus():
    return synthesize_corpus(CorpusSpec(seed=7))


@pytest.fixture(scope="session")
def model_dir(trained_models, tmp_path_factory):
    path = tmp_path_factory.mktemp("models")
    save_network(trained_models.params, path / config.DNN_FILE)
    trained_models.vad.save(path)
    return path
