"""Shared fixtures. Heavy artifacts (corpus, trained model, classifier) are
built once and cached on disk keyed by their configuration, so repeated test
runs reuse them; delete tests/_cache to force a rebuild."""

import hashlib
import json
import os

import numpy as np
import pytest

CACHE_DIR = os.path.join(os.path.dirname(__file__), "_cache")

# Desk-scale training setup shared by the trained-model tests and the
# acceptance suite.
TRAIN_SETUP = {
    "n_scenes": 20000,
    "corpus_seed": 101,
    "t_obs": 10,
    "epochs": 4.0,
    "batch_size": 32,
    "train_seed": 7,
    "worldgen": {},
}


def cache_key(doc):
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def cache_path(name):
    os.makedirs(CACHE_DIR, exist_ok=True)
    return os.path.join(CACHE_DIR, name)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def small_worlds():
    """A light bundle of generated worlds for fast structural tests."""
    from scenediff.worldgen import SynthWorldConfig, generate_world

    g = np.random.default_rng(42)
    cfg = SynthWorldConfig()
    return [generate_world(cfg, g) for _ in range(24)]


@pytest.fixture(scope="session")
def desk_corpus():
    """The full training corpus (cached on disk)."""
    from scenediff.dataio import generate_corpus, load_corpus, save_corpus
    from scenediff.worldgen import SynthWorldConfig

    key = cache_key({k: TRAIN_SETUP[k] for k in ("n_scenes", "corpus_seed", "t_obs", "worldgen")})
    path = cache_path(f"corpus_{key}")
    if os.path.exists(os.path.join(path, "manifest.json")):
        return load_corpus(path)
    corpus = generate_corpus(
        SynthWorldConfig(**TRAIN_SETUP["worldgen"]),
        TRAIN_SETUP["n_scenes"],
        TRAIN_SETUP["corpus_seed"],
        t_obs=TRAIN_SETUP["t_obs"],
    )
    save_corpus(path, corpus)
    return corpus


@pytest.fixture(scope="session")
def trained_model(desk_corpus):
    """Desk-scale trained denoiser (cached on disk); returns
    (denoiser, corpus, task distribution)."""
    from scenediff.diffusion import DiffusionConfig
    from scenediff.net import NetworkConfig, ScoreNetwork
    from scenediff.net.network import NetDenoiser
    from scenediff.net.training import TrainConfig, load_checkpoint, train
    from scenediff.scene import TaskDistribution

    key = cache_key(TRAIN_SETUP)
    path = cache_path(f"model_{key}.npz")
    dist = TaskDistribution(t_obs=TRAIN_SETUP["t_obs"])
    if os.path.exists(path):
        net, dcfg, scales, dist, _ = load_checkpoint(path)
        return NetDenoiser(net, dcfg), desk_corpus, dist
    net = ScoreNetwork(
        NetworkConfig.desk(), rng=np.random.default_rng(TRAIN_SETUP["train_seed"])
    )
    tconfig = TrainConfig(
        epochs=TRAIN_SETUP["epochs"],
        batch_size=TRAIN_SETUP["batch_size"],
        seed=TRAIN_SETUP["train_seed"],
        log_every=100,
    )
    denoiser, trace = train(
        net, desk_corpus, dist, desk_corpus.scales, DiffusionConfig(), tconfig,
        checkpoint_path=path,
    )
    return denoiser, desk_corpus, dist


@pytest.fixture(scope="session")
def cutin_classifier(desk_corpus):
    """Trained cut-in classifier + mined examples (cached)."""
    from scenediff.diffusion import DiffusionConfig
    from scenediff.guidance import ClassifierTrainConfig, train_cutin_classifier
    from scenediff.mining import mine_cutins, read_examples_jsonl, write_examples_jsonl
    from scenediff.service import (
        classifier_training_arrays,
        load_classifier,
        save_classifier,
    )

    key = cache_key({**TRAIN_SETUP, "what": "classifier", "scenes": 4000})
    clf_path = cache_path(f"classifier_{key}.npz")
    ex_path = cache_path(f"cutins_{key}.jsonl")
    if os.path.exists(clf_path) and os.path.exists(ex_path):
        return load_classifier(clf_path), read_examples_jsonl(ex_path)
    worlds = (desk_corpus.world(i) for i in range(4000))
    examples = mine_cutins(worlds, pairs="all")
    write_examples_jsonl(ex_path, examples)
    arrays, labels, latent_steps = classifier_training_arrays(
        examples, desk_corpus.scales, TRAIN_SETUP["t_obs"]
    )
    clf, report = train_cutin_classifier(
        arrays, labels, latent_steps, DiffusionConfig(),
        ClassifierTrainConfig(seed=3, t_obs=TRAIN_SETUP["t_obs"]),
    )
    save_classifier(clf_path, clf, report)
    return clf, examples
