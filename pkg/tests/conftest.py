"""Shared fixtures: random SPD matrices, toy mixtures, a small trained prior.

Expensive artifacts (trained models, benchmark runs) are cached under
tests/_cache keyed by their configuration so repeated pytest runs stay fast.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

CACHE = Path(__file__).parent / "_cache"
CACHE.mkdir(exist_ok=True)


def rand_spd(d, rng, scale=1.0):
    """Well-conditioned random SPD matrix."""
    a = rng.standard_normal((d, d)) / np.sqrt(d)
    return scale * (a @ a.T + 0.5 * np.eye(d))


def rand_mixture(k, d, rng, mean_scale=2.0, cov_scale=1.0):
    """Random valid mixture parameters (weights, means, covariances)."""
    w = rng.random(k) + 0.2
    w /= w.sum()
    mu = mean_scale * rng.standard_normal((k, d))
    cov = np.stack([rand_spd(d, rng, cov_scale) for _ in range(k)])
    return w, mu, cov


@pytest.fixture(scope="session")
def cache_dir():
    return CACHE


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_prior():
    """K=5 prior over 64-dim patches with distinct, well-separated components."""
    from refsep.gmm import GmmPrior, PATCH_DIM
    r = np.random.default_rng(7)
    w, mu, cov = rand_mixture(5, PATCH_DIM, r, mean_scale=1.5, cov_scale=0.5)
    return GmmPrior.create(w, mu, cov)


@pytest.fixture(scope="session")
def trained_prior(cache_dir):
    """K=8 prior EM-trained on patches of a structured synthetic image."""
    from refsep import gmm

    path = cache_dir / "trained_k8.gmm"
    if path.exists():
        return gmm.load_model(path)
    r = np.random.default_rng(42)
    imgs = []
    for _ in range(12):
        base = np.kron(r.random((8, 8)), np.ones((8, 8)))
        ramp = np.linspace(0, 1, 64)[None, :] * r.random()
        imgs.append(np.clip(0.6 * base + 0.3 * ramp + 0.05 * r.standard_normal((64, 64)), 0, 1))
    patches = np.concatenate([gmm.extract_patches(im, stride=4)[1] for im in imgs])
    prior = gmm.train_em(patches, gmm.TrainConfig(k=8, max_iters=60, seed=0))
    gmm.save_model(prior, path)
    return prior


@pytest.fixture(scope="session")
def photo_corpus(cache_dir):
    """Train/test split of grayscale photo tiles, built once per machine."""
    import make_corpus

    train_dir, test_dir = make_corpus.build(cache_dir / "corpus")
    return {"train": make_corpus.load_split(train_dir),
            "test": make_corpus.load_split(test_dir)}


def _corpus_prior(cache_dir, k, iters):
    from refsep import gmm
    import make_corpus
    import train_priors

    path = cache_dir / f"k{k}.gmm"
    if path.exists():
        return gmm.load_model(path)
    train_dir, _ = make_corpus.build(cache_dir / "corpus")
    pats = train_priors.training_patches(train_dir)
    prior = gmm.train_em(pats, gmm.TrainConfig(k=k, max_iters=iters,
                                               tol=1e-6, seed=0))
    gmm.save_model(prior, path)
    return prior


@pytest.fixture(scope="session")
def prior_k50(cache_dir):
    """K=50 prior trained on the photo corpus (minutes to build cold)."""
    return _corpus_prior(cache_dir, 50, 60)


@pytest.fixture(scope="session")
def prior_k200(cache_dir):
    """K=200 prior trained on the photo corpus (tens of minutes cold)."""
    return _corpus_prior(cache_dir, 200, 40)
