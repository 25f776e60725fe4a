"""Shared heavyweight fixtures.

Pretraining, landmarker training, and inversion are minutes-scale, so they
are session-scoped and cached on disk under tests/_cache (delete the
directory or set GANADAPT_TEST_CACHE=0 to force recomputation). Every
fixture is a pure function of fixed seeds, so the cache never changes what
the tests see, only how fast they see it.
"""

from __future__ import annotations

import os
from pathlib import Path

import pytest

from ganadapt import adapt, domain, metrics, nets

CACHE_VERSION = "v2"
FIXTURE_SEED = 0  # training seeds (pretrain, landmarker, inversion)
SCENE_SEED = 4  # scene params of the one-shot reference
FE_SEED = 101


def _cache_dir() -> Path | None:
    if os.environ.get("GANADAPT_TEST_CACHE", "1") == "0":
        return None
    d = Path(__file__).parent / "_cache" / CACHE_VERSION
    d.mkdir(parents=True, exist_ok=True)
    return d


@pytest.fixture(scope="session")
def net_config():
    return nets.NetConfig()


@pytest.fixture(scope="session")
def feature_extractor():
    return nets.FeatureExtractor(seed=FE_SEED)


@pytest.fixture(scope="session")
def source_bundle(net_config):
    cache = _cache_dir()
    path = cache / "source.ckpt" if cache else None
    if path and path.exists():
        bundle, _ = nets.load_checkpoint(path)
        return bundle
    bundle, report = adapt.pretrain(net_config, seed=FIXTURE_SEED, max_steps=4000, lr=3e-3)
    assert report["converged"], f"pretraining failed to converge: {report}"
    if path:
        nets.save_checkpoint(path, bundle, extra={"val_l1": report["val_l1"]})
    return bundle


@pytest.fixture(scope="session")
def landmarker():
    cache = _cache_dir()
    path = cache / "landmarker.ckpt" if cache else None
    if path and path.exists():
        return metrics.load_landmarker(path)
    lmk, report = metrics.train_landmarker(seed=FIXTURE_SEED, steps=1500)
    assert report["converged"], f"landmarker failed to converge: {report}"
    if path:
        metrics.save_landmarker(path, lmk)
    return lmk


@pytest.fixture(scope="session")
def fixture_params():
    return domain.sample_params(SCENE_SEED)


@pytest.fixture(scope="session")
def hat_reference(fixture_params):
    """Standard fixture: sepia style plus hat entity."""
    return domain.make_reference(fixture_params, style="sepia", entity="hat")


@pytest.fixture(scope="session")
def maskfree_reference(fixture_params):
    """Style-only fixture with an all-zero mask."""
    return domain.make_reference(fixture_params, style="sepia", entity=None)


@pytest.fixture(scope="session")
def w_ref(source_bundle, hat_reference, feature_extractor):
    from ganadapt.latent import load_latent, save_latent

    cache = _cache_dir()
    path = cache / "w_ref.latent" if cache else None
    if path and path.exists():
        return load_latent(path)
    code = adapt.invert(source_bundle, hat_reference, feature_extractor, seed=FIXTURE_SEED)
    if path:
        save_latent(path, code)
    return code
