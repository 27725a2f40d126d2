"""Shared fixtures: bundled scenes, small render settings, and the
expensive session-scoped training artifacts reused across test files."""

import time

import pytest
from hypothesis import HealthCheck, settings

from viewrobust.attack import AttackConfig
from viewrobust.classifier import pretrain_clean
from viewrobust.geometry import ViewBounds
from viewrobust.rendering import RenderConfig
from viewrobust.scenes import NaturalViewpointSampler, split_train_val, toy_suite
from viewrobust.training import TrainConfig, viat_train

settings.register_profile(
    "package", deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("package")


@pytest.fixture(scope="session")
def bounds():
    return ViewBounds.default()


@pytest.fixture(scope="session")
def suite():
    return toy_suite()


@pytest.fixture(scope="session")
def render16():
    # small frames keep the render-heavy tests fast without losing the
    # class markers
    return RenderConfig(width=16, height=16, m_samples=24)


@pytest.fixture(scope="session")
def sampler(bounds):
    return NaturalViewpointSampler(bounds)


@pytest.fixture(scope="session")
def pretrained(suite, sampler, render16):
    """Classifier trained on natural views of all 16 objects."""
    return pretrain_clean(suite, sampler, render16, seed=0)


@pytest.fixture(scope="session")
def viat_pair(suite, pretrained, bounds, render16):
    """(standard, hardened) classifier pair; minutes to build, so it is
    session-scoped and shared by every test that compares the two."""
    std, _ = pretrained
    train_scenes, _ = split_train_val(suite, val_fraction=0.25)
    train_cfg = TrainConfig(
        epochs=16, t0=40, t_prime=4, steps_per_epoch=80, eta_w=0.002, seed=0
    )
    attack_cfg = AttackConfig(k=15, q=100, eta=0.08, lam=0.01, seed=0)
    t0 = time.monotonic()
    hardened, pool, metrics = viat_train(
        train_scenes, std, bounds, train_cfg, attack_cfg, render_config=render16
    )
    return {
        "std": std,
        "viat": hardened,
        "pool": pool,
        "metrics": metrics,
        "build_seconds": time.monotonic() - t0,
    }
