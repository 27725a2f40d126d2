"""Training loop: pool updates, sharing, checkpoints and resume."""

import numpy as np
import pytest

from viewrobust.attack import AttackConfig
from viewrobust.classifier import TinyImageClassifier, load_classifier
from viewrobust.serialization import write_array_container
from viewrobust.geometry import ViewBounds
from viewrobust.mixture import MixtureParams, entropy_estimate
from viewrobust.rendering import RenderConfig, render_views
from viewrobust.scenes import NaturalViewpointSampler, toy_suite
from viewrobust.training import (
    DistPool,
    EpochMetrics,
    PoolEntry,
    TrainConfig,
    ViatTrainer,
    assemble_minibatch,
    choose_shared_dist,
    init_dist_pool,
    load_checkpoint,
    pool_scene_keys,
    save_checkpoint,
    stochastic_inner_update,
    viat_train,
)
from viewrobust.validation import ValidationError

RENDER8 = RenderConfig(width=8, height=8, m_samples=8)
ATTACK_TINY = AttackConfig(k=2, iters=4, q=20, eta=0.1, lam=0.01, seed=0)


@pytest.fixture(scope="module")
def scenes4():
    suite = toy_suite()
    return [suite[0], suite[1], suite[4], suite[5]]  # labels 0, 0, 1, 1


@pytest.fixture(scope="module")
def clf8(scenes4, bounds):
    clf = TinyImageClassifier(
        hidden=(12,), n_classes=4, input_shape=(8, 8, 3), seed=5, eta=0.05
    )
    sampler = NaturalViewpointSampler(bounds)
    rng = np.random.default_rng(2)
    imgs = np.stack(
        [render_views(sc, sampler.sample(sc.label, 1, rng), RENDER8)[0] for sc in scenes4]
    )
    clf.partial_fit(imgs, [sc.label for sc in scenes4])
    return clf


@pytest.fixture(scope="module")
def pool4(scenes4, clf8, bounds):
    return init_dist_pool(scenes4, clf8, bounds, ATTACK_TINY, RENDER8)


def fresh_params(seed):
    return MixtureParams.init_spread(2, np.random.default_rng(seed))


def toy_pool():
    return DistPool(
        {
            (0, 0): PoolEntry(fresh_params(0), 5),
            (0, 1): PoolEntry(fresh_params(1), 5),
            (0, 2): PoolEntry(fresh_params(2), 5),
            (1, 0): PoolEntry(fresh_params(3), 5),
        }
    )


# -- config and pool basics ----------------------------------------------------


@pytest.mark.parametrize(
    "kw",
    [
        {"epochs": -1},
        {"t0": 0},
        {"t_prime": 0},
        {"update_fraction": 0.0},
        {"update_fraction": 1.2},
        {"pi": -0.1},
        {"pi": 1.5},
        {"adv_per_batch": -1},
        {"clean_per_batch": 0},
        {"eta_w": 0.0},
    ],
)
def test_train_config_rejects_bad_values(kw):
    with pytest.raises(ValidationError):
        TrainConfig(**kw)


def test_pool_scene_keys_count_per_class():
    class Stub:
        def __init__(self, label):
            self.label = label

    keys = pool_scene_keys([Stub(0), Stub(1), Stub(0), Stub(2), Stub(1)])
    assert keys == [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1)]


def test_pool_rejects_negative_counter():
    with pytest.raises(ValidationError):
        DistPool({(0, 0): PoolEntry(fresh_params(0), -1)})


def test_pool_lookup_and_keys():
    pool = toy_pool()
    assert len(pool) == 4
    assert pool.keys() == [(0, 0), (0, 1), (0, 2), (1, 0)]
    assert pool.class_objects(0) == [0, 1, 2]
    assert pool.get(1, 0).counter == 5


def test_pool_mean_entropy_single_entry_matches_direct(bounds):
    params = fresh_params(7)
    pool = DistPool({(0, 0): PoolEntry(params, 1)})
    direct, _ = entropy_estimate(params, bounds, 256, np.random.default_rng(5))
    assert pool.mean_entropy(bounds, 256, 5) == pytest.approx(direct, abs=1e-12)


def test_pool_save_load_round_trip(tmp_path, bounds):
    pool = toy_pool()
    path = tmp_path / "pool.ckpt"
    pool.save(path, meta={"note": "test"})
    loaded = DistPool.load(path)
    assert loaded.keys() == pool.keys()
    for key in pool.keys():
        a, b = pool.get(*key), loaded.get(*key)
        assert a.counter == b.counter
        assert np.array_equal(a.params.omega, b.params.omega)
        assert np.array_equal(a.params.mu, b.params.mu)
        assert np.array_equal(a.params.sigma, b.params.sigma)


def test_pool_load_rejects_other_containers(tmp_path):
    clf = TinyImageClassifier(hidden=(4,), n_classes=2, input_shape=(2, 2, 3))
    clf.partial_fit(np.zeros((2, 2, 2, 3)), [0, 1])
    path = tmp_path / "clf.ckpt"
    clf.save(path)
    with pytest.raises(ValidationError):
        DistPool.load(path)


# -- distribution sharing --------------------------------------------------------


def test_sharing_pi_one_always_own():
    pool = toy_pool()
    own = pool.get(0, 1).params
    for seed in range(20):
        got = choose_shared_dist(pool, 0, 1, pi=1.0, rng=seed)
        assert got is own


def test_sharing_pi_zero_never_own_with_siblings():
    pool = toy_pool()
    own = pool.get(0, 1).params
    siblings = {id(pool.get(0, 0).params), id(pool.get(0, 2).params)}
    for seed in range(20):
        got = choose_shared_dist(pool, 0, 1, pi=0.0, rng=seed)
        assert got is not own
        assert id(got) in siblings


def test_sharing_single_object_class_falls_back_to_own():
    pool = toy_pool()
    own = pool.get(1, 0).params
    for seed in range(5):
        assert choose_shared_dist(pool, 1, 0, pi=0.0, rng=seed) is own


def test_sharing_frequency_matches_pi():
    # seeded borrow frequency over 1e5 trials for pi = 0.5
    pool = toy_pool()
    own = pool.get(0, 0).params
    rng = np.random.default_rng(42)
    n = 100_000
    borrowed = sum(
        choose_shared_dist(pool, 0, 0, pi=0.5, rng=rng) is not own for _ in range(n)
    )
    assert 0.49 <= borrowed / n <= 0.51


# -- stochastic inner update -----------------------------------------------------


def test_inner_update_fraction_one_updates_all(pool4, scenes4, clf8, bounds):
    new = stochastic_inner_update(
        pool4, scenes4, clf8, bounds, ATTACK_TINY,
        epoch_seed=3, fraction=1.0, t_prime=2, render_config=RENDER8,
    )
    for key in pool4.keys():
        assert new.get(*key).counter == pool4.get(*key).counter + 2
        assert new.get(*key).params is not pool4.get(*key).params


def test_inner_update_untouched_entries_are_same_objects(pool4, scenes4, clf8, bounds):
    new = stochastic_inner_update(
        pool4, scenes4, clf8, bounds, ATTACK_TINY,
        epoch_seed=3, fraction=0.5, t_prime=2, render_config=RENDER8,
    )
    updated = [k for k in pool4.keys() if new.get(*k).counter != pool4.get(*k).counter]
    untouched = [k for k in pool4.keys() if k not in updated]
    # half of each class's objects move, rounded up
    assert len(updated) == 2
    assert {c for c, _ in updated} == {0, 1}
    for key in untouched:
        assert new.get(*key) is pool4.get(*key)
    for key in updated:
        assert new.get(*key).counter == pool4.get(*key).counter + 2


def test_inner_update_is_deterministic(pool4, scenes4, clf8, bounds):
    runs = [
        stochastic_inner_update(
            pool4, scenes4, clf8, bounds, ATTACK_TINY,
            epoch_seed=11, fraction=0.5, t_prime=2, render_config=RENDER8,
        )
        for _ in range(2)
    ]
    for key in pool4.keys():
        assert np.array_equal(runs[0].get(*key).params.mu, runs[1].get(*key).params.mu)


# -- minibatch assembly ----------------------------------------------------------


def test_minibatch_shapes_and_labels(pool4, scenes4, bounds):
    sampler = NaturalViewpointSampler(bounds)
    images, labels = assemble_minibatch(
        pool4, scenes4, sampler, (2, 6), pi=0.5,
        rng=np.random.default_rng(0), bounds=bounds, render_config=RENDER8,
    )
    assert images.shape == (8, 8, 8, 3)
    assert labels.shape == (8,)
    assert set(labels) <= {0, 1}
    assert images.min() >= 0.0 and images.max() <= 1.0


def test_minibatch_adv_zero_is_all_clean(pool4, scenes4, bounds):
    sampler = NaturalViewpointSampler(bounds)
    images, labels = assemble_minibatch(
        pool4, scenes4, sampler, (0, 5), pi=0.5,
        rng=np.random.default_rng(1), bounds=bounds, render_config=RENDER8,
    )
    assert images.shape[0] == 5


# -- checkpoints and the full loop ------------------------------------------------


def test_checkpoint_round_trip(tmp_path, pool4, clf8):
    metrics = [EpochMetrics(0, 1.0, 0.25, 3.5), EpochMetrics(1, 0.9, 0.5, 3.25)]
    path = tmp_path / "ck.ckpt"
    save_checkpoint(path, clf8, pool4, metrics, epoch=1, meta={"run": "t"})
    clf2, pool2, metrics2, epoch = load_checkpoint(path, clf8)
    assert epoch == 1
    assert metrics2 == metrics
    for (w, b), (w2, b2) in zip(clf8.weights_, clf2.weights_):
        assert np.array_equal(w, w2) and np.array_equal(b, b2)
    assert pool2.keys() == pool4.keys()
    for key in pool4.keys():
        assert pool2.get(*key).counter == pool4.get(*key).counter
        assert np.array_equal(pool2.get(*key).params.mu, pool4.get(*key).params.mu)


def test_checkpoint_rejects_mismatched_template(tmp_path, pool4, clf8):
    path = tmp_path / "ck.ckpt"
    save_checkpoint(path, clf8, pool4, [EpochMetrics(0, 1, 1, 1)], epoch=0)
    other = TinyImageClassifier(hidden=(7,), n_classes=4, input_shape=(8, 8, 3))
    with pytest.raises(ValidationError):
        load_checkpoint(path, other)


def test_load_classifier_accepts_training_checkpoint(tmp_path, pool4, clf8):
    # a training checkpoint stands in for a bare classifier checkpoint
    # anywhere only predictions are needed
    path = tmp_path / "ck.ckpt"
    save_checkpoint(path, clf8, pool4, [EpochMetrics(0, 1, 1, 1)], epoch=0)
    clf = load_classifier(path)
    x = np.random.default_rng(2).uniform(size=(5, 8, 8, 3))
    assert np.array_equal(clf.predict(x), clf8.predict(x))
    assert np.allclose(clf.decision_function(x), clf8.decision_function(x))


def test_load_classifier_round_trips_bare_checkpoint(tmp_path, clf8):
    path = tmp_path / "clf.ckpt"
    clf8.save(path)
    clf = load_classifier(path)
    x = np.random.default_rng(3).uniform(size=(4, 8, 8, 3))
    assert np.array_equal(clf.predict(x), clf8.predict(x))


def test_load_classifier_rejects_other_containers(tmp_path):
    path = tmp_path / "junk.ckpt"
    write_array_container(path, {"kind": "something-else"}, {"a": np.ones(3)})
    with pytest.raises(ValidationError):
        load_classifier(path)


def tiny_train_config(epochs):
    return TrainConfig(
        epochs=epochs, t0=4, t_prime=2, update_fraction=0.5, pi=0.5,
        adv_per_batch=1, clean_per_batch=6, steps_per_epoch=3,
        eta_w=0.002, eval_views=4, entropy_probe=64, seed=0,
    )


def test_train_zero_epochs_returns_baseline(scenes4, clf8, bounds):
    before = [w.copy() for w, _ in clf8.weights_]
    clf, pool, metrics = viat_train(
        scenes4, clf8, bounds, tiny_train_config(0), ATTACK_TINY, RENDER8
    )
    assert clf is not clf8
    assert len(metrics) == 1 and metrics[0].epoch == 0
    assert len(pool) == 4
    # input classifier is never mutated
    for w0, (w, _) in zip(before, clf8.weights_):
        assert np.array_equal(w0, w)
    for (w, _), (w2, _) in zip(clf8.weights_, clf.weights_):
        assert np.array_equal(w, w2)


def test_train_epochs_advance_counters_and_metrics(scenes4, clf8, bounds):
    clf, pool, metrics = viat_train(
        scenes4, clf8, bounds, tiny_train_config(2), ATTACK_TINY, RENDER8
    )
    assert [m.epoch for m in metrics] == [0, 1, 2]
    counters = [pool.get(*k).counter for k in pool.keys()]
    # t0 plus one or two stochastic updates of t_prime each
    assert all(c >= 4 for c in counters)
    assert sum(counters) == 4 * 4 + 2 * 2 * 2  # half the objects per epoch
    changed = any(
        not np.array_equal(w, w2)
        for (w, _), (w2, _) in zip(clf8.weights_, clf.weights_)
    )
    assert changed


def test_resume_reproduces_uninterrupted_run(tmp_path, scenes4, clf8, bounds):
    d_full = tmp_path / "full"
    d_resume = tmp_path / "resume"
    d_full.mkdir()
    d_resume.mkdir()
    viat_train(
        scenes4, clf8, bounds, tiny_train_config(2), ATTACK_TINY, RENDER8,
        checkpoint_dir=str(d_full),
    )
    clf_r, pool_r, metrics_r = viat_train(
        scenes4, clf8, bounds, tiny_train_config(2), ATTACK_TINY, RENDER8,
        checkpoint_dir=str(d_resume),
        resume_from=str(d_full / "epoch_0001.ckpt"),
    )
    full_bytes = (d_full / "epoch_0002.ckpt").read_bytes()
    resume_bytes = (d_resume / "epoch_0002.ckpt").read_bytes()
    assert full_bytes == resume_bytes
    assert [m.epoch for m in metrics_r] == [0, 1, 2]


def test_trainer_estimator_smoke(scenes4, clf8, bounds):
    est = ViatTrainer(
        epochs=1, t0=4, t_prime=2, steps_per_epoch=3, clean_per_batch=6,
        eta_w=0.002, seed=0, attack_config=ATTACK_TINY, render_config=RENDER8,
        bounds=bounds,
    )
    assert est.fit(scenes4, clf8) is est
    assert len(est.metrics_) == 2
    assert len(est.pool_) == 4
    assert est.classifier_.predict(np.zeros((1, 8, 8, 3))).shape == (1,)
    assert est.get_params()["epochs"] == 1
