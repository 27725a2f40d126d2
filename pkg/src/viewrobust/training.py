"""Adversarial-viewpoint training.

Maintains one attack distribution per training object in a pool.  Each
epoch advances the distributions of a random subset of objects by a few
inner search iterations against the current classifier (cheap, always
warm-started), then fine-tunes the classifier on minibatches mixing a
small number of adversarial renders into clean natural-view batches.
Viewpoints for an object's adversarial renders may be borrowed from
another object of the same class (distribution sharing), which spreads
each object's discovered weak regions across its class.
"""

import logging
from dataclasses import dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator, clone

from .attack import run_attack
from .geometry import ViewBounds
from .mixture import MixtureParams, entropy_estimate, sample_mixture
from .rendering import RenderConfig, render_views
from .serialization import read_array_container, write_array_container
from .validation import ValidationError, check_positive_int

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    t0: int = 40
    t_prime: int = 4
    update_fraction: float = 0.5
    pi: float = 0.5
    adv_per_batch: int = 1
    clean_per_batch: int = 32
    steps_per_epoch: int = 60
    # step size for the summed batch loss; keep ~1/batch of the usual
    # mean-loss scale or the updates blow past the optimum
    eta_w: float = 0.002
    eval_views: int = 6
    entropy_probe: int = 128
    seed: int = 0

    def __post_init__(self):
        check_positive_int(self.t0, "t0")
        check_positive_int(self.t_prime, "t_prime")
        check_positive_int(self.steps_per_epoch, "steps_per_epoch")
        if self.epochs < 0:
            raise ValidationError(f"epochs: must be >= 0, got {self.epochs}")
        if not 0.0 <= self.pi <= 1.0:
            raise ValidationError(f"pi: must be in [0, 1], got {self.pi}")
        if not 0.0 < self.update_fraction <= 1.0:
            raise ValidationError(
                f"update_fraction: must be in (0, 1], got {self.update_fraction}"
            )
        if self.adv_per_batch < 0 or self.clean_per_batch < 1:
            raise ValidationError("batch ratio: need adv >= 0 and clean >= 1")
        if self.eta_w <= 0:
            raise ValidationError(f"eta_w: must be > 0, got {self.eta_w}")

    def with_overrides(self, **kw):
        return replace(self, **kw)


@dataclass(frozen=True)
class PoolEntry:
    params: MixtureParams
    counter: int  # cumulative inner iterations spent on this object


class DistPool:
    """Per-object attack distributions keyed by (class, object index)."""

    def __init__(self, entries):
        self.entries = dict(entries)
        for key, entry in self.entries.items():
            if entry.counter < 0:
                raise ValidationError(f"pool entry {key}: negative counter")

    def __len__(self):
        return len(self.entries)

    def keys(self):
        return sorted(self.entries)

    def get(self, c, j):
        return self.entries[(c, j)]

    def class_objects(self, c):
        return sorted(j for (cc, j) in self.entries if cc == c)

    def replaced(self, updates):
        """New pool with the given {(c, j): PoolEntry} swapped in;
        untouched entries are the same objects as before."""
        merged = dict(self.entries)
        merged.update(updates)
        return DistPool(merged)

    def mean_entropy(self, bounds, n, rng):
        rng = np.random.default_rng(rng)
        vals = [
            entropy_estimate(e.params, bounds, n, rng)[0]
            for _, e in sorted(self.entries.items())
        ]
        return float(np.mean(vals))

    def save(self, path, meta=None):
        header = {
            "kind": "dist-pool",
            "format_version": 1,
            "keys": [list(k) for k in self.keys()],
            "counters": [self.entries[k].counter for k in self.keys()],
        }
        if meta:
            header["meta"] = meta
        arrays = {}
        for c, j in self.keys():
            p = self.entries[(c, j)].params
            arrays[f"omega_{c}_{j}"] = p.omega
            arrays[f"mu_{c}_{j}"] = p.mu
            arrays[f"sigma_{c}_{j}"] = p.sigma
        write_array_container(path, header, arrays)

    @classmethod
    def load(cls, path):
        header, arrays = read_array_container(path)
        if header.get("kind") != "dist-pool":
            raise ValidationError(f"{path}: not a distribution pool file")
        entries = {}
        for key, counter in zip(header["keys"], header["counters"]):
            c, j = int(key[0]), int(key[1])
            params = MixtureParams(
                arrays[f"omega_{c}_{j}"], arrays[f"mu_{c}_{j}"], arrays[f"sigma_{c}_{j}"]
            )
            entries[(c, j)] = PoolEntry(params=params, counter=int(counter))
        return cls(entries)


def pool_scene_keys(scenes):
    """(class, object index) for each scene, counting objects per class
    in scene order."""
    seen = {}
    keys = []
    for scene in scenes:
        c = scene.label
        seen[c] = seen.get(c, -1) + 1
        keys.append((c, seen[c]))
    return keys


def init_dist_pool(scenes, classifier, bounds, attack_config, render_config=None):
    """Run the viewpoint attack to convergence budget t0 on every object."""
    render_config = render_config if render_config is not None else RenderConfig()
    entries = {}
    for key, scene in zip(pool_scene_keys(scenes), scenes):
        c, j = key
        result = run_attack(
            classifier,
            scene,
            bounds,
            attack_config,
            render_config=render_config,
            rng=np.random.default_rng([attack_config.seed, 17, c, j]),
        )
        entries[key] = PoolEntry(params=result.params, counter=attack_config.iters)
    return DistPool(entries)


def stochastic_inner_update(
    pool,
    scenes,
    classifier,
    bounds,
    attack_config,
    epoch_seed,
    fraction,
    t_prime,
    render_config=None,
):
    """Advance a random per-class subset of pool entries by t_prime
    search iterations against the current classifier; everything else is
    returned untouched."""
    render_config = render_config if render_config is not None else RenderConfig()
    scene_by_key = dict(zip(pool_scene_keys(scenes), scenes))
    rng = np.random.default_rng([epoch_seed, 23])
    updates = {}
    for c in sorted({c for c, _ in pool.keys()}):
        objs = pool.class_objects(c)
        n_sel = int(np.ceil(fraction * len(objs)))
        selected = rng.choice(len(objs), size=n_sel, replace=False)
        for idx in sorted(selected):
            j = objs[idx]
            entry = pool.get(c, j)
            result = run_attack(
                classifier,
                scene_by_key[(c, j)],
                bounds,
                attack_config.with_overrides(iters=t_prime),
                render_config=render_config,
                init_params=entry.params,
                rng=np.random.default_rng([epoch_seed, 29, c, j]),
            )
            updates[(c, j)] = PoolEntry(
                params=result.params, counter=entry.counter + t_prime
            )
    return pool.replaced(updates)


def choose_shared_dist(pool, c, j, pi, rng):
    """The object's own distribution with probability pi, else one of its
    class siblings uniformly.  A single-object class always uses its own
    (logged once per call site via module logger)."""
    rng = np.random.default_rng(rng)
    if rng.uniform() <= pi:
        return pool.get(c, j).params
    others = [l for l in pool.class_objects(c) if l != j]
    if not others:
        logger.warning("class %d has a single object; sharing falls back to own", c)
        return pool.get(c, j).params
    return pool.get(c, int(rng.choice(others))).params


def assemble_minibatch(
    pool, scenes, clean_sampler, ratio, pi, rng, bounds, render_config
):
    """Mixed batch: ratio = (adversarial, clean) literal image counts.

    Clean images are natural views of uniformly chosen objects.  Each
    adversarial image renders a uniformly chosen object at a viewpoint
    drawn from its shared distribution.
    """
    n_adv, n_clean = ratio
    rng = np.random.default_rng(rng)
    keys = pool.keys()
    scene_by_key = dict(zip(pool_scene_keys(scenes), scenes))
    images, labels = [], []
    for _ in range(n_adv):
        c, j = keys[int(rng.integers(len(keys)))]
        params = choose_shared_dist(pool, c, j, pi, rng)
        draws = sample_mixture(params, bounds, 1, rng)
        images.append(render_views(scene_by_key[(c, j)], draws.v, render_config)[0])
        labels.append(c)
    for _ in range(n_clean):
        scene = scenes[int(rng.integers(len(scenes)))]
        vs = clean_sampler.sample(scene.label, 1, rng)
        images.append(render_views(scene, vs, render_config)[0])
        labels.append(scene.label)
    return np.stack(images), np.asarray(labels, dtype=int)


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    clean_acc: float
    adv_acc: float
    mean_pool_entropy: float


def _natural_accuracy(classifier, scenes, sampler, views_per_object, rng, render_config):
    correct = total = 0
    for scene in scenes:
        vs = sampler.sample(scene.label, views_per_object, rng)
        preds = classifier.predict(render_views(scene, vs, render_config))
        correct += int((preds == scene.label).sum())
        total += views_per_object
    return correct / total


def _pool_adv_accuracy(classifier, pool, scenes, bounds, views_per_object, rng, render_config):
    scene_by_key = dict(zip(pool_scene_keys(scenes), scenes))
    rng = np.random.default_rng(rng)
    correct = total = 0
    for key in pool.keys():
        draws = sample_mixture(pool.get(*key).params, bounds, views_per_object, rng)
        preds = classifier.predict(render_views(scene_by_key[key], draws.v, render_config))
        correct += int((preds == key[0]).sum())
        total += views_per_object
    return correct / total


def _clone_with_weights(classifier):
    fresh = clone(classifier)
    fresh.weights_ = classifier.clone_weights()
    fresh.classes_ = np.arange(classifier.n_classes)
    return fresh


def epoch_metrics(classifier, pool, scenes, sampler, bounds, config, render_config, epoch):
    clean = _natural_accuracy(
        classifier, scenes, sampler, config.eval_views,
        np.random.default_rng([config.seed, 31, epoch]), render_config,
    )
    adv = _pool_adv_accuracy(
        classifier, pool, scenes, bounds, config.eval_views,
        np.random.default_rng([config.seed, 37, epoch]), render_config,
    )
    entropy = pool.mean_entropy(
        bounds, config.entropy_probe, np.random.default_rng([config.seed, 41, epoch])
    )
    return EpochMetrics(
        epoch=epoch, clean_acc=clean, adv_acc=adv, mean_pool_entropy=entropy
    )


def save_checkpoint(path, classifier, pool, metrics, epoch, meta=None):
    header = {
        "kind": "viat-checkpoint",
        "format_version": 1,
        "epoch": epoch,
        "hidden": list(classifier.hidden),
        "n_classes": classifier.n_classes,
        "input_shape": list(classifier.input_shape),
        "pool_keys": [list(k) for k in pool.keys()],
        "pool_counters": [pool.entries[k].counter for k in pool.keys()],
        "metrics": [
            [m.epoch, m.clean_acc, m.adv_acc, m.mean_pool_entropy] for m in metrics
        ],
    }
    if meta:
        header["meta"] = meta
    arrays = {}
    for i, (w, b) in enumerate(classifier.weights_):
        arrays[f"clf_w{i}"] = w
        arrays[f"clf_b{i}"] = b
    for c, j in pool.keys():
        p = pool.get(c, j).params
        arrays[f"pool_omega_{c}_{j}"] = p.omega
        arrays[f"pool_mu_{c}_{j}"] = p.mu
        arrays[f"pool_sigma_{c}_{j}"] = p.sigma
    write_array_container(path, header, arrays)


def load_checkpoint(path, classifier_template):
    """Rebuild (classifier, pool, metrics, epoch) from a checkpoint.

    classifier_template supplies the hyperparameters (they are verified
    against the stored shape fields)."""
    header, arrays = read_array_container(path)
    if header.get("kind") != "viat-checkpoint":
        raise ValidationError(f"{path}: not a training checkpoint")
    if list(classifier_template.hidden) != header["hidden"] or list(
        classifier_template.input_shape
    ) != header["input_shape"]:
        raise ValidationError(f"{path}: checkpoint shape does not match classifier")
    clf = clone(classifier_template)
    clf.weights_ = [
        (arrays[f"clf_w{i}"], arrays[f"clf_b{i}"])
        for i in range(len(header["hidden"]) + 1)
    ]
    clf.classes_ = np.arange(header["n_classes"])
    entries = {}
    for key, counter in zip(header["pool_keys"], header["pool_counters"]):
        c, j = int(key[0]), int(key[1])
        params = MixtureParams(
            arrays[f"pool_omega_{c}_{j}"],
            arrays[f"pool_mu_{c}_{j}"],
            arrays[f"pool_sigma_{c}_{j}"],
        )
        entries[(c, j)] = PoolEntry(params=params, counter=int(counter))
    metrics = [
        EpochMetrics(int(r[0]), float(r[1]), float(r[2]), float(r[3]))
        for r in header["metrics"]
    ]
    return clf, DistPool(entries), metrics, int(header["epoch"])


def viat_train(
    scenes,
    classifier,
    bounds,
    train_config,
    attack_config,
    render_config=None,
    clean_sampler=None,
    checkpoint_dir=None,
    resume_from=None,
):
    """Full training loop; returns (classifier, pool, metrics).

    The input classifier is not mutated.  Every epoch reseeds its
    generators from (seed, epoch), so a run resumed from an epoch
    checkpoint continues exactly as the uninterrupted run would.
    """
    from .scenes import NaturalViewpointSampler

    render_config = render_config if render_config is not None else RenderConfig()
    sampler = (
        clean_sampler if clean_sampler is not None else NaturalViewpointSampler(bounds)
    )
    cfg = train_config
    if resume_from is not None:
        clf, pool, metrics, start_epoch = load_checkpoint(resume_from, classifier)
    else:
        clf = _clone_with_weights(classifier)
        pool = init_dist_pool(
            scenes, clf, bounds, attack_config.with_overrides(iters=cfg.t0),
            render_config,
        )
        metrics = [
            epoch_metrics(clf, pool, scenes, sampler, bounds, cfg, render_config, 0)
        ]
        start_epoch = 0
        if checkpoint_dir is not None:
            save_checkpoint(
                f"{checkpoint_dir}/epoch_0000.ckpt", clf, pool, metrics, 0
            )
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        pool = stochastic_inner_update(
            pool,
            scenes,
            clf,
            bounds,
            attack_config,
            epoch_seed=int(np.random.default_rng([cfg.seed, 43, epoch]).integers(2**31)),
            fraction=cfg.update_fraction,
            t_prime=cfg.t_prime,
            render_config=render_config,
        )
        for step in range(cfg.steps_per_epoch):
            images, labels = assemble_minibatch(
                pool,
                scenes,
                sampler,
                (cfg.adv_per_batch, cfg.clean_per_batch),
                cfg.pi,
                np.random.default_rng([cfg.seed, 47, epoch, step]),
                bounds,
                render_config,
            )
            clf.partial_fit(images, labels, eta=cfg.eta_w)
        metrics.append(
            epoch_metrics(clf, pool, scenes, sampler, bounds, cfg, render_config, epoch)
        )
        if checkpoint_dir is not None:
            save_checkpoint(
                f"{checkpoint_dir}/epoch_{epoch:04d}.ckpt", clf, pool, metrics, epoch
            )
    return clf, pool, metrics


class ViatTrainer(BaseEstimator):
    """Estimator wrapper: fit(scenes, classifier) runs the full loop."""

    def __init__(
        self,
        epochs=10,
        t0=40,
        t_prime=4,
        update_fraction=0.5,
        pi=0.5,
        adv_per_batch=1,
        clean_per_batch=32,
        steps_per_epoch=60,
        eta_w=0.002,
        seed=0,
        attack_config=None,
        render_config=None,
        bounds=None,
    ):
        self.epochs = epochs
        self.t0 = t0
        self.t_prime = t_prime
        self.update_fraction = update_fraction
        self.pi = pi
        self.adv_per_batch = adv_per_batch
        self.clean_per_batch = clean_per_batch
        self.steps_per_epoch = steps_per_epoch
        self.eta_w = eta_w
        self.seed = seed
        self.attack_config = attack_config
        self.render_config = render_config
        self.bounds = bounds

    def fit(self, scenes, classifier):
        from .attack import AttackConfig

        bounds = self.bounds if self.bounds is not None else ViewBounds.default()
        train_config = TrainConfig(
            epochs=self.epochs,
            t0=self.t0,
            t_prime=self.t_prime,
            update_fraction=self.update_fraction,
            pi=self.pi,
            adv_per_batch=self.adv_per_batch,
            clean_per_batch=self.clean_per_batch,
            steps_per_epoch=self.steps_per_epoch,
            eta_w=self.eta_w,
            seed=self.seed,
        )
        attack_config = (
            self.attack_config if self.attack_config is not None else AttackConfig()
        )
        self.classifier_, self.pool_, self.metrics_ = viat_train(
            scenes,
            classifier,
            bounds,
            train_config,
            attack_config,
            render_config=self.render_config,
        )
        return self
