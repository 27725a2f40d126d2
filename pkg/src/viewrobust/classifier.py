"""A small dense softmax classifier over rendered images, pure numpy.

The network is deliberately tiny and smooth (tanh hidden layers) so its
cross-entropy surface over viewpoints is well behaved for search-based
attacks, and exact analytic gradients keep training deterministic.
"""

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .rendering import render_views
from .serialization import read_array_container, write_array_container
from .validation import ValidationError, as_float_array, check_positive_int


def cross_entropy_from_logits(logits, labels, reduction="sum"):
    """Cross-entropy of integer labels under softmax(logits).

    logits: (n, C); labels: (n,) ints.  reduction 'sum', 'mean' or 'none'.
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    labels = np.asarray(labels, dtype=int)
    lse = logsumexp(logits, axis=1)
    losses = lse - logits[np.arange(logits.shape[0]), labels]
    if reduction == "none":
        return losses
    if reduction == "mean":
        return float(losses.mean())
    if reduction == "sum":
        return float(losses.sum())
    raise ValidationError(f"reduction: unknown mode {reduction!r}")


def _forward(weights, x):
    """Logits plus per-layer activations (needed for backprop)."""
    acts = [x]
    h = x
    for i, (w, b) in enumerate(weights):
        z = h @ w + b
        h = z if i == len(weights) - 1 else np.tanh(z)
        acts.append(h)
    return h, acts


def loss_and_grads(weights, x, y, reduction="sum"):
    """Cross-entropy and its exact gradient in every weight/bias.

    The backward pass mirrors the tanh/softmax forward exactly; the
    returned gradients are of the summed (or mean) batch loss.
    """
    n = x.shape[0]
    logits, acts = _forward(weights, x)
    lse = logsumexp(logits, axis=1)
    loss = float((lse - logits[np.arange(n), y]).sum())
    probs = np.exp(logits - lse[:, None])
    delta = probs
    delta[np.arange(n), y] -= 1.0
    if reduction == "mean":
        loss /= n
        delta = delta / n
    elif reduction != "sum":
        raise ValidationError(f"reduction: unknown mode {reduction!r}")
    grads = []
    for i in reversed(range(len(weights))):
        w, _ = weights[i]
        gw = acts[i].T @ delta
        gb = delta.sum(axis=0)
        grads.append((gw, gb))
        if i > 0:
            delta = (delta @ w.T) * (1.0 - acts[i] ** 2)
    grads.reverse()
    return loss, grads


class TinyImageClassifier(BaseEstimator, ClassifierMixin):
    """Dense tanh MLP over flattened renders with an SGD `partial_fit`.

    Follows the usual estimator conventions: constructor stores
    hyperparameters untouched, `fit`/`partial_fit` learn state on
    trailing-underscore attributes, `predict`/`predict_proba` score.
    """

    def __init__(
        self,
        hidden=(128, 64),
        n_classes=4,
        input_shape=(32, 32, 3),
        eta=0.05,
        epochs=30,
        batch_size=32,
        seed=0,
    ):
        self.hidden = hidden
        self.n_classes = n_classes
        self.input_shape = input_shape
        self.eta = eta
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed

    # -- plumbing ----------------------------------------------------------

    @property
    def n_features_(self):
        return int(np.prod(self.input_shape))

    def _features(self, x):
        """Flatten images (or accept pre-flattened rows); map to [-1, 1]."""
        arr = np.asarray(x, dtype=float)
        if arr.ndim >= 3 and arr.shape[-3:] == tuple(self.input_shape):
            arr = arr.reshape(-1, self.n_features_)
        elif arr.ndim == 1 and arr.shape[0] == self.n_features_:
            arr = arr[None, :]
        elif arr.ndim != 2 or arr.shape[1] != self.n_features_:
            raise ValidationError(
                f"images: expected {self.input_shape} images or "
                f"(n, {self.n_features_}) rows, got shape {arr.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise ValidationError("images: contain non-finite values")
        return 2.0 * arr - 1.0

    def _init_weights(self):
        rng = np.random.default_rng(self.seed)
        sizes = [self.n_features_, *self.hidden, self.n_classes]
        self.weights_ = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
            self.weights_.append((w, np.zeros(fan_out)))
        self.classes_ = np.arange(self.n_classes)
        return self

    def _check_fitted(self):
        if not hasattr(self, "weights_"):
            raise NotFittedError("classifier has no weights yet; call fit or partial_fit")

    # -- learning ----------------------------------------------------------

    def fit(self, images, y):
        x = self._features(images)
        y = np.asarray(y, dtype=int)
        if np.any(y < 0) or np.any(y >= self.n_classes):
            raise ValidationError(f"labels: must lie in [0, {self.n_classes})")
        check_positive_int(self.epochs, "epochs")
        self._init_weights()
        rng = np.random.default_rng([self.seed, 1])
        n = x.shape[0]
        for _ in range(self.epochs):
            order = rng.permutation(n)
            for start in range(0, n, self.batch_size):
                idx = order[start : start + self.batch_size]
                _, grads = loss_and_grads(self.weights_, x[idx], y[idx], reduction="mean")
                self._apply(grads, self.eta)
        return self

    def partial_fit(self, images, y, eta=None, reduction="sum"):
        """One SGD step on the batch loss (summed by default)."""
        x = self._features(images)
        y = np.asarray(y, dtype=int)
        if not hasattr(self, "weights_"):
            self._init_weights()
        loss, grads = loss_and_grads(self.weights_, x, y, reduction=reduction)
        self._apply(grads, self.eta if eta is None else float(eta))
        self.last_loss_ = loss
        return self

    def _apply(self, grads, eta):
        self.weights_ = [
            (w - eta * gw, b - eta * gb) for (w, b), (gw, gb) in zip(self.weights_, grads)
        ]

    # -- scoring -----------------------------------------------------------

    def decision_function(self, images):
        self._check_fitted()
        logits, _ = _forward(self.weights_, self._features(images))
        return logits

    def predict_log_proba(self, images):
        logits = self.decision_function(images)
        return logits - logsumexp(logits, axis=1, keepdims=True)

    def predict_proba(self, images):
        return np.exp(self.predict_log_proba(images))

    def predict(self, images):
        return np.argmax(self.decision_function(images), axis=1)

    # -- persistence -------------------------------------------------------

    def save(self, path, meta=None):
        self._check_fitted()
        header = {
            "kind": "tiny-image-classifier",
            "format_version": 1,
            "hidden": list(self.hidden),
            "n_classes": self.n_classes,
            "input_shape": list(self.input_shape),
            "eta": self.eta,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
        }
        if meta:
            header["meta"] = meta
        arrays = {}
        for i, (w, b) in enumerate(self.weights_):
            arrays[f"w{i}"] = w
            arrays[f"b{i}"] = b
        write_array_container(path, header, arrays)

    @classmethod
    def load(cls, path):
        header, arrays = read_array_container(path)
        if header.get("kind") != "tiny-image-classifier":
            raise ValidationError(f"{path}: not a classifier checkpoint")
        clf = cls(
            hidden=tuple(header["hidden"]),
            n_classes=header["n_classes"],
            input_shape=tuple(header["input_shape"]),
            eta=header["eta"],
            epochs=header["epochs"],
            batch_size=header["batch_size"],
            seed=header["seed"],
        )
        clf.weights_ = [
            (arrays[f"w{i}"], arrays[f"b{i}"]) for i in range(len(header["hidden"]) + 1)
        ]
        clf.classes_ = np.arange(clf.n_classes)
        return clf

    def clone_weights(self):
        self._check_fitted()
        return [(w.copy(), b.copy()) for w, b in self.weights_]


def load_classifier(path):
    """Load a classifier from its own checkpoint or from a training
    checkpoint that embeds one; training state is dropped."""
    header, arrays = read_array_container(path)
    kind = header.get("kind")
    if kind == "tiny-image-classifier":
        return TinyImageClassifier.load(path)
    if kind == "viat-checkpoint":
        clf = TinyImageClassifier(
            hidden=tuple(header["hidden"]),
            n_classes=header["n_classes"],
            input_shape=tuple(header["input_shape"]),
        )
        clf.weights_ = [
            (arrays[f"clf_w{i}"], arrays[f"clf_b{i}"])
            for i in range(len(header["hidden"]) + 1)
        ]
        clf.classes_ = np.arange(clf.n_classes)
        return clf
    raise ValidationError(f"{path}: not a classifier checkpoint")


def render_features(scenes, viewpoints_per_scene, config):
    """Render per-scene viewpoint batches into one (images, labels) pair."""
    xs, ys = [], []
    for scene, vs in zip(scenes, viewpoints_per_scene):
        imgs = render_views(scene, vs, config)
        xs.append(imgs)
        ys.append(np.full(imgs.shape[0], scene.label))
    return np.concatenate(xs), np.concatenate(ys)


def pretrain_clean(
    scenes,
    sampler,
    render_config,
    views_per_object=40,
    holdout_per_object=10,
    epochs=30,
    eta=0.05,
    seed=0,
    hidden=(128, 64),
):
    """Train a classifier on natural views only; report held-out accuracy.

    Returns (classifier, holdout_accuracy).  The held-out set reuses the
    same natural-view sampler with an independent seed.
    """
    n_classes = max(s.label for s in scenes) + 1
    rng_train = np.random.default_rng([seed, 101])
    rng_hold = np.random.default_rng([seed, 202])
    train_vs = [sampler.sample(s.label, views_per_object, rng_train) for s in scenes]
    hold_vs = [sampler.sample(s.label, holdout_per_object, rng_hold) for s in scenes]
    x_train, y_train = render_features(scenes, train_vs, render_config)
    x_hold, y_hold = render_features(scenes, hold_vs, render_config)
    clf = TinyImageClassifier(
        hidden=hidden,
        n_classes=n_classes,
        input_shape=(render_config.height, render_config.width, 3),
        eta=eta,
        epochs=epochs,
        seed=seed,
    )
    clf.fit(x_train, y_train)
    accuracy = float((clf.predict(x_hold) == y_hold).mean())
    return clf, accuracy
