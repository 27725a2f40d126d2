"""Certified viewpoint robustness by randomized smoothing.

The smoothed classifier votes over renders at Gaussian-perturbed
viewpoints.  Noise lives in the normalized viewpoint space where every
axis spans [-1, 1]; a noise vector maps to physical units through the
per-axis half-widths, so one radius translates directly into per-axis
viewpoint slack.  Certification is the standard two-phase Monte Carlo
procedure: a small batch selects the candidate class, a fresh batch
gives a binomial count for the exact one-sided lower confidence bound,
and the certified l2 radius in normalized units is

    radius = sigma_tilde * ndtri(pA_lower)

which is the binary case (pB = 1 - pA) of the parametric-domain bound
(sigma/2) * (ndtri(pA) - ndtri(pB)).  The uniform-noise l1 bound
beta * (pA - pB) is exposed as a formula utility only.
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import ndtri
from scipy.stats import beta as beta_dist

from .geometry import ViewBounds, Viewpoint, viewpoint_array
from .rendering import RenderConfig, render_views
from .validation import ValidationError, check_positive_int

ABSTAIN = -1


@dataclass(frozen=True)
class SmoothingConfig:
    sigma_tilde: float = 0.1
    n: int = 1000
    n0: int = 100
    alpha: float = 1e-3
    v0: Viewpoint = Viewpoint(0.0, 0.0, 65.0, 0.0, 0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        if self.sigma_tilde <= 0:
            raise ValidationError(
                f"sigma_tilde: must be > 0, got {self.sigma_tilde}"
            )
        check_positive_int(self.n, "n")
        check_positive_int(self.n0, "n0")
        if self.n < self.n0:
            raise ValidationError(f"n: need n >= n0, got n={self.n} n0={self.n0}")
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError(f"alpha: must be in (0, 1), got {self.alpha}")

    def with_overrides(self, **kw):
        return replace(self, **kw)


def noisy_viewpoints(v0, bounds, sigma_tilde, n, rng):
    """n Gaussian-perturbed viewpoints around v0.

    Noise is drawn per axis in normalized units and applied only to
    active axes; coordinates falling outside the box are clipped to it.
    Returns (viewpoints (n, 6), clip_fraction), where clip_fraction is
    the fraction of samples with at least one clipped coordinate.
    """
    rng = np.random.default_rng(rng)
    center = bounds.center
    half = np.where(bounds.active, bounds.half_width, 1.0)
    v0n = (viewpoint_array(v0) - center) / half
    eps = rng.standard_normal((n, 6)) * sigma_tilde
    noisy = v0n[None, :] + np.where(bounds.active, eps, 0.0)
    clipped = np.clip(noisy, -1.0, 1.0)
    clip_fraction = float(np.any((noisy != clipped) & bounds.active, axis=1).mean())
    return center + half * clipped, clip_fraction


def prediction_histogram(predict_fn, v0, bounds, sigma_tilde, n, n_classes, rng):
    """Class counts of predict_fn over n noisy viewpoints."""
    views, clip_fraction = noisy_viewpoints(v0, bounds, sigma_tilde, n, rng)
    preds = np.asarray(predict_fn(views), dtype=int)
    if preds.shape != (n,):
        raise ValidationError(f"predict_fn: expected {n} labels, got {preds.shape}")
    return np.bincount(preds, minlength=n_classes), clip_fraction


def scene_predict_fn(classifier, scene, render_config):
    """Viewpoint-batch classification through the renderer."""

    def predict(views):
        return classifier.predict(render_views(scene, views, render_config))

    return predict


def smoothed_predict(
    classifier, scene, v0, sigma_tilde, n, rng_seed, bounds=None, render_config=None
):
    """Histogram of the classifier's votes over noisy renders of scene."""
    bounds = bounds if bounds is not None else ViewBounds.default()
    render_config = render_config if render_config is not None else RenderConfig()
    hist, _ = prediction_histogram(
        scene_predict_fn(classifier, scene, render_config),
        v0,
        bounds,
        sigma_tilde,
        n,
        classifier.n_classes,
        np.random.default_rng(rng_seed),
    )
    return hist


def clopper_pearson_lower(k, n, alpha):
    """Exact one-sided lower confidence bound for a binomial proportion.

    Largest p with P[Bin(n, p) >= k] <= alpha ... stated equivalently:
    the alpha quantile of Beta(k, n - k + 1), which is 0 at k = 0 and
    alpha**(1/n) at k = n.
    """
    k = int(k)
    n = int(n)
    if not 0 <= k <= n:
        raise ValidationError(f"k: need 0 <= k <= n, got k={k} n={n}")
    if not 0.0 < alpha < 1.0:
        raise ValidationError(f"alpha: must be in (0, 1), got {alpha}")
    if k == 0:
        return 0.0
    return float(beta_dist.ppf(alpha, k, n - k + 1))


def certified_radius_gaussian(pa_lower, sigma_tilde):
    """Binary-bound Gaussian radius; 0 when the vote is not a majority."""
    if pa_lower <= 0.5:
        return 0.0
    return float(sigma_tilde * ndtri(pa_lower))


def certified_radius_uniform(pa, pb, beta):
    """Uniform-noise l1 bound beta * (pA - pB); not wired into the
    pipeline, provided for completeness."""
    return float(beta * max(pa - pb, 0.0))


@dataclass(frozen=True)
class CertificationRecord:
    predicted_class: int  # ABSTAIN when the lower bound is not a majority
    pa_lower: float
    radius: float
    correct: bool
    clip_fraction: float
    votes: int  # candidate-class count among the n estimation samples

    @property
    def abstained(self):
        return self.predicted_class == ABSTAIN


def certify_predict_fn(predict_fn, label, config, bounds, n_classes):
    """Two-phase certification against an arbitrary viewpoint classifier.

    Phase one picks the candidate class from n0 samples; phase two
    re-estimates its vote probability on n fresh samples and lower
    bounds it at confidence 1 - alpha.  Abstains (radius 0) unless the
    bound exceeds 1/2.
    """
    seed = config.seed if isinstance(config.seed, (list, tuple)) else [config.seed]
    rng = np.random.default_rng([*seed, 59])
    hist0, _ = prediction_histogram(
        predict_fn, config.v0, bounds, config.sigma_tilde, config.n0, n_classes, rng
    )
    candidate = int(np.argmax(hist0))
    hist, clip_fraction = prediction_histogram(
        predict_fn, config.v0, bounds, config.sigma_tilde, config.n, n_classes, rng
    )
    k = int(hist[candidate])
    pa_lower = clopper_pearson_lower(k, config.n, config.alpha)
    if pa_lower > 0.5:
        predicted = candidate
        radius = certified_radius_gaussian(pa_lower, config.sigma_tilde)
    else:
        predicted = ABSTAIN
        radius = 0.0
    return CertificationRecord(
        predicted_class=predicted,
        pa_lower=pa_lower,
        radius=radius,
        correct=bool(predicted == int(label) and predicted != ABSTAIN),
        clip_fraction=clip_fraction,
        votes=k,
    )


def certify(classifier, scene, label, config, bounds=None, render_config=None):
    """Certify one object at the configured base viewpoint."""
    bounds = bounds if bounds is not None else ViewBounds.default()
    render_config = render_config if render_config is not None else RenderConfig()
    return certify_predict_fn(
        scene_predict_fn(classifier, scene, render_config),
        label,
        config,
        bounds,
        classifier.n_classes,
    )


def aggregate_acr_ca(records):
    """(average certified radius, certified accuracy).

    Every record contributes to both means; abstentions and wrong
    predictions contribute radius 0 and count as not certified.
    """
    if not records:
        raise ValidationError("records: need at least one certification record")
    radii = [r.radius if r.correct else 0.0 for r in records]
    correct = [r.correct for r in records]
    return float(np.mean(radii)), float(np.mean(correct))


class Smoother:
    """Cohen-style wrapper binding a classifier, scene set and config."""

    def __init__(self, classifier, config=None, bounds=None, render_config=None):
        self.classifier = classifier
        self.config = config if config is not None else SmoothingConfig()
        self.bounds = bounds if bounds is not None else ViewBounds.default()
        self.render_config = (
            render_config if render_config is not None else RenderConfig()
        )

    def predict_histogram(self, scene, v0=None, n=None, seed=None):
        cfg = self.config
        return smoothed_predict(
            self.classifier,
            scene,
            cfg.v0 if v0 is None else v0,
            cfg.sigma_tilde,
            cfg.n if n is None else n,
            cfg.seed if seed is None else seed,
            bounds=self.bounds,
            render_config=self.render_config,
        )

    def certify_scene(self, scene, label=None, seed=None):
        cfg = self.config if seed is None else self.config.with_overrides(seed=seed)
        return certify(
            self.classifier,
            scene,
            scene.label if label is None else int(label),
            cfg,
            bounds=self.bounds,
            render_config=self.render_config,
        )

    def certify_suite(self, scenes, seed_stride=True):
        records = []
        for i, scene in enumerate(scenes):
            seed = [self.config.seed, 61, i] if seed_stride else self.config.seed
            records.append(self.certify_scene(scene, seed=seed))
        return records
