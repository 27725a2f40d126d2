"""Certification machinery against binomial and Gaussian-quantile oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import binom

from viewrobust.classifier import TinyImageClassifier
from viewrobust.geometry import ViewBounds, Viewpoint
from viewrobust.rendering import RenderConfig, render_views
from viewrobust.scenes import NaturalViewpointSampler, toy_suite
from viewrobust.smoothing import (
    ABSTAIN,
    CertificationRecord,
    Smoother,
    SmoothingConfig,
    aggregate_acr_ca,
    certified_radius_gaussian,
    certified_radius_uniform,
    certify_predict_fn,
    clopper_pearson_lower,
    noisy_viewpoints,
    prediction_histogram,
)
from viewrobust.validation import ValidationError


def phi(x):
    # forward normal CDF from the stdlib, independent of the scipy
    # inverse used inside the module
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


# -- config -------------------------------------------------------------------


@pytest.mark.parametrize(
    "kw",
    [
        {"sigma_tilde": 0.0},
        {"n": 0},
        {"n0": 0},
        {"n": 10, "n0": 20},
        {"alpha": 0.0},
        {"alpha": 1.0},
    ],
)
def test_config_rejects_bad_values(kw):
    with pytest.raises(ValidationError):
        SmoothingConfig(**kw)


# -- binomial lower bound -----------------------------------------------------


def cp_lower_by_bisection(k, n, alpha):
    """Largest p with P[Bin(n, p) >= k] <= alpha, solved directly."""
    if k == 0:
        return 0.0
    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if binom.sf(k - 1, n, mid) <= alpha:
            lo = mid
        else:
            hi = mid
    return lo


@pytest.mark.parametrize("n", [1, 5, 12, 30])
@pytest.mark.parametrize("alpha", [0.05, 1e-3])
def test_clopper_pearson_matches_tail_inversion(n, alpha):
    for k in range(n + 1):
        want = cp_lower_by_bisection(k, n, alpha)
        got = clopper_pearson_lower(k, n, alpha)
        assert got == pytest.approx(want, abs=1e-9), (k, n, alpha)


def test_clopper_pearson_anchors():
    assert clopper_pearson_lower(0, 50, 0.01) == 0.0
    # k = n closed form: alpha**(1/n)
    assert clopper_pearson_lower(1000, 1000, 1e-3) == pytest.approx(
        1e-3 ** (1.0 / 1000.0), abs=1e-12
    )
    assert clopper_pearson_lower(1, 1, 0.05) == pytest.approx(0.05, abs=1e-12)


@given(
    n=st.integers(1, 400),
    k=st.integers(0, 400),
    alpha=st.floats(1e-6, 0.2),
)
@settings(max_examples=60)
def test_clopper_pearson_monotone(n, k, alpha):
    k = min(k, n)
    lower = clopper_pearson_lower(k, n, alpha)
    assert 0.0 <= lower <= 1.0
    if k < n:
        assert lower <= clopper_pearson_lower(k + 1, n, alpha) + 1e-12
    # larger alpha means a less conservative bound
    assert lower <= clopper_pearson_lower(k, n, min(0.5, alpha * 2)) + 1e-12


def test_clopper_pearson_rejects_bad_inputs():
    with pytest.raises(ValidationError):
        clopper_pearson_lower(5, 4, 0.05)
    with pytest.raises(ValidationError):
        clopper_pearson_lower(-1, 4, 0.05)
    with pytest.raises(ValidationError):
        clopper_pearson_lower(2, 4, 0.0)


# -- certified radius ---------------------------------------------------------


def test_radius_quantile_round_trip():
    # the scipy inverse must invert the stdlib forward CDF
    for pa in (0.5001, 0.6, 0.75, 0.9, 0.975, 0.999, 0.999999):
        r = certified_radius_gaussian(pa, 1.0)
        assert phi(r) == pytest.approx(pa, abs=1e-12)


def test_radius_known_quantiles():
    # standard normal quantile table values
    assert certified_radius_gaussian(0.75, 1.0) == pytest.approx(
        0.6744897501960817, abs=1e-12
    )
    assert certified_radius_gaussian(0.9, 1.0) == pytest.approx(
        1.2815515655446004, abs=1e-12
    )
    assert certified_radius_gaussian(0.975, 0.1) == pytest.approx(
        0.19599639845400546, abs=1e-12
    )


def test_radius_scales_with_sigma_and_abstains_at_half():
    assert certified_radius_gaussian(0.9, 0.25) == pytest.approx(
        0.25 * certified_radius_gaussian(0.9, 1.0)
    )
    assert certified_radius_gaussian(0.5, 1.0) == 0.0
    assert certified_radius_gaussian(0.2, 1.0) == 0.0


def test_uniform_radius_formula():
    assert certified_radius_uniform(0.8, 0.1, 2.0) == pytest.approx(1.4)
    assert certified_radius_uniform(0.3, 0.6, 2.0) == 0.0


# -- noisy viewpoints ---------------------------------------------------------


def test_noisy_viewpoints_stay_in_box_and_clip_counted(bounds):
    corner = Viewpoint(*(bounds.v_max))
    views, clip_fraction = noisy_viewpoints(
        corner, bounds, 0.2, 4000, np.random.default_rng(0)
    )
    assert np.all(views >= bounds.v_min - 1e-12)
    assert np.all(views <= bounds.v_max + 1e-12)
    # at an active-axis corner roughly half the draws clip per axis
    assert clip_fraction > 0.9


def test_noisy_viewpoints_tiny_sigma_concentrates(bounds):
    v0 = Viewpoint(10.0, 5.0, 80.0, 0.1, -0.2, 0.3)
    views, clip_fraction = noisy_viewpoints(
        v0, bounds, 1e-12, 500, np.random.default_rng(1)
    )
    assert np.allclose(views, np.tile(v0.to_array(), (500, 1)), atol=1e-6)
    assert clip_fraction == 0.0


def test_noise_is_scaled_per_axis(bounds):
    # one normalized unit spans half_width raw units, so the raw noise
    # spread per axis must be proportional to the axis half width
    v0 = Viewpoint(*bounds.center)
    views, _ = noisy_viewpoints(v0, bounds, 0.05, 20000, np.random.default_rng(2))
    spread = views.std(axis=0)
    active = bounds.active
    ratio = spread[active] / bounds.half_width[active]
    assert np.allclose(ratio, 0.05, rtol=0.05)
    assert np.all(spread[~active] == 0.0)


def test_prediction_histogram_constant_classifier(bounds):
    hist, _ = prediction_histogram(
        lambda views: np.full(views.shape[0], 2, dtype=int),
        Viewpoint(0, 0, 90, 0, 0, 0),
        bounds, 0.1, 64, 4, np.random.default_rng(0),
    )
    assert hist.tolist() == [0, 0, 64, 0]


def test_prediction_histogram_validates_shape(bounds):
    with pytest.raises(ValidationError):
        prediction_histogram(
            lambda views: np.zeros(3, dtype=int),
            Viewpoint(0, 0, 90, 0, 0, 0),
            bounds, 0.1, 8, 4, np.random.default_rng(0),
        )


# -- two-phase certification ---------------------------------------------------


def halfspace_predict_fn(bounds, d):
    """Class 1 iff the normalized first axis is below d."""

    def predict(views):
        vn = (views[:, 0] - bounds.center[0]) / bounds.half_width[0]
        return np.where(vn <= d, 1, 0).astype(int)

    return predict


def test_halfspace_vote_frequency_matches_gaussian_mass(bounds):
    # the smoothed vote for class 1 estimates Phi(d / sigma) when v0
    # sits at the boundary center
    d, sigma = 0.08, 0.1
    n = 20000
    hist, _ = prediction_histogram(
        halfspace_predict_fn(bounds, d),
        Viewpoint(*bounds.center), bounds, sigma, n, 2,
        np.random.default_rng(3),
    )
    want = phi(d / sigma)
    se = math.sqrt(want * (1.0 - want) / n)
    assert abs(hist[1] / n - want) <= 4.0 * se


def test_certify_halfspace_radius_tracks_margin(bounds):
    d, sigma = 0.07, 0.02
    cfg = SmoothingConfig(
        sigma_tilde=sigma, n=20000, n0=200, alpha=1e-3,
        v0=Viewpoint(*bounds.center), seed=11,
    )
    rec = certify_predict_fn(halfspace_predict_fn(bounds, d), 1, cfg, bounds, 2)
    assert rec.predicted_class == 1
    assert rec.correct and not rec.abstained
    # the certified radius can approach but never exceed the true margin
    assert rec.radius <= d + 1e-9
    assert rec.radius >= 0.6 * d


def test_certify_unstable_vote_abstains(bounds):
    # 50/50 votes cannot clear the majority bound
    def coin(views):
        vn = (views[:, 0] - bounds.center[0]) / bounds.half_width[0]
        return np.where(vn <= 0.0, 1, 0).astype(int)

    cfg = SmoothingConfig(
        sigma_tilde=0.1, n=2000, n0=100, alpha=1e-3,
        v0=Viewpoint(*bounds.center), seed=4,
    )
    rec = certify_predict_fn(coin, 1, cfg, bounds, 2)
    assert rec.predicted_class == ABSTAIN
    assert rec.abstained
    assert rec.radius == 0.0
    assert not rec.correct


def test_certify_wrong_label_not_correct(bounds):
    cfg = SmoothingConfig(
        sigma_tilde=0.05, n=400, n0=50, alpha=1e-3,
        v0=Viewpoint(*bounds.center), seed=5,
    )
    rec = certify_predict_fn(
        lambda views: np.zeros(views.shape[0], dtype=int), 1, cfg, bounds, 2
    )
    assert rec.predicted_class == 0
    assert not rec.correct
    assert rec.radius > 0.0


# -- aggregation ----------------------------------------------------------------


def make_record(radius, correct, predicted=0):
    return CertificationRecord(
        predicted_class=predicted if correct or radius else ABSTAIN,
        pa_lower=0.9 if correct else 0.0,
        radius=radius,
        correct=correct,
        clip_fraction=0.0,
        votes=0,
    )


def test_aggregate_examples():
    acr, ca = aggregate_acr_ca([make_record(0.0, False), make_record(0.0, False)])
    assert (acr, ca) == (0.0, 0.0)
    acr, ca = aggregate_acr_ca([make_record(0.2, True), make_record(0.0, False)])
    assert acr == pytest.approx(0.1)
    assert ca == pytest.approx(0.5)


def test_aggregate_ignores_radius_of_wrong_predictions():
    # a confidently wrong prediction carries a radius but never counts
    wrong = CertificationRecord(
        predicted_class=2, pa_lower=0.95, radius=0.3, correct=False,
        clip_fraction=0.0, votes=380,
    )
    acr, ca = aggregate_acr_ca([wrong, make_record(0.4, True)])
    assert acr == pytest.approx(0.2)
    assert ca == pytest.approx(0.5)


def test_aggregate_empty_rejected():
    with pytest.raises(ValidationError):
        aggregate_acr_ca([])


# -- smoother facade -------------------------------------------------------------


RENDER8 = RenderConfig(width=8, height=8, m_samples=8)


@pytest.fixture(scope="module")
def clf8m(bounds):
    suite = toy_suite()
    scenes = [suite[0], suite[4], suite[8], suite[12]]
    clf = TinyImageClassifier(
        hidden=(12,), n_classes=4, input_shape=(8, 8, 3), seed=3, eta=0.05
    )
    sampler = NaturalViewpointSampler(bounds)
    rng = np.random.default_rng(0)
    imgs, labels = [], []
    for _ in range(30):
        for sc in scenes:
            imgs.append(render_views(sc, sampler.sample(sc.label, 1, rng), RENDER8)[0])
            labels.append(sc.label)
    clf.fit(np.stack(imgs), labels)
    return clf, scenes


def test_smoother_certifies_suite_deterministically(clf8m, bounds):
    clf, scenes = clf8m
    cfg = SmoothingConfig(sigma_tilde=0.05, n=120, n0=30, alpha=0.01, seed=0)
    sm = Smoother(clf, cfg, bounds=bounds, render_config=RENDER8)
    recs1 = sm.certify_suite(scenes)
    recs2 = sm.certify_suite(scenes)
    assert recs1 == recs2
    assert len(recs1) == 4
    acr, ca = aggregate_acr_ca(recs1)
    assert 0.0 <= ca <= 1.0
    assert acr >= 0.0
    for rec in recs1:
        assert rec.votes <= cfg.n
        assert 0.0 <= rec.pa_lower <= 1.0


def test_smoother_histogram_counts_sum_to_n(clf8m, bounds):
    clf, scenes = clf8m
    cfg = SmoothingConfig(sigma_tilde=0.05, n=60, n0=20, alpha=0.01, seed=1)
    sm = Smoother(clf, cfg, bounds=bounds, render_config=RENDER8)
    hist = sm.predict_histogram(scenes[0])
    assert hist.sum() == 60
    assert hist.shape == (4,)
