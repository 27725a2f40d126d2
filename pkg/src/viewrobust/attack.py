"""Distributional adversarial viewpoint search.

The attack maximizes

    J(psi) = E_{v ~ p_psi}[ L(v) ] + lambda * H(p_psi)

over the parameters psi = (omega, mu, sigma) of a squashed Gaussian
mixture, using only loss evaluations (no gradients of L).  L is the
classifier's cross-entropy at rendered viewpoints, or any callable
viewpoint-loss surface.  The entropy term keeps the distribution from
collapsing to a point and is what makes the result a *region* of bad
viewpoints rather than a single one.

Gradient estimator, per draw with selected component k and innovation r
(u = mu_k + sigma_k * r):

    d_mu_k     gamma_k [ (L - b) r / sigma_k + lambda (-2 tanh u - s(u)) ]
    d_sigma_k  gamma_k [ (L - b)(r^2 - 1) / sigma_k
                         + lambda (-2 tanh u - s(u)) r ]
    d_omega_k  gamma_k [ L / omega_k - lambda ]

where s(u) is the latent mixture score (d/du log p_u, responsibility
weighted) and b an optional baseline.  The loss terms are the plain
score-function (NES) estimators of dE[L]; the entropy terms are exact
pathwise derivatives of H: the score contribution of the density
integrates to zero, leaving the -2 tanh(u) Jacobian piece plus the
-s(u) correction, which for a single far-from-saturation component
reduces to the familiar unimodal forms (-2 tanh(mu + sigma r) for mu,
(1 - 2 r sigma tanh(mu + sigma r)) / sigma in expectation for sigma).

Variance control never touches the estimator's mean: draws come in
antithetic pairs (r, -r) sharing a component, and the default
'regress' baseline fits per-component Hermite control variates on one
half of the pairs to adjust the other (see gradient_from_draws).  The
baseline is not applied to d_omega, where it would not cancel.
"""

import logging
from dataclasses import dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator

from .geometry import ViewBounds
from .mixture import (
    OMEGA_FLOOR,
    SIGMA_FLOOR,
    MixtureParams,
    entropy_estimate,
    grad_u_log_density,
    sample_mixture,
)
from .rendering import RenderConfig, render_views
from .classifier import cross_entropy_from_logits
from .validation import ValidationError, check_positive_int

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttackConfig:
    k: int = 15
    iters: int = 50
    q: int = 100
    eta: float = 0.1
    lam: float = 0.01
    seed: int = 0
    baseline: str = "regress"
    antithetic: bool = True
    omega_floor: float = OMEGA_FLOOR
    sigma_floor: float = SIGMA_FLOOR
    mu_range: float = 1.5
    sigma_init: float = 0.5
    entropy_probe: int = 256
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        check_positive_int(self.k, "k")
        check_positive_int(self.iters, "iters")
        check_positive_int(self.q, "q")
        if self.lam < 0:
            raise ValidationError(f"lam: must be >= 0, got {self.lam}")
        if self.eta <= 0:
            raise ValidationError(f"eta: must be > 0, got {self.eta}")
        if self.baseline not in (False, None, "none", True, "batch", "loo", "regress"):
            raise ValidationError(f"baseline: unknown mode {self.baseline!r}")

    def with_overrides(self, **kw):
        return replace(self, **kw)


@dataclass(frozen=True)
class GradientEstimate:
    d_omega: np.ndarray  # (K,)
    d_mu: np.ndarray     # (K, 6)
    d_sigma: np.ndarray  # (K, 6)
    loss_mean: float


def _hermite_features(r):
    """Per-draw control-variate features built from Hermite polynomials.

    Columns: intercept, He1..He4 per axis, then the 15 cross products
    r_a r_b (a < b).  Everything except a coordinate's own He1 (for mu)
    or own He2 (for sigma) is orthogonal to that coordinate's score
    factor, so the whole block can be fitted and subtracted without
    touching the estimate's mean.
    """
    q = r.shape[0]
    he1 = r
    he2 = r**2 - 1.0
    he3 = r**3 - 3.0 * r
    he4 = r**4 - 6.0 * r**2 + 3.0
    pairs = [r[:, a] * r[:, b] for a in range(6) for b in range(a + 1, 6)]
    return np.concatenate(
        [np.ones((q, 1)), he1, he2, he3, he4, np.stack(pairs, axis=1)], axis=1
    )


def _crossfit_regression(losses, draws, k, min_rows=80):
    """Cross-fitted per-component regression of loss on Hermite features.

    Pairs are split into two folds; coefficients fitted on one fold are
    applied only to draws of the other, so the adjustment applied to any
    draw is independent of its innovation and the estimator stays
    unbiased.  Components with fewer than min_rows draws in a fold fall
    back to an intercept-only fit (the cross-fitted analogue of a
    per-component baseline).  Returns the per-draw fitted value and the
    He1/He2 coefficient rows ((q,), (q, 6), (q, 6)) so each coordinate
    can re-add its own signal-carrying term.
    """
    q = losses.shape[0]
    idx = np.arange(q)
    pair_id = np.minimum(idx, draws.pair)
    _, fold = np.unique(pair_id, return_inverse=True)
    fold = fold % 2

    feats = _hermite_features(draws.r)
    fit = np.zeros(q)
    lin = np.zeros((q, 6))
    quad = np.zeros((q, 6))
    for f in (0, 1):
        fit_rows = fold == f
        apply_rows = ~fit_rows
        fold_mean = losses[fit_rows].mean() if fit_rows.any() else 0.0
        for c in range(k):
            src = fit_rows & (draws.component == c)
            dst = apply_rows & (draws.component == c)
            if not dst.any():
                continue
            n_src = int(src.sum())
            if n_src >= min_rows:
                coef, *_ = np.linalg.lstsq(feats[src], losses[src], rcond=None)
                fit[dst] = feats[dst] @ coef
                lin[dst] = coef[1:7]
                quad[dst] = coef[7:13]
            elif n_src > 0:
                fit[dst] = losses[src].mean()
            else:
                fit[dst] = fold_mean
    return fit, lin, quad


def _loo_baseline(losses, comp, pair, k):
    """Per-draw baseline: mean loss of same-component draws excluding the
    draw and its antithetic partner.  Exclusion keeps the baseline
    independent of each draw's innovation, so the estimator stays
    unbiased; per-component centering absorbs the loss-level differences
    between components.  Falls back to a global leave-pair-out mean for
    components too small to self-center."""
    q = losses.shape[0]
    partner_other = pair != np.arange(q)
    excl_sum = losses + np.where(partner_other, losses[pair], 0.0)
    excl_cnt = 1 + partner_other.astype(int)
    comp_sum = np.bincount(comp, weights=losses, minlength=k)
    comp_cnt = np.bincount(comp, minlength=k)
    denom = comp_cnt[comp] - excl_cnt
    numer = comp_sum[comp] - excl_sum
    global_denom = q - excl_cnt
    global_numer = losses.sum() - excl_sum
    use_global = denom < 1
    baseline = np.where(
        use_global,
        np.divide(global_numer, np.maximum(global_denom, 1)),
        np.divide(numer, np.maximum(denom, 1)),
    )
    return np.where(np.maximum(global_denom, denom) < 1, 0.0, baseline)


def gradient_from_draws(params, bounds, draws, losses, lam, baseline="regress"):
    """Monte-Carlo gradient of E[L] + lam * H from evaluated draws.

    Rows of d_mu/d_sigma touch only each draw's selected component; the
    division by q (not per-component counts) is what folds the omega_k
    selection frequency into the expectation.  ``baseline`` is 'none',
    'batch' (subtract the batch mean), 'loo' (leave-pair-out
    per-component mean) or 'regress' (cross-fitted per-component
    control variates on [1, r, r**2 - 1]; each coordinate keeps its own
    signal-carrying feature, so linear and diagonal-curvature loss
    structure on the *other* axes stops polluting its estimate).  Every
    mode leaves d_mu/d_sigma unbiased and none is applied to d_omega,
    where it would not cancel.
    """
    losses = np.asarray(losses, dtype=float)
    q = losses.shape[0]
    if draws.r.shape[0] != q:
        raise ValidationError("losses: one loss per draw required")
    active = bounds.active.astype(float)
    k = params.k
    comp = draws.component
    sigma_sel = params.sigma[comp]
    if baseline == "regress":
        fit, lin, quad = _crossfit_regression(losses, draws, k)
        resid = (losses - fit)[:, None]
    else:
        if baseline in (False, None, "none"):
            centered = losses
        elif baseline in (True, "batch"):
            centered = losses - losses.mean()
        elif baseline == "loo":
            centered = losses - _loo_baseline(losses, comp, draws.pair, k)
        else:
            raise ValidationError(f"baseline: unknown mode {baseline!r}")
        resid = centered[:, None]
        lin = quad = None

    ent_core = (-2.0 * np.tanh(draws.u) - grad_u_log_density(params, draws.u, bounds.active)) * active[None, :]
    per_mu = resid * draws.r / sigma_sel + lam * ent_core
    per_sigma = resid * (draws.r**2 - 1.0) / sigma_sel + lam * ent_core * draws.r
    if lin is not None:
        # re-add each coordinate's own fitted term at its exact
        # conditional mean (E[r^2] = 1, E[(r^2-1)^2] = 2) instead of its
        # sampled value; same expectation, none of the sampling noise
        per_mu += lin / sigma_sel
        per_sigma += 2.0 * quad / sigma_sel
    per_mu *= active[None, :]
    per_sigma *= active[None, :]

    d_mu = np.zeros((k, 6))
    d_sigma = np.zeros((k, 6))
    np.add.at(d_mu, comp, per_mu)
    np.add.at(d_sigma, comp, per_sigma)
    d_mu /= q
    d_sigma /= q

    d_omega = np.zeros(k)
    np.add.at(d_omega, comp, losses / params.omega[comp] - lam)
    d_omega /= q
    return GradientEstimate(d_omega=d_omega, d_mu=d_mu, d_sigma=d_sigma, loss_mean=float(losses.mean()))


def nes_gradient(params, bounds, loss_fn, q, lam, rng, baseline="regress", antithetic=True):
    """Draw q fresh samples from params and estimate the ascent gradient."""
    rng = np.random.default_rng(rng)
    draws = sample_mixture(params, bounds, q, rng, antithetic=antithetic)
    losses = np.asarray(loss_fn(draws.v), dtype=float)
    return gradient_from_draws(params, bounds, draws, losses, lam, baseline=baseline), draws


@dataclass
class AdamState:
    m_omega: np.ndarray
    v_omega: np.ndarray
    m_mu: np.ndarray
    v_mu: np.ndarray
    m_sigma: np.ndarray
    v_sigma: np.ndarray

    @classmethod
    def zeros(cls, k):
        return cls(
            m_omega=np.zeros(k),
            v_omega=np.zeros(k),
            m_mu=np.zeros((k, 6)),
            v_mu=np.zeros((k, 6)),
            m_sigma=np.zeros((k, 6)),
            v_sigma=np.zeros((k, 6)),
        )


def _adam_block(value, grad, m, v, eta, step, betas, eps):
    b1, b2 = betas
    m = b1 * m + (1.0 - b1) * grad
    v = b2 * v + (1.0 - b2) * grad**2
    m_hat = m / (1.0 - b1**step)
    v_hat = v / (1.0 - b2**step)
    return value + eta * m_hat / (np.sqrt(v_hat) + eps), m, v


def adam_update(params, grad, eta, step, state, betas=(0.9, 0.999), eps=1e-8):
    """One Adam ascent step; returns (new params, new state).

    step is 1-based (bias correction needs it).
    """
    if step < 1:
        raise ValidationError(f"step: must be >= 1, got {step}")
    omega, m_o, v_o = _adam_block(params.omega, grad.d_omega, state.m_omega, state.v_omega, eta, step, betas, eps)
    mu, m_m, v_m = _adam_block(params.mu, grad.d_mu, state.m_mu, state.v_mu, eta, step, betas, eps)
    sigma, m_s, v_s = _adam_block(params.sigma, grad.d_sigma, state.m_sigma, state.v_sigma, eta, step, betas, eps)
    new_state = AdamState(m_omega=m_o, v_omega=v_o, m_mu=m_m, v_mu=v_m, m_sigma=m_s, v_sigma=v_s)
    # raw values; caller projects back onto the feasible set
    return _RawParams(omega=omega, mu=mu, sigma=sigma), new_state


@dataclass(frozen=True)
class _RawParams:
    """Unprojected parameter values between an Adam step and projection."""

    omega: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray


def project_params(params, omega_floor=OMEGA_FLOOR, sigma_floor=SIGMA_FLOOR):
    """Clamp weights/scales to their floors and renormalize the simplex."""
    omega = np.asarray(params.omega, dtype=float)
    if not np.all(np.isfinite(omega)) or np.all(omega < omega_floor):
        logger.warning("mixture weights degenerate; resetting to uniform")
        omega = np.full(omega.shape[0], 1.0 / omega.shape[0])
    else:
        omega = np.maximum(omega, omega_floor)
        omega = omega / omega.sum()
    sigma = np.maximum(np.asarray(params.sigma, dtype=float), sigma_floor)
    return MixtureParams(omega=omega, mu=np.asarray(params.mu, dtype=float), sigma=sigma)


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    loss_mean: float
    entropy: float
    max_omega: float


@dataclass(frozen=True)
class AttackResult:
    params: MixtureParams
    trace: tuple
    bounds: ViewBounds

    @property
    def final_loss_mean(self):
        return self.trace[-1].loss_mean if self.trace else float("nan")

    @property
    def final_entropy(self):
        return self.trace[-1].entropy if self.trace else float("nan")


def optimize_mixture(loss_fn, bounds, config, init_params=None, rng=None):
    """Run the full search loop against a viewpoint-loss callable.

    All randomness flows from one generator (seeded by config.seed when
    ``rng`` is not given), so results are reproducible end to end.
    """
    rng = np.random.default_rng(config.seed if rng is None else rng)
    if init_params is None:
        params = MixtureParams.init_spread(
            config.k, rng, mu_range=config.mu_range, sigma_init=config.sigma_init
        )
    else:
        if init_params.k != config.k:
            raise ValidationError(
                f"init_params: k={init_params.k} does not match config.k={config.k}"
            )
        params = init_params
    params = project_params(params, config.omega_floor, config.sigma_floor)
    state = AdamState.zeros(config.k)
    trace = []
    for step in range(1, config.iters + 1):
        draws = sample_mixture(params, bounds, config.q, rng, antithetic=config.antithetic)
        losses = np.asarray(loss_fn(draws.v), dtype=float)
        if losses.shape != (config.q,):
            raise ValidationError(
                f"loss_fn: expected shape ({config.q},), got {losses.shape}"
            )
        grad = gradient_from_draws(params, bounds, draws, losses, config.lam, config.baseline)
        raw, state = adam_update(
            params, grad, config.eta, step, state, config.adam_betas, config.adam_eps
        )
        params = project_params(raw, config.omega_floor, config.sigma_floor)
        entropy, _ = entropy_estimate(params, bounds, config.entropy_probe, rng)
        trace.append(
            TraceRow(
                iteration=step,
                loss_mean=grad.loss_mean,
                entropy=entropy,
                max_omega=float(params.omega.max()),
            )
        )
    return AttackResult(params=params, trace=tuple(trace), bounds=bounds)


# -- classifier-facing wrappers ---------------------------------------------


def scene_loss_fn(classifier, scene, label, render_config):
    """Per-viewpoint cross-entropy of the true label under the classifier."""

    def loss(v_batch):
        imgs = render_views(scene, v_batch, render_config)
        logits = classifier.decision_function(imgs)
        return cross_entropy_from_logits(logits, np.full(imgs.shape[0], label), reduction="none")

    return loss


def classification_loss(classifier, image, label):
    """Cross-entropy of a single rendered image."""
    pixels = image.pixels if hasattr(image, "pixels") else image
    logits = classifier.decision_function(pixels)
    return cross_entropy_from_logits(logits, [int(label)], reduction="sum")


def run_attack(
    classifier,
    scene,
    bounds,
    config,
    render_config=None,
    label=None,
    init_params=None,
    rng=None,
):
    """Search an adversarial viewpoint distribution for one scene."""
    render_config = render_config if render_config is not None else RenderConfig()
    label = scene.label if label is None else int(label)
    loss = scene_loss_fn(classifier, scene, label, render_config)
    return optimize_mixture(loss, bounds, config, init_params=init_params, rng=rng)


def attack_success_rate(classifier, scene, params, bounds, n, rng, render_config, label=None):
    """Misclassification rate over fresh draws from the distribution."""
    label = scene.label if label is None else int(label)
    draws = sample_mixture(params, bounds, n, np.random.default_rng(rng))
    imgs = render_views(scene, draws.v, render_config)
    preds = classifier.predict(imgs)
    return float((preds != label).mean())


def random_search_success_rate(classifier, scene, bounds, budget, rng, render_config, label=None):
    """Uniform-search baseline: probe the box uniformly, keep the single
    worst viewpoint, and report (probe success rate, worst viewpoint)."""
    label = scene.label if label is None else int(label)
    rng = np.random.default_rng(rng)
    vs = rng.uniform(bounds.v_min, bounds.v_max, size=(budget, 6))
    logits = classifier.decision_function(render_views(scene, vs, render_config))
    losses = cross_entropy_from_logits(logits, np.full(budget, label), reduction="none")
    preds_wrong = logits.argmax(axis=1) != label
    return float(preds_wrong.mean()), vs[int(np.argmax(losses))]


class GMVFoolAttack(BaseEstimator):
    """Estimator wrapper around the search loop.

    ``fit`` accepts either a Scene (with a classifier) or any callable
    viewpoint-loss surface; learned state lands in ``mixture_`` and
    ``trace_``.
    """

    def __init__(
        self,
        k=15,
        iters=50,
        q=100,
        eta=0.1,
        lam=0.01,
        seed=0,
        baseline="regress",
        antithetic=True,
        bounds=None,
        render_config=None,
    ):
        self.k = k
        self.iters = iters
        self.q = q
        self.eta = eta
        self.lam = lam
        self.seed = seed
        self.baseline = baseline
        self.antithetic = antithetic
        self.bounds = bounds
        self.render_config = render_config

    def _config(self):
        return AttackConfig(
            k=self.k,
            iters=self.iters,
            q=self.q,
            eta=self.eta,
            lam=self.lam,
            seed=self.seed,
            baseline=self.baseline,
            antithetic=self.antithetic,
        )

    def fit(self, target, classifier=None, label=None, init_params=None):
        bounds = self.bounds if self.bounds is not None else ViewBounds.default()
        if callable(target):
            result = optimize_mixture(target, bounds, self._config(), init_params=init_params)
        else:
            if classifier is None:
                raise ValidationError("fit: a classifier is required to attack a scene")
            render_config = (
                self.render_config if self.render_config is not None else RenderConfig()
            )
            result = run_attack(
                classifier,
                target,
                bounds,
                self._config(),
                render_config=render_config,
                label=label,
                init_params=init_params,
            )
        self.mixture_ = result.params
        self.trace_ = result.trace
        self.bounds_ = result.bounds
        return self

    def sample(self, n, rng=None):
        if not hasattr(self, "mixture_"):
            raise ValidationError("sample: call fit first")
        gen = np.random.default_rng(self.seed + 1 if rng is None else rng)
        return sample_mixture(self.mixture_, self.bounds_, n, gen).v
