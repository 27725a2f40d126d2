"""Gaussian-mixture viewpoint distributions under a tanh squash.

The search distribution lives in an unbounded latent space: a K-component
diagonal Gaussian mixture over u in R^6.  Latent draws map into the
admissible viewpoint box through the per-axis squash

    v_i = a_i * tanh(u_i) + b_i,

where ``a`` and ``b`` are the box half-width and center.  Axes with zero
extent are frozen: their v value is pinned to the box center and they
contribute no density or entropy terms.

Densities in v-space include the change-of-variables term
``-sum_i log(a_i * sech^2(u_i))`` over active axes.
"""

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .geometry import ViewBounds
from .validation import DomainError, ValidationError, as_float_array, check_simplex

OMEGA_FLOOR = 1e-3
SIGMA_FLOOR = 1e-4

_LOG_2PI = np.log(2.0 * np.pi)
_LOG_2 = np.log(2.0)


def _log_sech2(u):
    """log(1 - tanh(u)^2), stable for large |u|."""
    a = np.abs(u)
    return 2.0 * (_LOG_2 - a - np.log1p(np.exp(-2.0 * a)))


@dataclass(frozen=True)
class MixtureParams:
    """Parameters (omega, mu, sigma) of the latent mixture.

    Treated as immutable: updates build new instances.
    """

    omega: np.ndarray  # (K,) mixture weights on the simplex
    mu: np.ndarray     # (K, 6) component means
    sigma: np.ndarray  # (K, 6) componentwise standard deviations

    def __post_init__(self):
        omega = check_simplex(self.omega, "omega")
        k = omega.shape[0]
        mu = as_float_array(self.mu, "mu", shape=(k, 6))
        sigma = as_float_array(self.sigma, "sigma", shape=(k, 6))
        if np.any(sigma <= 0):
            raise ValidationError("sigma: must be strictly positive")
        for arr in (omega, mu, sigma):
            arr.setflags(write=False)
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def k(self):
        return self.omega.shape[0]

    @classmethod
    def init_spread(cls, k, rng, mu_range=1.5, sigma_init=0.5):
        """Uniform weights, means scattered in [-mu_range, mu_range]^6,
        a common isotropic sigma.  The standard attack initializer."""
        rng = np.random.default_rng(rng)
        return cls(
            omega=np.full(k, 1.0 / k),
            mu=rng.uniform(-mu_range, mu_range, size=(k, 6)),
            sigma=np.full((k, 6), float(sigma_init)),
        )

    def to_dict(self):
        return {
            "k": int(self.k),
            "omega": self.omega.tolist(),
            "mu": self.mu.tolist(),
            "sigma": self.sigma.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        params = cls(
            omega=as_float_array(d["omega"], "omega"),
            mu=d["mu"],
            sigma=d["sigma"],
        )
        if "k" in d and int(d["k"]) != params.k:
            raise ValidationError(f"mixture dict: k={d['k']} but {params.k} components")
        return params


def squash(u, bounds):
    """Map latent coordinates into the viewpoint box, v = a*tanh(u) + b."""
    u = np.asarray(u, dtype=float)
    return bounds.half_width * np.tanh(u) + bounds.center


def unsquash(v, bounds):
    """Inverse squash on active axes; frozen axes map to 0.

    Raises DomainError when an active coordinate sits on or outside the
    box boundary, where the inverse diverges.
    """
    v = np.asarray(v, dtype=float)
    active = bounds.active
    scaled = np.where(active, (v - bounds.center) / np.where(active, bounds.half_width, 1.0), 0.0)
    if np.any(np.abs(scaled) >= 1.0):
        raise DomainError("unsquash: viewpoint on or outside the open bounds box")
    return np.arctanh(scaled)


@dataclass(frozen=True)
class Draws:
    """A batch of reparameterized draws.

    ``component[i]`` records which mixture component draw i selected
    (the one-hot latent), ``r`` the standard-normal innovation, and
    ``u``/``v`` the latent and squashed samples.  ``u`` is exactly
    ``mu[component] + sigma[component] * r``, reproducible bit-for-bit
    from (component, r, params).  ``pair[i]`` is the index of draw i's
    antithetic partner (or i itself when draws are unpaired).
    """

    component: np.ndarray  # (n,) int
    r: np.ndarray          # (n, 6)
    u: np.ndarray          # (n, 6)
    v: np.ndarray          # (n, 6)
    pair: np.ndarray = None  # (n,) int

    def __post_init__(self):
        if self.pair is None:
            object.__setattr__(self, "pair", np.arange(self.component.shape[0]))

    def gamma_onehot(self, k):
        g = np.zeros((self.component.shape[0], k))
        g[np.arange(self.component.shape[0]), self.component] = 1.0
        return g


def sample_mixture(params, bounds, n, rng, antithetic=False):
    """Draw n viewpoints: pick components by weight, then reparameterize.

    With ``antithetic`` the innovations come in (r, -r) pairs sharing a
    component, which leaves every expectation unchanged (r is symmetric
    given the component) but substantially cuts the variance of the
    search-gradient estimates built from these draws.
    """
    rng = np.random.default_rng(rng)
    pair = None
    if antithetic:
        half = (n + 1) // 2
        comp_h = rng.choice(params.k, size=half, p=params.omega)
        r_h = rng.standard_normal((half, 6))
        comp = np.concatenate([comp_h, comp_h[: n - half]])
        r = np.concatenate([r_h, -r_h[: n - half]])
        pair = np.arange(n)
        pair[:n - half] = np.arange(half, n)
        pair[half:] = np.arange(n - half)
    else:
        comp = rng.choice(params.k, size=n, p=params.omega)
        r = rng.standard_normal((n, 6))
    u = params.mu[comp] + params.sigma[comp] * r
    return Draws(component=comp, r=r, u=u, v=squash(u, bounds), pair=pair)


def _component_log_density_u(params, u, active):
    """Per-component latent log density over active axes, shape (n, K)."""
    u = np.atleast_2d(u)
    diff = (u[:, None, :] - params.mu[None, :, :]) / params.sigma[None, :, :]
    per_axis = -0.5 * (diff * diff) - np.log(params.sigma[None, :, :]) - 0.5 * _LOG_2PI
    return np.sum(per_axis * active[None, None, :], axis=2)


def log_density_u(params, u, active=None):
    """Latent mixture log density, shape (n,)."""
    if active is None:
        active = np.ones(6, dtype=bool)
    comp = _component_log_density_u(params, u, np.asarray(active, dtype=float))
    return logsumexp(comp + np.log(params.omega)[None, :], axis=1)


def grad_u_log_density(params, u, active=None):
    """d/du of the latent mixture log density, shape (n, 6).

    Mixes the per-component scores by posterior responsibility.  Frozen
    axes get zero gradient.
    """
    if active is None:
        active = np.ones(6, dtype=bool)
    act = np.asarray(active, dtype=float)
    u = np.atleast_2d(u)
    logjoint = _component_log_density_u(params, u, act) + np.log(params.omega)[None, :]
    resp = np.exp(logjoint - logsumexp(logjoint, axis=1, keepdims=True))
    score = (params.mu[None, :, :] - u[:, None, :]) / params.sigma[None, :, :] ** 2
    return np.einsum("nk,nkc->nc", resp, score) * act[None, :]


def log_density_v(params, bounds, v):
    """Log density of squashed samples in viewpoint space, shape (n,).

    Equals the latent mixture log density minus the log Jacobian
    ``sum_i log(a_i sech^2 u_i)`` over active axes.
    """
    v = np.atleast_2d(np.asarray(v, dtype=float))
    active = bounds.active
    u = unsquash(v, bounds)
    log_p_u = log_density_u(params, u, active)
    jac = _log_jacobian(u, bounds)
    return log_p_u - jac


def _log_jacobian(u, bounds):
    """log |dv/du| summed over active axes, shape (n,)."""
    active = bounds.active
    log_a = np.log(bounds.half_width, where=active, out=np.zeros(6))
    return np.sum((log_a[None, :] + _log_sech2(u)) * active[None, :], axis=1)


def entropy_estimate(params, bounds, n, rng):
    """Monte-Carlo entropy of the squashed distribution.

    Returns (estimate, standard_error); the estimate is the sample mean
    of -log p_v over fresh draws.
    """
    draws = sample_mixture(params, bounds, n, rng)
    vals = -(log_density_u(params, draws.u, bounds.active) - _log_jacobian(draws.u, bounds))
    se = float(vals.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return float(vals.mean()), se


def save_mixture(path, params, bounds, meta=None):
    """Structured-text dump of a mixture and its box; round-trips exactly.

    JSON float serialization uses repr, so every IEEE double survives
    the trip bit-for-bit.
    """
    payload = {}
    if meta:
        payload["meta"] = meta
    payload.update(params.to_dict())
    payload["bounds"] = bounds.to_dict()
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def load_mixture(path):
    with open(path, "r", encoding="utf-8") as fh:
        d = json.load(fh)
    params = MixtureParams.from_dict(d)
    bounds = ViewBounds.from_dict(d["bounds"])
    return params, bounds, d.get("meta")
