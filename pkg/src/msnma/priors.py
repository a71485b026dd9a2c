"""Softmax coefficient parameterization and random-walk shrinkage priors.

Spline coefficients live on the unit simplex; sampling happens on the
inverse-softmax scale where a first-difference Gaussian prior shrinks the
implied hazard toward a constant. The per-step variances carry knot-gap
weights normalised to sum to one, which makes the implied prior on the
baseline hazard invariant to the number and location of knots and to the
timescale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .splines import KnotVector, MSplineBasis, augment_knots

__all__ = [
    "softmax",
    "inverse_softmax",
    "constant_hazard_coefficients",
    "constant_hazard_phi",
    "rw_weights",
    "pexp_weights",
    "smoothing_weights",
    "RandomWalkPrior",
    "NonPropPrior",
    "make_rw_prior",
    "logprior_rw",
    "logprior_nonprop",
    "draw_prior_hazards",
    "prior_hazard_ribbons",
    "RIBBON_PROBS",
]

LOG_2PI = float(np.log(2.0 * np.pi))


def softmax(x) -> np.ndarray:
    """Map a real vector of length n-1 to the n-simplex, first entry pinned.

    The result is [1, exp(x)] / (1 + sum(exp(x))), computed with
    max-subtraction so entries near +-700 stay finite.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("softmax input must be finite")
    full = np.concatenate([np.zeros(x.shape[:-1] + (1,)), x], axis=-1)
    full = full - full.max(axis=-1, keepdims=True)
    e = np.exp(full)
    return e / e.sum(axis=-1, keepdims=True)


def inverse_softmax(a) -> np.ndarray:
    """Inverse of :func:`softmax`: log(a[1:]) - log(a[0])."""
    a = np.asarray(a, dtype=float)
    if np.any(a <= 0):
        raise ValueError("inverse_softmax requires strictly positive entries")
    return np.log(a[..., 1:]) - np.log(a[..., :1])


def constant_hazard_coefficients(knots: KnotVector, kappa: int) -> np.ndarray:
    """Simplex vector reproducing a constant hazard 1/(upper-lower).

    Entry s is the support width of basis function s divided by
    kappa * (upper - lower); the widths/kappa are the B-spline partition-of-
    unity scalings, so the weighted basis is exactly constant.
    """
    aug = augment_knots(knots, kappa).as_array()
    span = knots.boundary_upper - knots.boundary_lower
    return (aug[kappa:] - aug[:-kappa]) / (kappa * span)


def constant_hazard_phi(knots: KnotVector, kappa: int) -> np.ndarray:
    """Random-walk prior mean: inverse-softmax of the constant-hazard simplex."""
    return inverse_softmax(constant_hazard_coefficients(knots, kappa))


def rw_weights(knots: KnotVector, kappa: int) -> np.ndarray:
    """Knot-gap variance weights for the random walk, order >= 2.

    w_l = (aug[l+kappa] - aug[l+1]) / ((kappa-1) (upper-lower)) in 1-based
    indexing; the weights are positive, sum to exactly 1, and are invariant
    to rescaling the timescale.
    """
    if kappa < 2:
        raise ValueError(
            "random-walk weights are 0/0 for order-1 splines; "
            "use pexp_weights for the piecewise exponential case"
        )
    aug = augment_knots(knots, kappa).as_array()
    span = knots.boundary_upper - knots.boundary_lower
    n = len(aug)
    return (aug[kappa : n - 1] - aug[1 : n - kappa]) / ((kappa - 1) * span)


def pexp_weights(knots: KnotVector) -> np.ndarray:
    """Variance weights for the piecewise exponential (order-1) case.

    The first L inter-knot gaps normalised by the span up to the last
    internal knot; length L matches the number of random-walk steps.
    """
    kv = knots.all_knots
    n_internal = knots.n_internal
    if n_internal == 0:
        return np.zeros(0)
    return (kv[1 : n_internal + 1] - kv[:n_internal]) / (kv[n_internal] - kv[0])


def smoothing_weights(knots: KnotVector, kappa: int) -> np.ndarray:
    """Weights appropriate to the order: gap weights for kappa >= 2, the
    piecewise-exponential modification for kappa = 1."""
    if kappa >= 2:
        return rw_weights(knots, kappa)
    return pexp_weights(knots)


@dataclass(frozen=True)
class RandomWalkPrior:
    """Weighted first-difference Gaussian prior centred on a constant hazard."""

    phi: np.ndarray
    weights: np.ndarray
    sigma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "phi", np.asarray(self.phi, dtype=float))
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))
        if len(self.phi) != len(self.weights):
            raise ValueError("phi and weights must have equal length")
        if len(self.weights) and abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1")
        if np.any(self.weights <= 0):
            raise ValueError("weights must be positive")


def make_rw_prior(knots: KnotVector, kappa: int, sigma: float = 1.0) -> RandomWalkPrior:
    return RandomWalkPrior(
        phi=constant_hazard_phi(knots, kappa),
        weights=smoothing_weights(knots, kappa),
        sigma=sigma,
    )


@dataclass(frozen=True)
class NonPropPrior:
    """Symmetric multivariate random-walk prior for per-treatment departures
    from proportionality; compound-symmetric correlation 0.5 across the K
    treatments with a common smoothing standard deviation."""

    n_treatments: int
    weights: np.ndarray
    sigma_alpha: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))
        if self.n_treatments < 2:
            raise ValueError("need at least 2 treatments")

    @property
    def correlation(self) -> np.ndarray:
        k = self.n_treatments
        return 0.5 * (np.eye(k) + np.ones((k, k)))


def logprior_rw(alpha_star, prior: RandomWalkPrior):
    """Log density of the weighted random walk and its gradient.

    Returns ``(logp, grad_alpha_star, grad_sigma)``. Increments are the first
    differences of (alpha_star - phi) with an implicit zero at index 0, each
    scored under Normal(0, sigma^2 w_l).
    """
    sigma = float(prior.sigma)
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    alpha_star = np.asarray(alpha_star, dtype=float)
    d = alpha_star - prior.phi
    u = np.diff(d, prepend=0.0)
    var = sigma * sigma * prior.weights
    logp = -0.5 * float(np.sum(u * u / var + np.log(var) + LOG_2PI))
    gu = -u / var
    grad_alpha = gu - np.concatenate([gu[1:], [0.0]])
    grad_sigma = float(np.sum(u * u / (sigma * var)) - len(u) / sigma)
    return logp, grad_alpha, grad_sigma


def logprior_nonprop(gammas, prior: NonPropPrior):
    """Log density of the symmetric multivariate random walk on ``gammas``.

    ``gammas`` has one row per treatment (K x (L+kappa-1)). Increment l across
    treatments is MVN(0, w_l sigma^2 P) with P the 0.5 compound-symmetric
    correlation; the quadratic form uses the closed-form inverse
    P^-1 = 2 (I - J/(K+1)). Returns ``(logp, grad_gammas, grad_sigma)``.
    """
    sigma = float(prior.sigma_alpha)
    if sigma <= 0:
        raise ValueError("sigma_alpha must be positive")
    g = np.asarray(gammas, dtype=float)
    K, n = g.shape
    if K != prior.n_treatments:
        raise ValueError("gammas row count must equal n_treatments")
    w = prior.weights
    v = np.diff(g, axis=1, prepend=0.0)  # (K, n), column l is v_l
    s2 = sigma * sigma
    colsum = v.sum(axis=0)
    quad = 2.0 * (np.sum(v * v, axis=0) - colsum**2 / (K + 1))
    logdet_p = np.log(K + 1.0) - K * np.log(2.0)
    logp = -0.5 * float(
        np.sum(quad / (s2 * w) + K * (np.log(s2 * w) + LOG_2PI) + logdet_p)
    )
    gv = -2.0 * (v - colsum[None, :] / (K + 1)) / (s2 * w)[None, :]
    grad_g = gv - np.concatenate([gv[:, 1:], np.zeros((K, 1))], axis=1)
    grad_sigma = float(np.sum(quad / (s2 * w)) / sigma - K * n / sigma)
    return logp, grad_g, grad_sigma


PRIOR_VARIANTS = ("dirichlet", "random_effect", "rw", "weighted_rw")
RIBBON_PROBS = (0.025, 0.10, 0.25, 0.50, 0.75, 0.90, 0.975)


def draw_prior_hazards(
    variant: str,
    knots: KnotVector,
    kappa: int,
    n_draws: int,
    rng: np.random.Generator,
    grid=None,
    sigma_scale: float = 1.0,
):
    """Monte-Carlo draws of the baseline hazard implied by a coefficient prior.

    Returns ``(grid, hazards)`` with ``hazards`` of shape (n_draws, len(grid)).
    The smoothing standard deviation is drawn half-Normal(0, sigma_scale^2)
    for every variant except the flat Dirichlet.
    """
    if variant not in PRIOR_VARIANTS:
        raise ValueError(f"unknown prior variant {variant!r}; pick from {PRIOR_VARIANTS}")
    basis = MSplineBasis(knots, kappa)
    if grid is None:
        grid = np.linspace(knots.boundary_lower, knots.boundary_upper, 257)
    grid = np.asarray(grid, dtype=float)
    m = basis.m(grid)
    dim = basis.basis_dim

    if variant == "dirichlet":
        alpha = rng.dirichlet(np.ones(dim), size=n_draws)
        return grid, alpha @ m.T

    sigma = np.abs(rng.normal(0.0, sigma_scale, size=n_draws))
    phi = constant_hazard_phi(knots, kappa)
    z = rng.standard_normal((n_draws, dim - 1))
    if variant == "random_effect":
        steps = sigma[:, None] * z
        astar = phi + steps
    else:
        if variant == "weighted_rw":
            scale = np.sqrt(smoothing_weights(knots, kappa))
        else:
            scale = np.ones(dim - 1)
        astar = phi + np.cumsum(sigma[:, None] * scale * z, axis=1)
    alpha = softmax(astar)
    return grid, alpha @ m.T


def prior_hazard_ribbons(
    variant: str,
    knots: KnotVector,
    kappa: int,
    n_draws: int,
    rng: np.random.Generator,
    grid=None,
    sigma_scale: float = 1.0,
    probs=RIBBON_PROBS,
):
    """Pointwise prior quantile ribbons of the implied baseline hazard.

    Returns ``(grid, quantiles)`` with one quantile row per probability.
    """
    if n_draws < 1000:
        raise ValueError("need at least 1000 draws for stable ribbons")
    grid, hz = draw_prior_hazards(variant, knots, kappa, n_draws, rng,
                                  grid=grid, sigma_scale=sigma_scale)
    return grid, np.quantile(hz, probs, axis=0)
