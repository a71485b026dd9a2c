"""Posterior products: curves, time-varying log hazard ratios, PSIS-LOO,
survival-time simulation, and multivariate-Normal export bundles.

Within the boundary knots, survival and hazard come straight from the basis
matrices; beyond the upper boundary the hazard is held constant at its left
limit, so the cumulative hazard continues linearly and survival decays
exponentially.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.special import logsumexp

from .priors import softmax
from .splines import KnotVector, MSplineBasis

__all__ = [
    "CurveEstimate",
    "LooReport",
    "MvnExport",
    "predict_curves",
    "log_hazard_ratio_curves",
    "loo",
    "psis_smooth",
    "fit_generalized_pareto",
    "simulate_survival",
    "survival_time_from_uniform",
    "export_mvn",
    "default_grid",
]

INTERVAL_PROBS = {
    "q025": 0.025, "q10": 0.10, "q25": 0.25,
    "q75": 0.75, "q90": 0.90, "q975": 0.975,
}


@dataclass
class CurveEstimate:
    """Pointwise posterior summary of one curve."""

    quantity: str  # survival | hazard | cumulative_hazard | log_hazard_ratio
    population: str
    treatment: str
    times: np.ndarray
    median: np.ndarray
    intervals: dict[str, np.ndarray] = field(default_factory=dict)

    def rows(self):
        keys = sorted(INTERVAL_PROBS, key=lambda k: INTERVAL_PROBS[k])
        for i, t in enumerate(self.times):
            yield {
                "quantity": self.quantity,
                "population": self.population,
                "treatment": self.treatment,
                "time": float(t),
                "median": float(self.median[i]),
                **{k: float(self.intervals[k][i]) for k in keys},
            }


def default_grid(boundary_upper: float, horizon: float | None, knots) -> np.ndarray:
    """200 evenly spaced points from 0 to the horizon, plus every knot."""
    top = float(horizon) if horizon is not None else float(boundary_upper)
    base = np.linspace(0.0, top, 200)
    ks = np.asarray(knots, dtype=float)
    ks = ks[(ks >= 0) & (ks <= top)]
    return np.unique(np.concatenate([base, ks]))


def _hazard_cumhaz_draws(model, flat, population: int, treatment: int, grid,
                         covariates=None):
    """Per-draw log-hazard and cumulative-hazard matrices (S, T) on the grid."""
    spec = model.spec
    gi = model.group_for(population, treatment if spec.family == "nph_stratified" else None,
                         strata=covariates if spec.family == "nph_stratified" else None)
    grp = model.coef_groups[gi]
    basis = grp.basis
    upper = basis.boundary_upper
    grid = np.asarray(grid, dtype=float)
    inside = np.minimum(grid, upper)

    astar = model.astar_draws(flat, gi)
    shift = model.spline_shift_draws(flat, treatment, covariates)
    alpha = softmax(astar + shift if isinstance(shift, np.ndarray) else astar)
    eta = model.eta_draws(flat, population, treatment, covariates)

    m = basis.m(inside)
    iv = basis.i(inside)
    base_haz = alpha @ m.T  # (S, T)
    base_cum = alpha @ iv.T
    log_h = np.log(base_haz) + eta[:, None]
    cum = base_cum * np.exp(eta)[:, None]

    beyond = grid > upper
    if np.any(beyond):
        m_up = basis.m(np.array([upper]))
        base_up = (alpha @ m_up.T)[:, 0]
        iv_up = basis.i(np.array([upper]))
        cum_up = (alpha @ iv_up.T)[:, 0]
        h_up = np.log(base_up) + eta
        extra = (grid[beyond] - upper)[None, :]
        log_h[:, beyond] = h_up[:, None]
        cum[:, beyond] = (cum_up * np.exp(eta))[:, None] + (base_up * np.exp(eta))[:, None] * extra
    # guard fp wiggle: cumulative hazard must be nondecreasing along the grid
    cum = np.maximum.accumulate(cum, axis=1)
    return log_h, cum


def _summarize(quantity, population, treatment, grid, draws_matrix) -> CurveEstimate:
    qs = {k: np.quantile(draws_matrix, p, axis=0) for k, p in INTERVAL_PROBS.items()}
    return CurveEstimate(
        quantity=quantity,
        population=population,
        treatment=treatment,
        times=np.asarray(grid, dtype=float),
        median=np.quantile(draws_matrix, 0.5, axis=0),
        intervals=qs,
    )


def _resolve_ids(model, population, treatments):
    data = model.data
    pop = population if isinstance(population, int) else data.studies.index(population)
    ids = []
    for t in treatments:
        ids.append(t if isinstance(t, int) else data.treatments.index(t))
    return pop, ids


def predict_curves(draws, model, population, treatments, grid=None,
                   horizon=None, quantities=("survival", "hazard", "cumulative_hazard"),
                   covariates=None) -> list[CurveEstimate]:
    """Posterior survival/hazard/cumulative-hazard curves per treatment.

    For the stratified family only observed (study, arm) combinations can be
    predicted; the other families support any treatment in any population.
    Beyond the upper boundary knot the hazard is constant at its left limit.
    """
    flat = draws.flat()
    pop, ids = _resolve_ids(model, population, treatments)
    grp = model.coef_groups[model.group_for(
        pop, ids[0] if model.spec.family == "nph_stratified" else None,
        strata=covariates if model.spec.family == "nph_stratified" else None)]
    if grid is None:
        grid = default_grid(grp.basis.boundary_upper, horizon, grp.basis.knots.all_knots)
    grid = np.asarray(grid, dtype=float)
    out = []
    for k in ids:
        log_h, cum = _hazard_cumhaz_draws(model, flat, pop, k, grid, covariates)
        pop_label = model.data.studies[pop]
        trt_label = model.data.treatments[k]
        for q in quantities:
            if q == "survival":
                mat = np.exp(-cum)
            elif q == "hazard":
                mat = np.exp(log_h)
            elif q == "cumulative_hazard":
                mat = cum
            else:
                raise ValueError(f"unknown quantity {q!r}")
            out.append(_summarize(q, pop_label, trt_label, grid, mat))
    return out


def log_hazard_ratio_curves(draws, model, population, treatments, reference,
                            grid=None, horizon=None, covariates=None) -> list[CurveEstimate]:
    """Per-draw log hazard ratio of each treatment against the reference.

    Under a proportional-hazards family the common baseline cancels exactly,
    so each draw's curve is constant in time.
    """
    flat = draws.flat()
    pop, ids = _resolve_ids(model, population, treatments)
    ref = reference if isinstance(reference, int) else model.data.treatments.index(reference)
    grp = model.coef_groups[model.group_for(
        pop, ref if model.spec.family == "nph_stratified" else None,
        strata=covariates if model.spec.family == "nph_stratified" else None)]
    if grid is None:
        grid = default_grid(grp.basis.boundary_upper, horizon, grp.basis.knots.all_knots)
    grid = np.asarray(grid, dtype=float)
    log_ref, _ = _hazard_cumhaz_draws(model, flat, pop, ref, grid, covariates)
    out = []
    for k in ids:
        if k == ref:
            continue
        log_h, _ = _hazard_cumhaz_draws(model, flat, pop, k, grid, covariates)
        out.append(_summarize(
            "log_hazard_ratio", model.data.studies[pop],
            f"{model.data.treatments[k]} vs {model.data.treatments[ref]}",
            grid, log_h - log_ref,
        ))
    return out


# ---------------------------------------------------------------------------
# PSIS-LOO


def fit_generalized_pareto(x: np.ndarray):
    """Zhang-Stephens posterior-mean fit of the generalized Pareto shape and
    scale to exceedances ``x`` (all positive), with the usual weak prior that
    stabilises the shape estimate for small tails."""
    x = np.sort(np.asarray(x, dtype=float))
    n = len(x)
    m = 30 + int(math.sqrt(n))
    bs = 1.0 - np.sqrt(m / (np.arange(1, m + 1) - 0.5))
    quart = x[max(0, int(n / 4 + 0.5) - 1)]
    bs = bs / (3.0 * quart) + 1.0 / x[-1]
    ks = np.mean(np.log1p(-bs[:, None] * x), axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        profile = n * (np.log(-bs / ks) - ks - 1.0)
    profile[~np.isfinite(profile)] = -np.inf
    w = 1.0 / np.exp(profile - profile[:, None]).sum(axis=1)
    b_post = float(np.sum(bs * w))
    k_post = float(np.mean(np.log1p(-b_post * x)))
    sigma = -k_post / b_post
    k_hat = (n * k_post + 5.0) / (n + 10.0)  # shrink toward 0.5 with prior weight 10
    return k_hat, sigma


def _gpd_quantile(u, k, sigma):
    if abs(k) < 1e-12:
        return -sigma * np.log1p(-u)
    return sigma / k * ((1.0 - u) ** -k - 1.0)


def psis_smooth(log_ratios: np.ndarray, tail_fraction: float = 0.2):
    """Pareto-smooth one vector of log importance ratios.

    The largest ``tail_fraction`` of the weights is replaced by generalized-
    Pareto quantiles fit to that tail, truncated at the raw maximum. Returns
    ``(smoothed_log_weights, k_hat)``.
    """
    lw = np.asarray(log_ratios, dtype=float).copy()
    s = len(lw)
    m = int(math.ceil(tail_fraction * s))
    if m < 5:
        return lw, float("-inf")
    order = np.argsort(lw)
    tail_idx = order[-m:]
    cutoff = lw[order[-m - 1]] if m < s else lw[order[0]]
    shift = lw.max()
    tail_exc = np.exp(lw[tail_idx] - shift) - math.exp(cutoff - shift)
    if np.all(tail_exc <= 0) or np.ptp(tail_exc) == 0:
        return lw, float("-inf")
    k_hat, sigma = fit_generalized_pareto(tail_exc[tail_exc > 0])
    ranks = np.argsort(np.argsort(lw[tail_idx]))
    u = (ranks + 0.5) / m
    smoothed = math.exp(cutoff - shift) + _gpd_quantile(u, k_hat, sigma)
    smoothed = np.minimum(np.log(smoothed) + shift, lw.max())
    lw[tail_idx] = smoothed
    return lw, float(k_hat)


@dataclass
class LooReport:
    """Pointwise PSIS-LOO with per-study and total aggregation."""

    elpd_i: np.ndarray
    pareto_k: np.ndarray
    study_of_record: np.ndarray
    studies: tuple[str, ...]
    p_loo: float
    elpd_total: float

    @property
    def looic_total(self) -> float:
        return -2.0 * self.elpd_total

    @property
    def looic_by_study(self) -> dict[str, float]:
        out = {}
        for j, s in enumerate(self.studies):
            out[s] = float(-2.0 * self.elpd_i[self.study_of_record == j].sum())
        return out

    @property
    def n_high_k(self) -> int:
        return int((self.pareto_k > 0.7).sum())

    def warnings(self) -> list[str]:
        if self.n_high_k:
            return [
                f"{self.n_high_k} records have Pareto k > 0.7; "
                "their elpd contributions may be unstable"
            ]
        return []

    def summary(self) -> str:
        lines = [f"{'study':<20s} {'LOOIC':>10s}"]
        for s, v in self.looic_by_study.items():
            lines.append(f"{s:<20s} {v:>10.1f}")
        lines.append(f"{'Total':<20s} {self.looic_total:>10.1f}")
        lines.append(f"{'p_loo':<20s} {self.p_loo:>10.1f}")
        lines.extend(self.warnings())
        return "\n".join(lines)


def loo(draws, study_of_record=None, studies=None) -> LooReport:
    """PSIS-LOO from stored pointwise log-likelihoods.

    ``draws`` may be a PosteriorDraws (with its model's record->study map
    passed separately) or a raw (S, n_records) matrix.
    """
    if hasattr(draws, "flat_loglik"):
        ll = draws.flat_loglik()
    else:
        ll = np.asarray(draws, dtype=float)
    s, n = ll.shape
    if study_of_record is None:
        study_of_record = np.zeros(n, dtype=int)
        studies = studies or ("all",)
    study_of_record = np.asarray(study_of_record, dtype=int)
    studies = tuple(studies)

    elpd = np.empty(n)
    ks = np.empty(n)
    lpd = logsumexp(ll, axis=0) - math.log(s)
    for i in range(n):
        logw, k = psis_smooth(-ll[:, i])
        ks[i] = k
        elpd[i] = logsumexp(logw + ll[:, i]) - logsumexp(logw)
    p_loo = float(np.sum(lpd - elpd))
    return LooReport(
        elpd_i=elpd,
        pareto_k=ks,
        study_of_record=study_of_record,
        studies=studies,
        p_loo=p_loo,
        elpd_total=float(elpd.sum()),
    )


# ---------------------------------------------------------------------------
# simulation


@dataclass(frozen=True)
class HazardShape:
    """Closed-form hazard description: simplex coefficients on a basis plus a
    log rate multiplier."""

    knots: KnotVector
    kappa: int
    coefficients: np.ndarray
    log_rate: float = 0.0

    def basis(self) -> MSplineBasis:
        return MSplineBasis(self.knots, self.kappa)


def survival_time_from_uniform(shape: HazardShape, u: float) -> float:
    """Invert S(t) = u by bracketed root-finding, with the constant-hazard
    analytic tail beyond the upper boundary knot."""
    if not 0.0 < u < 1.0:
        raise ValueError("u must lie strictly inside (0, 1)")
    target = -math.log(u)  # required cumulative hazard
    basis = shape.basis()
    alpha = np.asarray(shape.coefficients, dtype=float)
    rate = math.exp(shape.log_rate)
    upper = basis.boundary_upper
    total = float(basis.i([upper])[0] @ alpha) * rate  # = rate (unit integral)
    if target >= total:
        tail_h = float(basis.m([upper])[0] @ alpha) * rate
        return upper + (target - total) / tail_h

    def fn(t):
        return float(basis.i([t])[0] @ alpha) * rate - target

    return brentq(fn, 0.0, upper, xtol=1e-12 * max(upper, 1.0))


def simulate_survival(shape: HazardShape, n: int, rng, censor_time: float | None = None):
    """Simulate ``n`` event times from the hazard; apply administrative
    censoring at ``censor_time``. Returns ``(times, status)``."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    u = rng.uniform(size=n)
    times = np.array([survival_time_from_uniform(shape, ui) for ui in u])
    status = np.ones(n, dtype=int)
    if censor_time is not None:
        censored = times > censor_time
        times = np.minimum(times, censor_time)
        status[censored] = 0
    return times, status


# ---------------------------------------------------------------------------
# MVN export


@dataclass
class MvnExport:
    """Normal approximation of inverse-softmax coefficients and log rate per
    (population, treatment), plus the I-spline basis on a time grid.

    The mean/covariance cover the concatenated vector
    (inverse-softmax coefficients, linear predictor); survival follows as
    exp(-softmax(x[:-1]) . I(t) . exp(x[-1])).
    """

    population: str
    grid: np.ndarray
    basis_grid: np.ndarray  # (T, L+kappa) I-spline values
    treatments: list[str]
    means: dict[str, np.ndarray]
    covariances: dict[str, np.ndarray]
    validation: dict[str, float]  # treatment -> max |survival median gap|


def export_mvn(draws, model, population, treatments, grid=None, horizon=None,
               n_check_draws: int = 4000, seed: int = 0) -> MvnExport:
    """Moment-match the posterior for external spreadsheet-style evaluation.

    A round-trip validator resamples from the fitted Normal and compares the
    reconstructed survival medians with the exact posterior medians on the
    grid; the largest absolute gap per treatment is reported.
    """
    if model.spec.family == "nph_stratified":
        raise ValueError("export is defined for the ph and nph_coef families")
    flat = draws.flat()
    pop, ids = _resolve_ids(model, population, treatments)
    gi = model.group_for(pop)
    basis = model.coef_groups[gi].basis
    if grid is None:
        grid = default_grid(basis.boundary_upper, horizon, basis.knots.all_knots)
    grid = np.asarray(grid, dtype=float)
    inside = np.minimum(grid, basis.boundary_upper)
    iv = basis.i(inside)

    astar = model.astar_draws(flat, gi)
    means, covs, validation = {}, {}, {}
    rng = np.random.default_rng(seed)
    for k in ids:
        shift = model.spline_shift_draws(flat, k)
        eff = astar + shift if isinstance(shift, np.ndarray) else astar
        eta = model.eta_draws(flat, pop, k)
        stacked = np.column_stack([eff, eta])
        mean = stacked.mean(axis=0)
        cov = np.cov(stacked, rowvar=False)
        tiny = np.linalg.eigvalsh(cov).min()
        if stacked.shape[0] < 2 or tiny <= 0:
            raise ValueError(
                "draw covariance is rank-deficient (smallest eigenvalue "
                f"{tiny:.3e}); more draws or ridge regularization needed"
            )
        label = model.data.treatments[k]
        means[label] = mean
        covs[label] = cov
        # round trip: resample, rebuild survival, compare medians
        sim = rng.multivariate_normal(mean, cov, size=n_check_draws)
        alpha_sim = softmax(sim[:, :-1])
        s_sim = np.exp(-(alpha_sim @ iv.T) * np.exp(sim[:, -1])[:, None])
        alpha_exact = softmax(eff)
        s_exact = np.exp(-(alpha_exact @ iv.T) * np.exp(eta)[:, None])
        gap = np.abs(np.median(s_sim, axis=0) - np.median(s_exact, axis=0))
        validation[label] = float(gap.max())
    return MvnExport(
        population=model.data.studies[pop],
        grid=grid,
        basis_grid=iv,
        treatments=[model.data.treatments[k] for k in ids],
        means=means,
        covariances=covs,
        validation=validation,
    )
