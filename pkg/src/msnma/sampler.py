"""Adaptive no-U-turn sampling and convergence diagnostics.

Multinomial tree sampling with dual-averaging step-size adaptation and
windowed (diagonal or dense) metric estimation during warmup. Chains use
independent counter-based RNG streams keyed by (seed, chain), so runs are
bit-reproducible for a fixed configuration and chains never share state.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from types import SimpleNamespace

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import ndtri

__all__ = ["SamplerConfig", "PosteriorDraws", "DiagnosticsReport", "sample", "diagnostics"]

MAX_DEPTH_WARN_FRACTION = 0.25
DIVERGENCE_THRESHOLD = 1000.0


@dataclass(frozen=True)
class SamplerConfig:
    n_chains: int = 4
    n_warmup: int = 1000
    n_sampling: int = 1000
    target_accept: float = 0.8
    max_treedepth: int = 10
    seed: int = 0
    init_radius: float = 0.5
    metric: str = "diag"  # diag | dense

    def __post_init__(self):
        if min(self.n_chains, self.n_warmup, self.n_sampling) < 1:
            raise ValueError("chain/iteration counts must be >= 1")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.metric not in ("diag", "dense"):
            raise ValueError("metric must be 'diag' or 'dense'")


@dataclass
class PosteriorDraws:
    """Retained draws plus everything needed for LOO and diagnostics."""

    draws: np.ndarray  # (chains, iterations, dim)
    param_names: list[str]
    loglik: np.ndarray | None  # (chains, iterations, records)
    divergent: np.ndarray  # (chains, iterations) bool
    max_depth_hit: np.ndarray  # (chains, iterations) bool
    step_sizes: np.ndarray  # (chains,)
    metric: np.ndarray  # (chains, dim) or (chains, dim, dim) inverse-mass
    seed: int

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_iterations(self) -> int:
        return self.draws.shape[1]

    def flat(self) -> np.ndarray:
        """(chains*iterations, dim) matrix of draws."""
        return self.draws.reshape(-1, self.draws.shape[2])

    def flat_loglik(self) -> np.ndarray:
        if self.loglik is None:
            raise ValueError("model did not provide pointwise log-likelihoods")
        return self.loglik.reshape(-1, self.loglik.shape[2])

    def column(self, name: str) -> np.ndarray:
        return self.flat()[:, self.param_names.index(name)]


# ---------------------------------------------------------------------------
# Hamiltonian machinery


class _Metric:
    """Inverse-mass metric; diagonal or dense."""

    def __init__(self, dim: int, kind: str):
        self.kind = kind
        self.dim = dim
        self.inv_mass = np.ones(dim) if kind == "diag" else np.eye(dim)
        self._chol = None

    def update(self, samples: np.ndarray):
        n = samples.shape[0]
        shrink = n / (n + 5.0)
        if self.kind == "diag":
            var = samples.var(axis=0, ddof=1)
            self.inv_mass = shrink * var + (1 - shrink) * 1e-3
        else:
            cov = np.cov(samples, rowvar=False)
            self.inv_mass = shrink * cov + (1 - shrink) * 1e-3 * np.eye(self.dim)
            self._chol = None

    def velocity(self, p: np.ndarray) -> np.ndarray:
        return self.inv_mass * p if self.kind == "diag" else self.inv_mass @ p

    def kinetic(self, p: np.ndarray) -> float:
        with np.errstate(over="ignore", invalid="ignore"):
            return 0.5 * float(p @ self.velocity(p))

    def sample_momentum(self, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal(self.dim)
        if self.kind == "diag":
            return z / np.sqrt(self.inv_mass)
        if self._chol is None:
            self._chol = cho_factor(self.inv_mass, lower=True)
        # p ~ N(0, inv_mass^{-1}): solve L^T p = z with inv_mass = L L^T
        return cho_solve(self._chol, z)


def _leapfrog(logp_grad, z, eps: float, metric: _Metric):
    with np.errstate(over="ignore", invalid="ignore"):
        q, p, grad = z.q, z.p, z.grad
        p = p + 0.5 * eps * grad
        q = q + eps * metric.velocity(p)
        if not np.all(np.isfinite(q)):
            return None
        try:
            logp, grad = logp_grad(q)
        except FloatingPointError:
            return None
        if not np.isfinite(logp):
            return None
        p = p + 0.5 * eps * grad
    return SimpleNamespace(q=q, p=p, grad=grad, logp=logp)


def _find_reasonable_step_size(logp_grad, q0, grad0, logp0, metric, rng) -> float:
    eps = 1.0
    p0 = metric.sample_momentum(rng)
    h0 = logp0 - metric.kinetic(p0)
    z0 = SimpleNamespace(q=q0, p=p0, grad=grad0, logp=logp0)

    def joint(z):
        return z.logp - metric.kinetic(z.p) if z is not None else -np.inf

    z1 = _leapfrog(logp_grad, z0, eps, metric)
    log_ratio = joint(z1) - h0
    direction = 1 if log_ratio > math.log(0.5) else -1
    for _ in range(100):
        eps *= 2.0**direction
        z1 = _leapfrog(logp_grad, z0, eps, metric)
        log_ratio = joint(z1) - h0
        if direction == 1 and not log_ratio > math.log(0.5):
            break
        if direction == -1 and not log_ratio < math.log(0.5):
            break
        if eps > 1e7 or eps < 1e-10:
            break
    return eps


class _DualAveraging:
    def __init__(self, eps0: float, target: float):
        self.mu = math.log(10.0 * eps0)
        self.target = target
        self.log_eps_bar = 0.0
        self.h_bar = 0.0
        self.count = 0
        self.gamma, self.t0, self.kappa = 0.05, 10.0, 0.75
        self.eps = eps0

    def update(self, accept_prob: float) -> float:
        self.count += 1
        m = self.count
        eta = 1.0 / (m + self.t0)
        self.h_bar = (1 - eta) * self.h_bar + eta * (self.target - accept_prob)
        log_eps = self.mu - math.sqrt(m) / self.gamma * self.h_bar
        weight = m**-self.kappa
        self.log_eps_bar = (1 - weight) * self.log_eps_bar + weight * log_eps
        self.eps = math.exp(log_eps)
        return self.eps

    def adapted(self) -> float:
        return math.exp(self.log_eps_bar)


def _adaptation_windows(n_warmup: int):
    """(init_buffer_end, [metric window ends], term_buffer_start)."""
    init_buf, term_buf, base = 75, 50, 25
    if n_warmup < init_buf + term_buf + base:
        init_buf = max(1, int(0.15 * n_warmup))
        term_buf = max(1, int(0.1 * n_warmup))
        base = max(1, n_warmup - init_buf - term_buf)
    ends = []
    pos = init_buf
    size = base
    while pos + size < n_warmup - term_buf:
        next_size = 2 * size
        if pos + size + next_size >= n_warmup - term_buf:
            size = (n_warmup - term_buf) - pos
        ends.append(pos + size)
        pos += size
        size = next_size
    if not ends and n_warmup - term_buf > init_buf:
        ends.append(n_warmup - term_buf)
    return init_buf, ends, n_warmup - term_buf


def _build_tree(logp_grad, z, depth, direction, eps, h0, metric, rng):
    """Recursive doubling; returns a namespace describing the subtree."""
    if depth == 0:
        z1 = _leapfrog(logp_grad, z, direction * eps, metric)
        if z1 is None:
            return SimpleNamespace(valid=False, diverged=True, accept_sum=0.0,
                                   n_leapfrog=1, log_w=-np.inf, minus=z, plus=z,
                                   proposal=z, turning=False)
        h = z1.logp - metric.kinetic(z1.p)
        log_w = h - h0
        diverged = log_w < -DIVERGENCE_THRESHOLD
        accept = min(1.0, math.exp(min(0.0, log_w)))
        return SimpleNamespace(valid=not diverged, diverged=diverged,
                               accept_sum=accept, n_leapfrog=1, log_w=log_w,
                               minus=z1, plus=z1, proposal=z1, turning=False)
    first = _build_tree(logp_grad, z, depth - 1, direction, eps, h0, metric, rng)
    if not first.valid:
        return first
    inner = first.plus if direction == 1 else first.minus
    second = _build_tree(logp_grad, inner, depth - 1, direction, eps, h0, metric, rng)
    accept_sum = first.accept_sum + second.accept_sum
    n_leapfrog = first.n_leapfrog + second.n_leapfrog
    if not second.valid:
        return SimpleNamespace(valid=False, diverged=second.diverged,
                               accept_sum=accept_sum, n_leapfrog=n_leapfrog,
                               log_w=first.log_w, minus=first.minus,
                               plus=first.plus, proposal=first.proposal,
                               turning=second.turning)
    log_w = np.logaddexp(first.log_w, second.log_w)
    take_second = math.log(rng.uniform()) < second.log_w - log_w
    proposal = second.proposal if take_second else first.proposal
    minus = first.minus if direction == 1 else second.minus
    plus = second.plus if direction == 1 else first.plus
    turning = _is_turning(minus, plus, metric)
    return SimpleNamespace(valid=not turning, diverged=False,
                           accept_sum=accept_sum, n_leapfrog=n_leapfrog,
                           log_w=log_w, minus=minus, plus=plus,
                           proposal=proposal, turning=turning)


def _is_turning(minus, plus, metric) -> bool:
    dq = plus.q - minus.q
    return (dq @ metric.velocity(minus.p)) < 0 or (dq @ metric.velocity(plus.p)) < 0


def _nuts_transition(logp_grad, q, logp, grad, eps, metric, max_depth, rng):
    p0 = metric.sample_momentum(rng)
    z0 = SimpleNamespace(q=q, p=p0, grad=grad, logp=logp)
    h0 = logp - metric.kinetic(p0)
    minus = plus = z0
    proposal = z0
    log_w = 0.0
    accept_sum, n_leapfrog = 0.0, 0
    diverged = False
    depth = 0
    while depth < max_depth:
        direction = 1 if rng.uniform() < 0.5 else -1
        edge = plus if direction == 1 else minus
        tree = _build_tree(logp_grad, edge, depth, direction, eps, h0, metric, rng)
        accept_sum += tree.accept_sum
        n_leapfrog += tree.n_leapfrog
        if tree.diverged:
            diverged = True
            break
        if not tree.valid:
            break
        # biased progressive sampling toward the new subtree
        if math.log(rng.uniform()) < tree.log_w - log_w:
            proposal = tree.proposal
        log_w = np.logaddexp(log_w, tree.log_w)
        if direction == 1:
            plus = tree.plus
        else:
            minus = tree.minus
        if _is_turning(minus, plus, metric):
            break
        depth += 1
    accept_prob = accept_sum / max(n_leapfrog, 1)
    return proposal, accept_prob, diverged, depth >= max_depth


# ---------------------------------------------------------------------------
# driver


def _init_chain(model, cfg: SamplerConfig, rng) -> tuple[np.ndarray, float, np.ndarray]:
    last_err = None
    for _ in range(100):
        q = rng.uniform(-cfg.init_radius, cfg.init_radius, size=model.dim)
        try:
            logp, grad = model.logpost_and_grad(q)
        except FloatingPointError as err:
            last_err = err
            continue
        if np.isfinite(logp) and np.all(np.isfinite(grad)):
            return q, logp, grad
    raise RuntimeError(
        f"could not find a finite log-posterior initialization in 100 tries: {last_err}"
    )


def _run_chain(model, cfg: SamplerConfig, chain: int):
    rng = np.random.Generator(np.random.Philox(key=(cfg.seed, chain)))
    q, logp, grad = _init_chain(model, cfg, rng)
    if hasattr(model, "check_gradient"):
        model.check_gradient(q, n_dirs=3, rng=np.random.default_rng(cfg.seed + chain))
    metric = _Metric(model.dim, cfg.metric)
    logp_grad = model.logpost_and_grad

    eps = _find_reasonable_step_size(logp_grad, q, grad, logp, metric, rng)
    da = _DualAveraging(eps, cfg.target_accept)
    init_buf, window_ends, term_start = _adaptation_windows(cfg.n_warmup)
    window_samples: list[np.ndarray] = []

    draws = np.empty((cfg.n_sampling, model.dim))
    divergent = np.zeros(cfg.n_sampling, dtype=bool)
    depth_hit = np.zeros(cfg.n_sampling, dtype=bool)

    for m in range(cfg.n_warmup + cfg.n_sampling):
        warming = m < cfg.n_warmup
        state, accept_prob, diverged, hit = _nuts_transition(
            logp_grad, q, logp, grad, eps, metric, cfg.max_treedepth, rng
        )
        q, logp, grad = state.q, state.logp, state.grad
        if warming:
            eps = da.update(accept_prob)
            if init_buf <= m < term_start:
                window_samples.append(q)
            if (m + 1) in window_ends and len(window_samples) >= 10:
                metric.update(np.asarray(window_samples))
                window_samples.clear()
                eps = _find_reasonable_step_size(logp_grad, q, grad, logp, metric, rng)
                da = _DualAveraging(eps, cfg.target_accept)
            if m == cfg.n_warmup - 1:
                eps = da.adapted()
        else:
            i = m - cfg.n_warmup
            draws[i] = q
            divergent[i] = diverged
            depth_hit[i] = hit
    return draws, divergent, depth_hit, eps, np.array(metric.inv_mass)


def sample(model, config: SamplerConfig | None = None) -> PosteriorDraws:
    """Draw from the model posterior; deterministic given (seed, n_chains).

    The model must expose ``dim``, ``logpost_and_grad`` and (optionally, for
    LOO support) ``pointwise_loglik`` and ``param_names``.
    """
    cfg = config or SamplerConfig()
    results = [_run_chain(model, cfg, c) for c in range(cfg.n_chains)]
    draws = np.stack([r[0] for r in results])
    divergent = np.stack([r[1] for r in results])
    depth_hit = np.stack([r[2] for r in results])
    step_sizes = np.array([r[3] for r in results])
    metric = np.stack([r[4] for r in results])

    loglik = None
    if hasattr(model, "pointwise_loglik"):
        n_rec = model.data.n_records if hasattr(model, "data") else None
        rows = []
        for c in range(cfg.n_chains):
            rows.append([model.pointwise_loglik(draws[c, i]) for i in range(cfg.n_sampling)])
        loglik = np.asarray(rows)
        if n_rec is not None:
            assert loglik.shape[2] == n_rec

    frac = depth_hit.mean()
    if frac > MAX_DEPTH_WARN_FRACTION:
        warnings.warn(
            f"maximum tree depth ({cfg.max_treedepth}) reached on "
            f"{100*frac:.0f}% of post-warmup iterations; consider increasing it",
            RuntimeWarning,
            stacklevel=2,
        )
    names = list(getattr(model, "param_names", [f"q{i}" for i in range(model.dim)]))
    return PosteriorDraws(
        draws=draws,
        param_names=names,
        loglik=loglik,
        divergent=divergent,
        max_depth_hit=depth_hit,
        step_sizes=step_sizes,
        metric=metric,
        seed=cfg.seed,
    )


# ---------------------------------------------------------------------------
# diagnostics


@dataclass
class DiagnosticsReport:
    rhat: np.ndarray
    ess_bulk: np.ndarray
    ess_tail: np.ndarray
    param_names: list[str] = field(default_factory=list)
    n_divergent: int = 0
    flagged: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def max_rhat(self) -> float:
        finite = self.rhat[np.isfinite(self.rhat)]
        return float(finite.max()) if len(finite) else float("nan")

    def summary(self) -> str:
        lines = [
            f"max split-Rhat: {self.max_rhat():.4f}",
            f"min bulk ESS: {np.nanmin(self.ess_bulk):.0f}",
            f"min tail ESS: {np.nanmin(self.ess_tail):.0f}",
            f"divergences: {self.n_divergent}",
        ]
        if self.flagged:
            lines.append("flagged (Rhat > 1.01): " + ", ".join(self.flagged))
        lines.extend(self.notes)
        return "\n".join(lines)


def _split_chains(x: np.ndarray) -> np.ndarray:
    c, n = x.shape
    half = n // 2
    return np.concatenate([x[:, :half], x[:, n - half :]], axis=0)


def _rank_normalize(x: np.ndarray) -> np.ndarray:
    shape = x.shape
    flat = x.ravel()
    order = np.argsort(flat, kind="stable")
    ranks = np.empty_like(flat)
    ranks[order] = np.arange(1, len(flat) + 1, dtype=float)
    # average ranks for exact ties
    vals, inverse, counts = np.unique(flat, return_inverse=True, return_counts=True)
    if len(vals) != len(flat):
        sums = np.zeros(len(vals))
        np.add.at(sums, inverse, ranks)
        ranks = (sums / counts)[inverse]
    return ndtri((ranks - 0.375) / (len(flat) + 0.25)).reshape(shape)


def _basic_rhat(x: np.ndarray) -> float:
    m, n = x.shape
    means = x.mean(axis=1)
    w = x.var(axis=1, ddof=1).mean()
    if w == 0 or not np.isfinite(w):
        return float("nan")
    b = n * means.var(ddof=1)
    var_plus = (n - 1) / n * w + b / n
    return float(math.sqrt(var_plus / w))


def _ess_from_chains(x: np.ndarray) -> float:
    """Effective sample size via Geyer initial monotone sequence."""
    m, n = x.shape
    if n < 4:
        return float("nan")
    w = x.var(axis=1, ddof=1).mean()
    if w == 0 or not np.isfinite(w):
        return float("nan")
    means = x.mean(axis=1)
    var_plus = (n - 1) / n * w + means.var(ddof=1) if m > 1 else w
    # per-chain autocovariance via FFT
    nfft = int(2 ** np.ceil(np.log2(2 * n)))
    centered = x - means[:, None]
    f = np.fft.rfft(centered, nfft, axis=1)
    acov = np.fft.irfft(f * np.conj(f), nfft, axis=1)[:, :n].real / n
    mean_acov = acov.mean(axis=0)
    rho = 1.0 - (w - mean_acov) / var_plus
    # Geyer pairwise sums, truncated at first non-positive, enforced monotone
    max_pairs = (n - 1) // 2
    tau = 1.0
    prev = float("inf")
    for k in range(max_pairs):
        pair = rho[2 * k + 1] + rho[2 * k + 2]
        if pair < 0:
            break
        pair = min(pair, prev)
        prev = pair
        tau += 2.0 * pair
    return float(m * n / tau)


def _tail_indicator_ess(x: np.ndarray) -> float:
    flat = x.ravel()
    q05, q95 = np.quantile(flat, [0.05, 0.95])
    ess_low = _ess_from_chains((x <= q05).astype(float))
    ess_high = _ess_from_chains((x >= q95).astype(float))
    vals = [v for v in (ess_low, ess_high) if np.isfinite(v)]
    return float(min(vals)) if vals else float("nan")


def diagnostics(draws: PosteriorDraws) -> DiagnosticsReport:
    """Split-Rhat (rank-normalized) and bulk/tail ESS per parameter."""
    if draws.n_chains < 2:
        raise ValueError("diagnostics require at least 2 chains")
    if draws.n_iterations < 100:
        raise ValueError("diagnostics require at least 100 draws per chain")
    c, n, dim = draws.draws.shape
    rhat = np.empty(dim)
    ess_bulk = np.empty(dim)
    ess_tail = np.empty(dim)
    notes = []
    for d in range(dim):
        x = draws.draws[:, :, d]
        split = _split_chains(x)
        if np.allclose(split.var(axis=1, ddof=1), 0):
            rhat[d] = float("nan")
            ess_bulk[d] = float("nan")
            ess_tail[d] = float("nan")
            continue
        z = _rank_normalize(split)
        rhat[d] = _basic_rhat(z)
        ess_bulk[d] = _ess_from_chains(z)
        ess_tail[d] = _tail_indicator_ess(split)
    if np.any(~np.isfinite(rhat)):
        bad = [draws.param_names[i] for i in np.flatnonzero(~np.isfinite(rhat))[:5]]
        notes.append(f"Rhat undefined for constant parameters: {', '.join(bad)}")
    flagged = [
        draws.param_names[i]
        for i in range(dim)
        if np.isfinite(rhat[i]) and rhat[i] > 1.01
    ]
    return DiagnosticsReport(
        rhat=rhat,
        ess_bulk=ess_bulk,
        ess_tail=ess_tail,
        param_names=list(draws.param_names),
        n_divergent=int(draws.divergent.sum()),
        flagged=flagged,
        notes=notes,
    )
