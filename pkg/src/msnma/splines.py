"""M-spline and I-spline bases over arbitrary knot vectors.

The basis of order ``kappa`` (polynomial degree ``kappa - 1``) is built by the
classic recursion: order-1 pieces are inter-knot indicator functions scaled to
unit integral, and each higher order blends two neighbouring pieces of the
order below. Every basis function is nonnegative, supported on ``kappa``
consecutive inter-knot intervals, and integrates to exactly 1 over the
boundary interval. The running integral of the basis (the I-spline) therefore
rises monotonically from 0 to 1 per column, so any simplex-weighted
combination of the basis behaves like a density and its I-spline combination
like a CDF.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "KnotVector",
    "AugmentedKnotVector",
    "augment_knots",
    "eval_mspline",
    "eval_ispline",
    "eval_mspline_derivative",
    "MSplineBasis",
    "clear_basis_cache",
]


@dataclass(frozen=True)
class KnotVector:
    """Strictly increasing knot sequence bracketing the modelled interval."""

    boundary_lower: float
    boundary_upper: float
    internal: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "boundary_lower", float(self.boundary_lower))
        object.__setattr__(self, "boundary_upper", float(self.boundary_upper))
        object.__setattr__(self, "internal", tuple(float(t) for t in self.internal))
        seq = (self.boundary_lower, *self.internal, self.boundary_upper)
        if not all(np.isfinite(seq)):
            raise ValueError("knots must be finite")
        if self.boundary_lower < 0:
            raise ValueError("lower boundary knot must be nonnegative")
        if any(b <= a for a, b in zip(seq, seq[1:])):
            raise ValueError(f"knots must be strictly increasing, got {seq}")

    @property
    def n_internal(self) -> int:
        return len(self.internal)

    @property
    def all_knots(self) -> np.ndarray:
        """Breakpoints (lower, internal..., upper), length L + 2."""
        return np.array((self.boundary_lower, *self.internal, self.boundary_upper))

    def with_internal(self, internal) -> "KnotVector":
        return KnotVector(self.boundary_lower, self.boundary_upper, tuple(internal))


@dataclass(frozen=True)
class AugmentedKnotVector:
    """Knot vector padded with ``kappa`` boundary replications at each end."""

    values: tuple[float, ...]
    kappa: int

    @property
    def basis_dim(self) -> int:
        # length is L + 2*kappa, so L + kappa basis functions
        return len(self.values) - self.kappa

    @property
    def boundary_lower(self) -> float:
        return self.values[0]

    @property
    def boundary_upper(self) -> float:
        return self.values[-1]

    @property
    def breakpoints(self) -> np.ndarray:
        """Distinct breakpoints (the original knot vector)."""
        k = self.kappa
        return np.array(self.values[k - 1 : len(self.values) - k + 1])

    def as_array(self) -> np.ndarray:
        return np.array(self.values)


def augment_knots(knots: KnotVector, kappa: int) -> AugmentedKnotVector:
    """Pad ``knots`` with ``kappa`` copies of each boundary knot."""
    if kappa < 1:
        raise ValueError(f"spline order must be >= 1, got {kappa}")
    values = (
        (knots.boundary_lower,) * kappa
        + knots.internal
        + (knots.boundary_upper,) * kappa
    )
    return AugmentedKnotVector(values=values, kappa=int(kappa))


def _validate_times(aug: AugmentedKnotVector, times) -> np.ndarray:
    t = np.atleast_1d(np.asarray(times, dtype=float))
    if t.ndim != 1:
        raise ValueError("times must be one-dimensional")
    lo, up = aug.boundary_lower, aug.boundary_upper
    tol = 1e-12 * max(abs(up), 1.0)
    if np.any(t < lo - tol) or np.any(t > up + tol):
        bad = t[(t < lo - tol) | (t > up + tol)]
        raise ValueError(
            f"times outside boundary interval [{lo}, {up}]: {bad[:5]}"
        )
    return np.clip(t, lo, up)


def _interval_index(breakpoints: np.ndarray, times: np.ndarray) -> np.ndarray:
    # Half-open intervals [bp[i], bp[i+1]); the clip sends t == upper boundary
    # into the final interval, which makes every evaluation there a left limit.
    idx = np.searchsorted(breakpoints, times, side="right") - 1
    return np.clip(idx, 0, len(breakpoints) - 2)


def _mspline_raw(aug: AugmentedKnotVector, times: np.ndarray, derivative: bool = False):
    """Evaluate the order-``kappa`` basis (and optionally its time derivative).

    Iterates the recursion order by order on a shared workspace; the
    elementwise arithmetic matches the naive recursive definition exactly.
    """
    knots = aug.as_array()
    kappa = aug.kappa
    n = len(knots)
    nt = len(times)

    vals = np.zeros((nt, n - 1))
    j = _interval_index(aug.breakpoints, times) + (kappa - 1)
    widths = knots[1:] - knots[:-1]
    vals[np.arange(nt), j] = 1.0 / widths[j]
    derivs = np.zeros_like(vals) if derivative else None

    tt = times[:, None]
    for r in range(2, kappa + 1):
        ncols = n - r
        a = knots[:ncols]
        b = knots[r:]
        denom = (r - 1.0) * (b - a)
        ok = denom > 0
        left = vals[:, :ncols]
        right = vals[:, 1 : ncols + 1]
        num = float(r) * ((tt - a) * left + (b - tt) * right)
        new = np.divide(num, denom, out=np.zeros((nt, ncols)), where=ok)
        if derivative:
            dleft = derivs[:, :ncols]
            dright = derivs[:, 1 : ncols + 1]
            dnum = float(r) * (left + (tt - a) * dleft - right + (b - tt) * dright)
            derivs = np.divide(dnum, denom, out=np.zeros((nt, ncols)), where=ok)
        vals = new
    if derivative:
        return vals, derivs
    return vals


def _gauss_legendre(kappa: int):
    # Exact for polynomials of degree kappa - 1 (the M-spline pieces).
    n = max(1, (kappa + 1) // 2)
    return np.polynomial.legendre.leggauss(n)


def _ispline_raw(aug: AugmentedKnotVector, times: np.ndarray) -> np.ndarray:
    bp = aug.breakpoints
    dim = aug.basis_dim
    gx, gw = _gauss_legendre(aug.kappa)
    nn = len(gx)

    # Exact per-interval integrals of every basis function, accumulated so that
    # cum[i] holds the integral from the lower boundary up to bp[i].
    mids = 0.5 * (bp[1:] + bp[:-1])
    halfs = 0.5 * (bp[1:] - bp[:-1])
    nodes = mids[:, None] + halfs[:, None] * gx[None, :]
    mvals = _mspline_raw(aug, nodes.ravel()).reshape(len(mids), nn, dim)
    per_interval = np.einsum("k,iks->is", gw, mvals) * halfs[:, None]
    cum = np.vstack([np.zeros(dim), np.cumsum(per_interval, axis=0)])

    j = _interval_index(bp, times)
    a = bp[j]
    mids_t = 0.5 * (times + a)
    halfs_t = 0.5 * (times - a)
    nodes_t = mids_t[:, None] + halfs_t[:, None] * gx[None, :]
    mvals_t = _mspline_raw(aug, nodes_t.ravel()).reshape(len(times), nn, dim)
    partial = np.einsum("k,iks->is", gw, mvals_t) * halfs_t[:, None]
    return cum[j] + partial


_CACHE: dict = {}
_CACHE_LIMIT = 256


def clear_basis_cache() -> None:
    _CACHE.clear()


def _cached(kind: str, aug: AugmentedKnotVector, times: np.ndarray) -> np.ndarray:
    key = (kind, aug.values, aug.kappa, times.tobytes())
    hit = _CACHE.get(key)
    if hit is not None:
        return hit
    if kind == "m":
        out = _mspline_raw(aug, times)
    elif kind == "i":
        out = _ispline_raw(aug, times)
    else:
        out = _mspline_raw(aug, times, derivative=True)[1]
    out.setflags(write=False)
    if len(_CACHE) >= _CACHE_LIMIT:
        _CACHE.pop(next(iter(_CACHE)))
    _CACHE[key] = out
    return out


def eval_mspline(aug: AugmentedKnotVector, times) -> np.ndarray:
    """Basis matrix of M-spline values, one row per time, one column per basis.

    At the upper boundary the left limit is returned so hazards stay defined
    at the last observation time and I-splines reach exactly 1 there.
    """
    t = _validate_times(aug, times)
    return _cached("m", aug, t)


def eval_ispline(aug: AugmentedKnotVector, times) -> np.ndarray:
    """Integrated basis: column ``s`` is the integral of M-spline ``s`` from
    the lower boundary, computed with per-interval Gauss-Legendre rules that
    are exact for the polynomial pieces."""
    t = _validate_times(aug, times)
    return _cached("i", aug, t)


def eval_mspline_derivative(aug: AugmentedKnotVector, times) -> np.ndarray:
    """Time derivative of the M-spline basis (left limit at knots)."""
    t = _validate_times(aug, times)
    return _cached("d", aug, t)


class MSplineBasis:
    """Immutable evaluator bundling a knot vector with a spline order."""

    def __init__(self, knots: KnotVector, kappa: int):
        self.knots = knots
        self.kappa = int(kappa)
        self.aug = augment_knots(knots, kappa)

    @property
    def basis_dim(self) -> int:
        return self.aug.basis_dim

    @property
    def boundary_lower(self) -> float:
        return self.knots.boundary_lower

    @property
    def boundary_upper(self) -> float:
        return self.knots.boundary_upper

    def m(self, times) -> np.ndarray:
        return eval_mspline(self.aug, times)

    def i(self, times) -> np.ndarray:
        return eval_ispline(self.aug, times)

    def dm(self, times) -> np.ndarray:
        return eval_mspline_derivative(self.aug, times)

    def __repr__(self):
        return (
            f"MSplineBasis(kappa={self.kappa}, L={self.knots.n_internal}, "
            f"[{self.boundary_lower}, {self.boundary_upper}])"
        )
