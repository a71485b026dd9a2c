"""Knot placement from observed event times, plus placement audits.

Internal knots default to evenly-spaced quantiles of the observed (uncensored)
event times. Quantiles use the h = (n+1)p order-statistic convention
(numpy's "weibull" method): it reproduces each datum exactly at p = rank/(n+1),
which makes quantiles-of-quantiles pooling collapse to the obvious answer for
single-study networks and for studies with identical event-time distributions.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .splines import KnotVector

__all__ = [
    "KnotPlan",
    "KnotWarning",
    "plan_study_knots",
    "plan_common_knots",
    "add_knot",
    "audit_knots",
    "DEFAULT_INTERNAL_KNOTS",
    "QUANTILE_METHOD",
]

DEFAULT_INTERNAL_KNOTS = 7
QUANTILE_METHOD = "weibull"  # h = (n+1)p


@dataclass(frozen=True)
class KnotPlan:
    """Either one knot vector per study or a single network-common vector."""

    per_study: dict[str, KnotVector] | None = None
    common: KnotVector | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if (self.per_study is None) == (self.common is None):
            raise ValueError("exactly one of per_study/common must be set")

    @property
    def is_common(self) -> bool:
        return self.common is not None

    def knots_for(self, study: str) -> KnotVector:
        if self.common is not None:
            return self.common
        try:
            return self.per_study[study]
        except KeyError:
            raise KeyError(f"no knot vector planned for study {study!r}") from None


@dataclass(frozen=True)
class KnotWarning:
    study: str
    knot: float
    distance: float
    gap: float

    def message(self) -> str:
        return (
            f"study {self.study!r}: last observation falls {self.distance:g} "
            f"after internal knot {self.knot:g} ({100*self.distance/self.gap:.1f}% "
            f"of the following {self.gap:g}-wide gap); estimation may struggle"
        )


def _quantile_grid(n_internal: int) -> np.ndarray:
    return np.arange(1, n_internal + 1) / (n_internal + 1)


def _study_events(data, study: str) -> np.ndarray:
    idx = data.studies.index(study)
    mask = (data.study_idx == idx) & (data.status == 1)
    return np.sort(data.time[mask])


def _study_last_observation(data, study: str) -> float:
    idx = data.studies.index(study)
    return float(data.time[data.study_idx == idx].max())


def _dedup_internal(internal: np.ndarray, upper: float, resolution: float) -> tuple[float, ...]:
    """Force strict monotonicity, nudging collided quantiles apart by a small
    fraction of the data's time resolution. Errors if there is no room."""
    out = np.array(internal, dtype=float)
    eps = resolution * 1e-3
    for i in range(1, len(out)):
        if out[i] <= out[i - 1]:
            out[i] = out[i - 1] + eps
    if len(out) and out[-1] >= upper:
        out[-1] = upper - eps
        for i in range(len(out) - 2, -1, -1):
            if out[i] >= out[i + 1]:
                out[i] = out[i + 1] - eps
    if (len(out) and out[0] <= 0) or np.any(np.diff(out) <= 0) or (
        len(out) and out[-1] >= upper
    ):
        raise ValueError(
            "could not form strictly increasing internal knots after "
            f"de-duplication (quantiles {internal}); reduce the number of knots"
        )
    return tuple(out)


def _time_resolution(events: np.ndarray) -> float:
    gaps = np.diff(np.unique(events))
    return float(gaps.min()) if len(gaps) else 1.0


def plan_study_knots(data, study: str, n_internal: int = DEFAULT_INTERNAL_KNOTS) -> KnotVector:
    """Knots for one study: boundaries at 0 and its last event/censoring time,
    internal knots at evenly-spaced quantiles of its observed event times."""
    events = _study_events(data, study)
    n_distinct = len(np.unique(events))
    if n_distinct < n_internal + 1:
        raise ValueError(
            f"study {study!r} has only {n_distinct} distinct event times; "
            f"cannot place {n_internal} internal knots (need at least "
            f"{n_internal + 1} distinct event times; try a smaller number of knots)"
        )
    upper = _study_last_observation(data, study)
    if n_internal == 0:
        return KnotVector(0.0, upper, ())
    qs = np.quantile(events, _quantile_grid(n_internal), method=QUANTILE_METHOD)
    internal = _dedup_internal(qs, upper, _time_resolution(events))
    return KnotVector(0.0, upper, internal)


def plan_common_knots(data, n_internal: int = DEFAULT_INTERNAL_KNOTS) -> KnotVector:
    """Network-common knots: per-study event-time quantiles on a shared grid,
    pooled (unweighted) across studies, then the same grid applied to the pool.
    Boundaries at 0 and the overall last observation time."""
    grid = _quantile_grid(n_internal)
    pooled = []
    for study in data.studies:
        events = _study_events(data, study)
        if len(np.unique(events)) < 2:
            raise ValueError(
                f"study {study!r} has fewer than 2 distinct event times; "
                "cannot compute its event-time quantiles"
            )
        pooled.append(np.quantile(events, grid, method=QUANTILE_METHOD))
    pooled = np.sort(np.concatenate(pooled))
    upper = float(data.time.max())
    if n_internal == 0:
        return KnotVector(0.0, upper, ())
    qs = np.quantile(pooled, grid, method=QUANTILE_METHOD)
    internal = _dedup_internal(qs, upper, _time_resolution(pooled))
    return KnotVector(0.0, upper, internal)


def make_plan(data, family: str, n_internal: int = DEFAULT_INTERNAL_KNOTS) -> KnotPlan:
    """Default plan for a model family: common knots for coefficient-effects
    models, independent per-study knots otherwise."""
    prov = {"quantile_method": QUANTILE_METHOD, "n_internal": n_internal,
            "pooling": "unweighted", "overrides": []}
    if family == "nph_coef":
        return KnotPlan(common=plan_common_knots(data, n_internal),
                        provenance={**prov, "kind": "common"})
    per = {s: plan_study_knots(data, s, n_internal) for s in data.studies}
    return KnotPlan(per_study=per, provenance={**prov, "kind": "per_study"})


def add_knot(plan: KnotPlan, time: float, study: str | None = None) -> KnotPlan:
    """Insert a manual internal knot, recording the override in provenance."""
    time = float(time)

    def _insert(kv: KnotVector) -> KnotVector:
        if not (kv.boundary_lower < time < kv.boundary_upper):
            raise ValueError(
                f"knot {time} outside open boundary interval "
                f"({kv.boundary_lower}, {kv.boundary_upper})"
            )
        if time in kv.internal:
            raise ValueError(f"knot {time} duplicates an existing internal knot")
        return kv.with_internal(tuple(sorted((*kv.internal, time))))

    prov = dict(plan.provenance)
    prov["overrides"] = list(prov.get("overrides", [])) + [
        {"time": time, "study": study}
    ]
    if plan.common is not None:
        if study is not None:
            raise ValueError("plan uses common knots; do not pass a study")
        return replace(plan, common=_insert(plan.common), provenance=prov)
    if study is None:
        raise ValueError("per-study plan requires a study for add_knot")
    per = dict(plan.per_study)
    per[study] = _insert(per[study])
    return replace(plan, per_study=per, provenance=prov)


def audit_knots(plan: KnotPlan, data, threshold: float = 0.1) -> list[KnotWarning]:
    """Flag studies whose last observation lands just after an internal knot.

    A warning is emitted when the last observation time of a study falls
    within ``threshold`` of the inter-knot gap following any internal knot.
    Advisory only; the plan is never modified.
    """
    warnings: list[KnotWarning] = []
    for study in data.studies:
        kv = plan.knots_for(study)
        t_last = _study_last_observation(data, study)
        knots = kv.all_knots
        for i in range(1, len(knots) - 1):  # internal knots only
            gap = knots[i + 1] - knots[i]
            dist = t_last - knots[i]
            if 0 <= dist <= threshold * gap:
                warnings.append(
                    KnotWarning(study=study, knot=float(knots[i]),
                                distance=float(dist), gap=float(gap))
                )
    return warnings
