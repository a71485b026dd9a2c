"""Joint log-posterior (with analytic gradient) for spline-hazard NMA models.

Three families share one machinery:

* ``ph``             -- common spline coefficients per study (proportional
                        hazards between arms);
* ``nph_stratified`` -- independent coefficients per (study, arm) or other
                        discrete strata;
* ``nph_coef``       -- treatment effects on the inverse-softmax coefficients
                        with a symmetric multivariate random-walk prior,
                        requiring a network-common knot vector.

Sampling happens on an unconstrained vector: positive scales enter through
their logs (with Jacobian), random-walk coefficient vectors and random-effect
deviates through standardized increments (non-centered), so the gradient is a
single reverse pass through cheap linear reconstructions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from types import SimpleNamespace

import numpy as np

from .data import SurvivalDataset
from .knots import KnotPlan, make_plan
from .priors import (
    LOG_2PI,
    constant_hazard_phi,
    smoothing_weights,
    softmax,
)
from .splines import MSplineBasis

__all__ = ["PriorSettings", "ModelSpec", "NmaModel", "build_model"]

FAMILIES = ("ph", "nph_stratified", "nph_coef")
EFFECTS = ("fixed", "random")
INCONSISTENCY = ("consistency", "ume", "nodesplit")

SQRT_HALF = math.sqrt(0.5)


@dataclass(frozen=True)
class PriorSettings:
    """Prior scales; normals are zero-mean, scale parameters half-Normal."""

    mu_sd: float = 10.0
    d_sd: float = 10.0
    theta_sd: float = 10.0
    beta_sd: float = 10.0
    tau_scale: float = 1.0
    sigma_scale: float = 1.0
    sigma_alpha_scale: float = 1.0
    b_coef_scale: float = 1.0


@dataclass(frozen=True)
class ModelSpec:
    family: str = "ph"
    effects: str = "fixed"
    inconsistency: str = "consistency"
    nodesplit_pair: tuple[str, str] | None = None
    kappa: int = 4
    n_internal_knots: int = 7
    knot_plan: KnotPlan | None = None
    covariates_prognostic: tuple[str, ...] = ()
    covariates_effect_modifier: tuple[str, ...] = ()
    covariates_spline: tuple[str, ...] = ()
    stratify_by: tuple[str, ...] = ("treatment",)
    priors: PriorSettings = field(default_factory=PriorSettings)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}")
        if self.effects not in EFFECTS:
            raise ValueError(f"effects must be one of {EFFECTS}")
        if self.inconsistency not in INCONSISTENCY:
            raise ValueError(f"inconsistency must be one of {INCONSISTENCY}")
        if self.inconsistency == "nodesplit" and self.nodesplit_pair is None:
            raise ValueError("nodesplit requires nodesplit_pair=(a, b)")
        if self.kappa < 1:
            raise ValueError("kappa must be >= 1")
        if self.covariates_spline and self.family != "nph_coef":
            raise ValueError("covariates on spline coefficients need family='nph_coef'")


@dataclass
class CoefGroup:
    """One spline coefficient vector with its own random-walk prior."""

    key: str
    study: int
    basis: MSplineBasis
    phi: np.ndarray
    sqrt_w: np.ndarray
    z_offset: int  # offset into the flat u_z block

    @property
    def n_steps(self) -> int:
        return self.basis.basis_dim - 1


@dataclass
class RecordGroup:
    """Records sharing study, treatment and coefficient group."""

    study: int
    treatment: int
    coef_group: int
    rows: np.ndarray
    m: np.ndarray
    iv: np.ndarray
    status: np.ndarray
    times: np.ndarray
    d_idx: int  # index into the d block, -1 for a zero treatment term
    add_theta: bool
    re_idx: int  # index into deviate-entry table, -1 if none
    x_prog: np.ndarray | None
    x_em: np.ndarray | None
    x_spl: np.ndarray | None


class _Layout:
    def __init__(self):
        self.slices: dict[str, slice] = {}
        self.shapes: dict[str, tuple] = {}
        self.names: list[str] = []
        self.dim = 0

    def add(self, key: str, shape: tuple, names):
        size = int(np.prod(shape)) if shape else 1
        self.slices[key] = slice(self.dim, self.dim + size)
        self.shapes[key] = shape
        self.names.extend(names)
        self.dim += size

    def has(self, key: str) -> bool:
        return key in self.slices

    def get(self, q: np.ndarray, key: str) -> np.ndarray:
        return q[..., self.slices[key]].reshape(q.shape[:-1] + self.shapes[key])


def build_model(spec: ModelSpec, data: SurvivalDataset) -> "NmaModel":
    return NmaModel(spec, data)


class NmaModel:
    """Immutable compiled model: basis matrices, parameter layout, gradient."""

    def __init__(self, spec: ModelSpec, data: SurvivalDataset):
        self.data = data
        plan = spec.knot_plan
        if plan is None:
            plan = make_plan(data, spec.family, spec.n_internal_knots)
        if spec.family == "nph_coef" and not plan.is_common:
            raise ValueError(
                "treatment effects on spline coefficients require a common knot plan"
            )
        self.spec = replace(spec, knot_plan=plan)
        self._check_covariates()
        self._build_coef_groups()
        self._build_effects()
        self._build_layout()
        self._build_record_groups()

    # ------------------------------------------------------------------
    # construction

    def _check_covariates(self):
        spec, data = self.spec, self.data
        wanted = set(
            spec.covariates_prognostic
            + spec.covariates_effect_modifier
            + spec.covariates_spline
            + tuple(
                c
                for c in spec.stratify_by
                if c != "treatment" and spec.family == "nph_stratified"
            )
        )
        missing = wanted - set(data.covariate_names)
        if missing:
            raise ValueError(f"covariates not in data: {sorted(missing)}")
        self.cov_means: dict[str, float] = {}
        if wanted:
            for name in data.covariate_names:
                col = data.covariates[:, data.covariate_names.index(name)]
                self.cov_means[name] = float(col.mean())

    def _cov_matrix(self, names, rows, center=True) -> np.ndarray | None:
        if not names:
            return None
        data = self.data
        cols = []
        for n in names:
            col = data.covariates[rows, data.covariate_names.index(n)]
            cols.append(col - self.cov_means[n] if center else col)
        return np.column_stack(cols)

    def _build_coef_groups(self):
        spec, data = self.spec, self.data
        plan = spec.knot_plan
        groups: list[CoefGroup] = []
        self._group_of_record = np.full(data.n_records, -1, dtype=int)
        key_to_idx: dict = {}

        def group_key(i: int):
            j = int(data.study_idx[i])
            if spec.family in ("ph", "nph_coef"):
                return (j,)
            parts: list = [j]
            for comp in spec.stratify_by:
                if comp == "treatment":
                    parts.append(int(data.treatment_idx[i]))
                else:
                    c = data.covariates[i, data.covariate_names.index(comp)]
                    if c != int(c):
                        raise ValueError(
                            f"stratifying covariate {comp!r} must be discrete"
                        )
                    parts.append(int(c))
            return tuple(parts)

        offset = 0
        for i in range(data.n_records):
            key = group_key(i)
            if key not in key_to_idx:
                j = key[0]
                kv = plan.knots_for(data.studies[j])
                basis = MSplineBasis(kv, spec.kappa)
                label = data.studies[j] + "".join(f".{p}" for p in key[1:])
                groups.append(
                    CoefGroup(
                        key=label,
                        study=int(j),
                        basis=basis,
                        phi=constant_hazard_phi(kv, spec.kappa),
                        sqrt_w=np.sqrt(smoothing_weights(kv, spec.kappa)),
                        z_offset=offset,
                    )
                )
                offset += groups[-1].n_steps
                key_to_idx[key] = len(groups) - 1
            self._group_of_record[i] = key_to_idx[key]
        self.coef_groups = groups
        self.n_coef_steps = offset
        if spec.family == "nph_coef":
            self.common_steps = groups[0].n_steps
            self.common_sqrt_w = groups[0].sqrt_w

    def _build_effects(self):
        spec, data = self.spec, self.data
        self.ume_pairs: list[tuple[int, int]] = []
        if spec.inconsistency == "ume":
            seen: dict[tuple[int, int], int] = {}
            for j in range(data.J):
                a = data.arm1_treatment(j)
                for k in data.study_arms(j):
                    if int(k) != a and (a, int(k)) not in seen:
                        seen[(a, int(k))] = len(seen)
                        self.ume_pairs.append((a, int(k)))
            self._ume_index = seen
        if spec.inconsistency == "nodesplit":
            a_lbl, b_lbl = spec.nodesplit_pair
            try:
                a = data.treatments.index(a_lbl)
                b = data.treatments.index(b_lbl)
            except ValueError:
                raise ValueError(
                    f"nodesplit pair {spec.nodesplit_pair} not in treatments "
                    f"{data.treatments}"
                ) from None
            self.nodesplit_ids = (a, b)
            has_both = [
                j
                for j in range(data.J)
                if {a, b} <= set(data.study_arms(j).tolist())
            ]
            if not has_both:
                raise ValueError(
                    f"no study contains both arms {a_lbl!r} and {b_lbl!r}; "
                    "node-splitting is not identified"
                )
            self._nodesplit_studies = set(has_both)

        # deviate entries for random effects: one per (study, non-baseline arm)
        self.re_entries: list[SimpleNamespace] = []
        self.re_shared: dict[int, int] = {}  # study -> index into re_z0 block
        if spec.effects == "random":
            for j in range(data.J):
                base = 0 if spec.inconsistency != "ume" else data.arm1_treatment(j)
                arms = [int(k) for k in data.study_arms(j) if int(k) != base]
                if len(arms) >= 2:
                    self.re_shared[j] = len(self.re_shared)
                for k in arms:
                    self.re_entries.append(
                        SimpleNamespace(
                            study=j,
                            treatment=k,
                            d_idx=self._d_index(j, k),
                            shared=j in self.re_shared,
                        )
                    )

    def _d_index(self, j: int, k: int) -> int:
        """Index into the d block for the treatment term of arm k in study j."""
        spec, data = self.spec, self.data
        if spec.inconsistency == "ume":
            a = data.arm1_treatment(j)
            if k == a:
                return -1
            return self._ume_index[(a, k)]
        return k - 1 if k != 0 else -1

    def _build_layout(self):
        spec, data = self.spec, self.data
        lay = _Layout()
        lay.add("mu", (data.J,), [f"mu[{s}]" for s in data.studies])
        if spec.inconsistency == "ume":
            names = [
                f"d[{data.treatments[a]}:{data.treatments[b]}]"
                for a, b in self.ume_pairs
            ]
            lay.add("d", (len(self.ume_pairs),), names)
        else:
            lay.add("d", (data.K - 1,), [f"d[{t}]" for t in data.treatments[1:]])
        if spec.inconsistency == "nodesplit":
            a, b = self.nodesplit_ids
            lay.add("theta", (), [f"theta[{data.treatments[a]}:{data.treatments[b]}]"])
        if spec.effects == "random":
            lay.add("tau_log", (), ["tau_log"])
            if self.re_entries:
                lay.add(
                    "re_z",
                    (len(self.re_entries),),
                    [
                        f"re_z[{data.studies[e.study]}:{data.treatments[e.treatment]}]"
                        for e in self.re_entries
                    ],
                )
            if self.re_shared:
                lay.add(
                    "re_z0",
                    (len(self.re_shared),),
                    [f"re_z0[{data.studies[j]}]" for j in self.re_shared],
                )
        uz_names = []
        for g in self.coef_groups:
            uz_names.extend(f"u_z[{g.key}.{l}]" for l in range(1, g.n_steps + 1))
        lay.add("u_z", (self.n_coef_steps,), uz_names)
        lay.add(
            "sigma_log",
            (len(self.coef_groups),),
            [f"sigma_log[{g.key}]" for g in self.coef_groups],
        )
        if spec.family == "nph_coef":
            nsteps = self.common_steps
            names = []
            for l in range(1, nsteps + 1):
                names.append(f"gamma_z[{l}.shared]")
                names.extend(f"gamma_z[{l}.{t}]" for t in data.treatments)
            lay.add("gamma_z", (nsteps, data.K + 1), names)
            lay.add("sigma_alpha_log", (), ["sigma_alpha_log"])
        p1 = len(spec.covariates_prognostic)
        if p1:
            lay.add("beta1", (p1,), [f"beta1[{c}]" for c in spec.covariates_prognostic])
        p2 = len(spec.covariates_effect_modifier)
        if p2:
            names = [
                f"beta2[{c}:{t}]"
                for t in data.treatments[1:]
                for c in spec.covariates_effect_modifier
            ]
            lay.add("beta2", (data.K - 1, p2), names)
        ps = len(spec.covariates_spline)
        if ps:
            nsteps = self.common_steps
            lay.add(
                "b1_z",
                (ps, nsteps),
                [
                    f"b1_z[{c}.{l}]"
                    for c in spec.covariates_spline
                    for l in range(1, nsteps + 1)
                ],
            )
            lay.add(
                "b1_sigma_log",
                (ps,),
                [f"b1_sigma_log[{c}]" for c in spec.covariates_spline],
            )
            lay.add(
                "b2_z",
                (data.K - 1, ps, nsteps),
                [
                    f"b2_z[{t}.{c}.{l}]"
                    for t in data.treatments[1:]
                    for c in spec.covariates_spline
                    for l in range(1, nsteps + 1)
                ],
            )
            lay.add(
                "b2_sigma_log",
                (data.K - 1, ps),
                [
                    f"b2_sigma_log[{t}.{c}]"
                    for t in data.treatments[1:]
                    for c in spec.covariates_spline
                ],
            )
        self.layout = lay

    def _build_record_groups(self):
        spec, data = self.spec, self.data
        re_lookup = {
            (e.study, e.treatment): i for i, e in enumerate(self.re_entries)
        }
        self.record_groups: list[RecordGroup] = []
        keys: dict[tuple[int, int, int], list[int]] = {}
        for i in range(data.n_records):
            key = (
                int(data.study_idx[i]),
                int(data.treatment_idx[i]),
                int(self._group_of_record[i]),
            )
            keys.setdefault(key, []).append(i)
        for (j, k, cg), row_list in sorted(keys.items()):
            rows = np.array(row_list)
            basis = self.coef_groups[cg].basis
            times = data.time[rows]
            if np.any(times > basis.boundary_upper):
                bad = rows[times > basis.boundary_upper][:3]
                raise ValueError(
                    f"records {bad.tolist()} in study {data.studies[j]!r} lie "
                    f"beyond the upper boundary knot {basis.boundary_upper}"
                )
            add_theta = (
                spec.inconsistency == "nodesplit"
                and j in self._nodesplit_studies
                and k == self.nodesplit_ids[1]
            )
            self.record_groups.append(
                RecordGroup(
                    study=j,
                    treatment=k,
                    coef_group=cg,
                    rows=rows,
                    m=basis.m(times),
                    iv=basis.i(times),
                    status=data.status[rows].astype(float),
                    times=times,
                    d_idx=self._d_index(j, k),
                    add_theta=add_theta,
                    re_idx=re_lookup.get((j, k), -1),
                    x_prog=self._cov_matrix(spec.covariates_prognostic, rows),
                    x_em=self._cov_matrix(spec.covariates_effect_modifier, rows),
                    x_spl=self._cov_matrix(spec.covariates_spline, rows),
                )
            )

    # ------------------------------------------------------------------
    # parameter handling

    @property
    def dim(self) -> int:
        return self.layout.dim

    @property
    def param_names(self) -> list[str]:
        return self.layout.names

    def _decode(self, q: np.ndarray) -> SimpleNamespace:
        lay, spec = self.layout, self.spec
        d = SimpleNamespace()
        d.mu = lay.get(q, "mu")
        d.dvec = lay.get(q, "d")
        d.theta = float(lay.get(q, "theta")) if lay.has("theta") else 0.0
        d.tau = float(np.exp(lay.get(q, "tau_log"))) if lay.has("tau_log") else None
        d.re_z = lay.get(q, "re_z") if lay.has("re_z") else None
        d.re_z0 = lay.get(q, "re_z0") if lay.has("re_z0") else None
        uz = lay.get(q, "u_z")
        d.sigma = np.exp(lay.get(q, "sigma_log"))
        d.z_g, d.astar = [], []
        for gi, g in enumerate(self.coef_groups):
            z = uz[g.z_offset : g.z_offset + g.n_steps]
            d.z_g.append(z)
            d.astar.append(g.phi + np.cumsum(d.sigma[gi] * g.sqrt_w * z))
        if spec.family == "nph_coef":
            d.sigma_alpha = float(np.exp(lay.get(q, "sigma_alpha_log")))
            d.gamma_z = lay.get(q, "gamma_z")  # (steps, K+1)
            scale = d.sigma_alpha * self.common_sqrt_w * SQRT_HALF
            v = scale[:, None] * (d.gamma_z[:, 1:] + d.gamma_z[:, :1])
            d.gamma = np.cumsum(v, axis=0)  # (steps, K)
        else:
            d.gamma = None
        d.beta1 = lay.get(q, "beta1") if lay.has("beta1") else None
        d.beta2 = lay.get(q, "beta2") if lay.has("beta2") else None
        if lay.has("b1_z"):
            d.b1_z = lay.get(q, "b1_z")
            d.b1_sigma = np.exp(lay.get(q, "b1_sigma_log"))
            d.B1 = np.cumsum(
                d.b1_sigma[:, None] * self.common_sqrt_w[None, :] * d.b1_z, axis=1
            )
            d.b2_z = lay.get(q, "b2_z")
            d.b2_sigma = np.exp(lay.get(q, "b2_sigma_log"))
            d.B2 = np.cumsum(
                d.b2_sigma[:, :, None] * self.common_sqrt_w[None, None, :] * d.b2_z,
                axis=2,
            )
        else:
            d.B1 = None
        # random-effect deviates
        d.delta = None
        if spec.effects == "random":
            vals = np.zeros(len(self.re_entries))
            combos = np.zeros(len(self.re_entries))
            for i, e in enumerate(self.re_entries):
                z = d.re_z[i]
                combo = (
                    (z + d.re_z0[self.re_shared[e.study]]) * SQRT_HALF
                    if e.shared
                    else z
                )
                combos[i] = combo
                mean = d.dvec[e.d_idx] if e.d_idx >= 0 else 0.0
                vals[i] = mean + d.tau * combo
            d.delta = vals
            d.re_combo = combos
        return d

    def _treatment_term(self, dec, rg: RecordGroup) -> float:
        if rg.re_idx >= 0:
            return float(dec.delta[rg.re_idx])
        return float(dec.dvec[rg.d_idx]) if rg.d_idx >= 0 else 0.0

    def _spline_shift(self, dec, rg: RecordGroup):
        """Per-record shift added to alpha* for this group, or a shared vector."""
        shift = None
        if dec.gamma is not None:
            shift = dec.gamma[:, rg.treatment]
        if dec.B1 is not None and rg.x_spl is not None:
            beff = dec.B1
            if rg.treatment != 0:
                beff = beff + dec.B2[rg.treatment - 1]
            per_rec = rg.x_spl @ beff
            if shift is not None:
                per_rec = per_rec + shift
            return ("record", per_rec)
        return ("shared", shift)

    # ------------------------------------------------------------------
    # likelihood and posterior

    def _new_accum(self):
        a = SimpleNamespace()
        a.mu = np.zeros(self.data.J)
        a.dvec = np.zeros(self.layout.shapes["d"][0])
        a.theta = 0.0
        a.delta = np.zeros(len(self.re_entries))
        a.astar = [np.zeros(g.n_steps) for g in self.coef_groups]
        if self.spec.family == "nph_coef":
            a.gamma = np.zeros((self.common_steps, self.data.K))
        if self.layout.has("beta1"):
            a.beta1 = np.zeros(self.layout.shapes["beta1"])
        if self.layout.has("beta2"):
            a.beta2 = np.zeros(self.layout.shapes["beta2"])
        if self.layout.has("b1_z"):
            a.B1 = np.zeros(self.layout.shapes["b1_z"])
            a.B2 = np.zeros(self.layout.shapes["b2_z"])
        return a

    def _likelihood(self, dec, accum=None, pointwise=None, only_row: int | None = None):
        """Log-likelihood; optionally accumulates gradients and per-record values."""
        total = 0.0
        for rg in self.record_groups:
            sel = slice(None)
            if only_row is not None:
                hits = np.flatnonzero(rg.rows == only_row)
                if not len(hits):
                    continue
                sel = hits
            m, iv, c = rg.m[sel], rg.iv[sel], rg.status[sel]
            eta = dec.mu[rg.study] + self._treatment_term(dec, rg)
            if rg.add_theta:
                eta = eta + dec.theta
            if rg.x_prog is not None:
                eta = eta + rg.x_prog[sel] @ dec.beta1
            if rg.x_em is not None and rg.treatment != 0:
                eta = eta + rg.x_em[sel] @ dec.beta2[rg.treatment - 1]
            eta = np.broadcast_to(np.asarray(eta, dtype=float), c.shape).copy()
            expeta = np.exp(eta)

            kind, shift = self._spline_shift(dec, rg)
            base = dec.astar[rg.coef_group]
            if kind == "record":
                smat = base[None, :] + shift[sel]
                amat = softmax(smat)
                malpha = np.einsum("ij,ij->i", m, amat)
                ialpha = np.einsum("ij,ij->i", iv, amat)
            else:
                svec = base if shift is None else base + shift
                alpha = softmax(svec)
                malpha = m @ alpha
                ialpha = iv @ alpha

            bad = (malpha <= 0) & (c > 0)
            if np.any(bad):
                idx = rg.rows[sel][bad][0]
                raise FloatingPointError(
                    f"hazard is zero at event record {int(idx)} "
                    f"(t={self.data.time[idx]}); coefficients degenerate"
                )
            with np.errstate(divide="ignore"):
                loghaz = np.where(c > 0, np.log(np.where(malpha > 0, malpha, 1.0)), 0.0)
            ll_rows = c * (loghaz + eta) - ialpha * expeta
            total += float(ll_rows.sum())
            if pointwise is not None:
                pointwise[rg.rows[sel]] = ll_rows

            if accum is None:
                continue
            geta = c - ialpha * expeta
            s = float(geta.sum())
            accum.mu[rg.study] += s
            if rg.re_idx >= 0:
                accum.delta[rg.re_idx] += s
            elif rg.d_idx >= 0:
                accum.dvec[rg.d_idx] += s
            if rg.add_theta:
                accum.theta += s
            if rg.x_prog is not None:
                accum.beta1 += rg.x_prog[sel].T @ geta
            if rg.x_em is not None and rg.treatment != 0:
                accum.beta2[rg.treatment - 1] += rg.x_em[sel].T @ geta

            ratio = np.where(c > 0, c / np.where(malpha > 0, malpha, 1.0), 0.0)
            if kind == "record":
                ga = ratio[:, None] * m - expeta[:, None] * iv
                gs = amat * (ga - np.einsum("ij,ij->i", ga, amat)[:, None])
                gs = gs[:, 1:]
                gsum = gs.sum(axis=0)
                accum.astar[rg.coef_group] += gsum
                accum.gamma[:, rg.treatment] += gsum
                accum.B1 += rg.x_spl[sel].T @ gs
                if rg.treatment != 0:
                    accum.B2[rg.treatment - 1] += rg.x_spl[sel].T @ gs
            else:
                galpha = m.T @ ratio - iv.T @ expeta
                gsv = (alpha * (galpha - galpha @ alpha))[1:]
                accum.astar[rg.coef_group] += gsv
                if dec.gamma is not None:
                    accum.gamma[:, rg.treatment] += gsv
        return total

    def _finalize_grad(self, dec, accum) -> np.ndarray:
        lay = self.layout
        g = np.zeros(self.dim)
        g[lay.slices["mu"]] += accum.mu
        g[lay.slices["d"]] += accum.dvec
        if lay.has("theta"):
            g[lay.slices["theta"]] += accum.theta
        if self.spec.effects == "random" and self.re_entries:
            gz = np.zeros(len(self.re_entries))
            gz0 = np.zeros(len(self.re_shared))
            gtau = 0.0
            for i, e in enumerate(self.re_entries):
                gd = accum.delta[i]
                if e.d_idx >= 0:
                    g[lay.slices["d"].start + e.d_idx] += gd
                factor = SQRT_HALF if e.shared else 1.0
                gz[i] += gd * dec.tau * factor
                if e.shared:
                    gz0[self.re_shared[e.study]] += gd * dec.tau * factor
                gtau += gd * dec.re_combo[i]
            g[lay.slices["re_z"]] += gz
            if lay.has("re_z0"):
                g[lay.slices["re_z0"]] += gz0
            g[lay.slices["tau_log"]] += gtau * dec.tau
        uz_sl = lay.slices["u_z"]
        gsig = np.zeros(len(self.coef_groups))
        for gi, grp in enumerate(self.coef_groups):
            ga = accum.astar[gi]
            rc = np.cumsum(ga[::-1])[::-1]
            start = uz_sl.start + grp.z_offset
            g[start : start + grp.n_steps] += dec.sigma[gi] * grp.sqrt_w * rc
            gsig[gi] += dec.sigma[gi] * float(np.sum(grp.sqrt_w * dec.z_g[gi] * rc))
        g[lay.slices["sigma_log"]] += gsig
        if self.spec.family == "nph_coef":
            rcg = np.cumsum(accum.gamma[::-1, :], axis=0)[::-1, :]  # (steps, K)
            scale = dec.sigma_alpha * self.common_sqrt_w * SQRT_HALF
            gz = np.empty((self.common_steps, self.data.K + 1))
            gz[:, 1:] = scale[:, None] * rcg
            gz[:, 0] = scale * rcg.sum(axis=1)
            g[lay.slices["gamma_z"]] += gz.ravel()
            combo = dec.gamma_z[:, 1:] + dec.gamma_z[:, :1]
            gsa = float(
                np.sum((self.common_sqrt_w * SQRT_HALF)[:, None] * combo * rcg)
            )
            g[lay.slices["sigma_alpha_log"]] += gsa * dec.sigma_alpha
        if lay.has("beta1"):
            g[lay.slices["beta1"]] += accum.beta1
        if lay.has("beta2"):
            g[lay.slices["beta2"]] += accum.beta2.ravel()
        if lay.has("b1_z"):
            sw = self.common_sqrt_w
            rc1 = np.cumsum(accum.B1[:, ::-1], axis=1)[:, ::-1]  # (ps, steps)
            g[lay.slices["b1_z"]] += (dec.b1_sigma[:, None] * sw[None, :] * rc1).ravel()
            g[lay.slices["b1_sigma_log"]] += dec.b1_sigma * np.einsum(
                "ps,ps->p", sw[None, :] * dec.b1_z, rc1
            )
            rc2 = np.cumsum(accum.B2[:, :, ::-1], axis=2)[:, :, ::-1]
            g[lay.slices["b2_z"]] += (
                dec.b2_sigma[:, :, None] * sw[None, None, :] * rc2
            ).ravel()
            g[lay.slices["b2_sigma_log"]] += (
                dec.b2_sigma
                * np.einsum("kps,kps->kp", sw[None, None, :] * dec.b2_z, rc2)
            ).ravel()
        return g

    def _normal_block(self, q, g, key, sd) -> float:
        if not self.layout.has(key):
            return 0.0
        sl = self.layout.slices[key]
        x = q[sl]
        g[sl] += -x / sd**2
        return float(
            -0.5 * np.sum((x / sd) ** 2) - x.size * (math.log(sd) + 0.5 * LOG_2PI)
        )

    def _z_block(self, q, g, key) -> float:
        if not self.layout.has(key):
            return 0.0
        sl = self.layout.slices[key]
        x = q[sl]
        g[sl] += -x
        return float(-0.5 * np.sum(x * x) - x.size * 0.5 * LOG_2PI)

    def _halfnormal_log_block(self, q, g, key, scale) -> float:
        """Half-Normal(0, scale^2) prior on exp(q[key]) plus the log Jacobian."""
        if not self.layout.has(key):
            return 0.0
        sl = self.layout.slices[key]
        t = q[sl]
        s = np.exp(t)
        g[sl] += 1.0 - (s / scale) ** 2
        const = 0.5 * math.log(2.0 / math.pi) - math.log(scale)
        return float(np.sum(-0.5 * (s / scale) ** 2 + t + const))

    def _priors(self, q, g) -> float:
        pr = self.spec.priors
        lp = 0.0
        lp += self._normal_block(q, g, "mu", pr.mu_sd)
        lp += self._normal_block(q, g, "d", pr.d_sd)
        lp += self._normal_block(q, g, "theta", pr.theta_sd)
        lp += self._normal_block(q, g, "beta1", pr.beta_sd)
        lp += self._normal_block(q, g, "beta2", pr.beta_sd)
        for key in ("u_z", "re_z", "re_z0", "gamma_z", "b1_z", "b2_z"):
            lp += self._z_block(q, g, key)
        lp += self._halfnormal_log_block(q, g, "sigma_log", pr.sigma_scale)
        lp += self._halfnormal_log_block(q, g, "tau_log", pr.tau_scale)
        lp += self._halfnormal_log_block(q, g, "sigma_alpha_log", pr.sigma_alpha_scale)
        lp += self._halfnormal_log_block(q, g, "b1_sigma_log", pr.b_coef_scale)
        lp += self._halfnormal_log_block(q, g, "b2_sigma_log", pr.b_coef_scale)
        return lp

    def logpost_and_grad(self, q: np.ndarray):
        """Joint log posterior density and its gradient (single source of truth)."""
        q = np.asarray(q, dtype=float)
        if q.shape != (self.dim,):
            raise ValueError(f"parameter vector must have length {self.dim}")
        dec = self._decode(q)
        accum = self._new_accum()
        ll = self._likelihood(dec, accum=accum)
        g = self._finalize_grad(dec, accum)
        lp = self._priors(q, g)
        total = ll + lp
        if not np.isfinite(total) or not np.all(np.isfinite(g)):
            bad = "value" if not np.isfinite(total) else self._first_bad_slice(g)
            raise FloatingPointError(f"non-finite log posterior ({bad})")
        return total, g

    def _first_bad_slice(self, g) -> str:
        bad = ~np.isfinite(g)
        idx = int(np.flatnonzero(bad)[0])
        return f"gradient of {self.layout.names[idx]}"

    def loglik_total(self, q: np.ndarray) -> float:
        return self._likelihood(self._decode(np.asarray(q, dtype=float)))

    def pointwise_loglik(self, q: np.ndarray) -> np.ndarray:
        out = np.zeros(self.data.n_records)
        self._likelihood(self._decode(np.asarray(q, dtype=float)), pointwise=out)
        return out

    def loglik_point(self, q: np.ndarray, index: int):
        """Contribution of one record plus its gradient."""
        if not 0 <= index < self.data.n_records:
            raise IndexError(f"record index {index} out of range")
        dec = self._decode(np.asarray(q, dtype=float))
        accum = self._new_accum()
        ll = self._likelihood(dec, accum=accum, only_row=index)
        return ll, self._finalize_grad(dec, accum)

    # ------------------------------------------------------------------
    # conveniences used by sampling and products

    def check_gradient(self, q, n_dirs: int = 5, h: float = 1e-5, tol: float = 1e-4,
                       rng=None) -> float:
        """Directional finite-difference check; returns worst relative error."""
        rng = rng or np.random.default_rng(0)
        _, grad = self.logpost_and_grad(q)
        worst = 0.0
        for _ in range(n_dirs):
            v = rng.standard_normal(self.dim)
            v /= np.linalg.norm(v)
            fp = self.logpost_and_grad(q + h * v)[0]
            fm = self.logpost_and_grad(q - h * v)[0]
            fd = (fp - fm) / (2 * h)
            an = float(grad @ v)
            err = abs(fd - an) / max(1.0, abs(fd), abs(an))
            worst = max(worst, err)
        if worst > tol:
            raise FloatingPointError(
                f"analytic gradient disagrees with finite differences "
                f"(rel err {worst:.2e})"
            )
        return worst

    def group_for(self, study: int, treatment: int | None = None,
                  strata: dict | None = None) -> int:
        """Coefficient group index for a (study, arm, strata) combination."""
        spec = self.spec
        if spec.family in ("ph", "nph_coef"):
            for gi, g in enumerate(self.coef_groups):
                if g.study == study:
                    return gi
            raise KeyError(f"no coefficient group for study index {study}")
        parts = []
        for comp in spec.stratify_by:
            if comp == "treatment":
                if treatment is None:
                    raise ValueError("stratified model needs a treatment")
                parts.append(int(treatment))
            else:
                if not strata or comp not in strata:
                    raise ValueError(f"stratified model needs a value for {comp!r}")
                parts.append(int(strata[comp]))
        label = self.data.studies[study] + "".join(f".{p}" for p in parts)
        for gi, g in enumerate(self.coef_groups):
            if g.key == label:
                return gi
        raise KeyError(
            f"no spline coefficients were estimated for {label!r} "
            "(stratified models only cover observed strata)"
        )

    # vectorised decodes over draw matrices -----------------------------

    def astar_draws(self, flat: np.ndarray, group: int) -> np.ndarray:
        """alpha* vectors for one coefficient group, per draw: (S, B-1)."""
        lay = self.layout
        grp = self.coef_groups[group]
        uz = lay.get(flat, "u_z")[:, grp.z_offset : grp.z_offset + grp.n_steps]
        sigma = np.exp(lay.get(flat, "sigma_log")[:, group])
        return grp.phi + np.cumsum(sigma[:, None] * grp.sqrt_w * uz, axis=1)

    def gamma_draws(self, flat: np.ndarray) -> np.ndarray:
        """Non-proportionality effects per draw: (S, steps, K)."""
        lay = self.layout
        z = lay.get(flat, "gamma_z")
        sa = np.exp(lay.get(flat, "sigma_alpha_log"))
        scale = sa[:, None] * self.common_sqrt_w[None, :] * SQRT_HALF
        v = scale[:, :, None] * (z[:, :, 1:] + z[:, :, :1])
        return np.cumsum(v, axis=1)

    def spline_shift_draws(self, flat: np.ndarray, treatment: int,
                           covariates: dict | None = None):
        """Per-draw shift added to a study's alpha* for the given arm."""
        if self.spec.family != "nph_coef":
            return 0.0
        shift = self.gamma_draws(flat)[:, :, treatment]
        if self.layout.has("b1_z") and covariates is not None:
            x = np.array([
                covariates.get(c, self.cov_means[c]) - self.cov_means[c]
                for c in self.spec.covariates_spline
            ])
            lay = self.layout
            b1z = lay.get(flat, "b1_z")
            s1 = np.exp(lay.get(flat, "b1_sigma_log"))
            B1 = np.cumsum(
                s1[:, :, None] * self.common_sqrt_w[None, None, :] * b1z, axis=2
            )
            eff = np.einsum("p,spl->sl", x, B1)
            if treatment != 0:
                b2z = lay.get(flat, "b2_z")[:, treatment - 1]
                s2 = np.exp(lay.get(flat, "b2_sigma_log"))[:, treatment - 1]
                B2 = np.cumsum(
                    s2[:, :, None] * self.common_sqrt_w[None, None, :] * b2z, axis=2
                )
                eff = eff + np.einsum("p,spl->sl", x, B2)
            shift = shift + eff
        return shift

    def eta_draws(self, flat: np.ndarray, study: int, treatment: int,
                  covariates: dict | None = None,
                  use_study_deviate: bool = True) -> np.ndarray:
        """Per-draw linear predictor for an arm in a study population.

        Random-effects fits use the study's own deviate for arms observed in
        the study, the population-level mean effect otherwise.
        """
        lay = self.layout
        eta = lay.get(flat, "mu")[:, study].copy()
        re_lookup = {(e.study, e.treatment): i for i, e in enumerate(self.re_entries)}
        if (
            self.spec.effects == "random"
            and use_study_deviate
            and (study, treatment) in re_lookup
        ):
            i = re_lookup[(study, treatment)]
            e = self.re_entries[i]
            tau = np.exp(lay.get(flat, "tau_log"))
            z = lay.get(flat, "re_z")[:, i]
            if e.shared:
                z0 = lay.get(flat, "re_z0")[:, self.re_shared[e.study]]
                combo = (z + z0) * SQRT_HALF
            else:
                combo = z
            mean = lay.get(flat, "d")[:, e.d_idx] if e.d_idx >= 0 else 0.0
            eta += mean + tau * combo
        else:
            if self.spec.inconsistency == "ume":
                a = self.data.arm1_treatment(study)
                if treatment != a and (a, treatment) not in self._ume_index:
                    raise ValueError(
                        "UME models have no effect parameter for treatment "
                        f"{self.data.treatments[treatment]!r} in study "
                        f"{self.data.studies[study]!r}"
                    )
            didx = self._d_index(study, treatment)
            if didx >= 0:
                eta += lay.get(flat, "d")[:, didx]
        if (
            self.spec.inconsistency == "nodesplit"
            and study in self._nodesplit_studies
            and treatment == self.nodesplit_ids[1]
        ):
            eta += lay.get(flat, "theta")
        if covariates:
            if self.layout.has("beta1"):
                x = np.array([
                    covariates.get(c, self.cov_means[c]) - self.cov_means[c]
                    for c in self.spec.covariates_prognostic
                ])
                eta = eta + lay.get(flat, "beta1") @ x
            if self.layout.has("beta2") and treatment != 0:
                x = np.array([
                    covariates.get(c, self.cov_means[c]) - self.cov_means[c]
                    for c in self.spec.covariates_effect_modifier
                ])
                eta = eta + lay.get(flat, "beta2")[:, treatment - 1] @ x
        return eta

    def d_contrast_draws(self, flat: np.ndarray, treatment: int,
                         reference: int) -> np.ndarray:
        """Per-draw main-effect contrast d_treatment - d_reference."""
        if self.spec.inconsistency == "ume":
            raise ValueError("UME models do not define network-wide contrasts")
        dv = self.layout.get(flat, "d")
        dt = dv[:, treatment - 1] if treatment != 0 else 0.0
        dr = dv[:, reference - 1] if reference != 0 else 0.0
        return dt - dr

    def nonprop_contrast_draws(self, flat: np.ndarray, treatment: int,
                               reference: int = 0) -> np.ndarray:
        """Per-draw non-proportionality contrasts gamma_k - gamma_ref: (S, steps)."""
        g = self.gamma_draws(flat)
        return g[:, :, treatment] - g[:, :, reference]
