"""Survival dataset container, CSV ingestion, and network validation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

__all__ = ["SurvivalDataset", "kaplan_meier"]


@dataclass
class SurvivalDataset:
    """Individual event/censoring times across a network of studies.

    Treatment index 0 is the network reference treatment; study and treatment
    indices are contiguous. Covariates, when present, are stored as given
    (centering happens at model build time).
    """

    studies: tuple[str, ...]
    treatments: tuple[str, ...]
    study_idx: np.ndarray
    treatment_idx: np.ndarray
    time: np.ndarray
    status: np.ndarray
    covariates: np.ndarray | None = None
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        self.study_idx = np.asarray(self.study_idx, dtype=int)
        self.treatment_idx = np.asarray(self.treatment_idx, dtype=int)
        self.time = np.asarray(self.time, dtype=float)
        self.status = np.asarray(self.status, dtype=int)
        if self.covariates is not None:
            self.covariates = np.asarray(self.covariates, dtype=float)
        self._validate()

    # -- construction ----------------------------------------------------

    @classmethod
    def from_records(cls, records, covariate_names=(), reference: str | None = None):
        """Build from an iterable of (study, treatment, time, status[, covs])."""
        rows = list(records)
        studies = tuple(sorted({str(r[0]) for r in rows}))
        treatments = sorted({str(r[1]) for r in rows})
        if reference is not None:
            if reference not in treatments:
                raise ValueError(f"reference treatment {reference!r} not in data")
            treatments.remove(reference)
            treatments.insert(0, reference)
        treatments = tuple(treatments)
        smap = {s: i for i, s in enumerate(studies)}
        tmap = {t: i for i, t in enumerate(treatments)}
        covs = None
        if covariate_names:
            covs = np.array([[float(v) for v in r[4]] for r in rows])
        return cls(
            studies=studies,
            treatments=treatments,
            study_idx=np.array([smap[str(r[0])] for r in rows]),
            treatment_idx=np.array([tmap[str(r[1])] for r in rows]),
            time=np.array([float(r[2]) for r in rows]),
            status=np.array([int(r[3]) for r in rows]),
            covariates=covs,
            covariate_names=tuple(covariate_names),
        )

    @classmethod
    def from_csv(cls, path, reference: str | None = None):
        """Read a delimited file with header study,treatment,time,status[,...].

        Extra columns are treated as numeric covariates. Status must be coded
        0 (censored) / 1 (event); anything else is rejected rather than
        coerced.
        """
        with open(path, "r", newline="") as fh:
            return cls._parse(fh, reference, name=str(path))

    @classmethod
    def from_csv_text(cls, text, reference: str | None = None):
        return cls._parse(io.StringIO(text), reference, name="<string>")

    @classmethod
    def _parse(cls, fh, reference, name):
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{name}: empty data file") from None
        header = [h.strip() for h in header]
        required = ["study", "treatment", "time", "status"]
        if [h.lower() for h in header[:4]] != required:
            raise ValueError(
                f"{name}: header must start with {','.join(required)}; got {header}"
            )
        cov_names = tuple(header[4:])
        records = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ValueError(f"{name}:{lineno}: expected {len(header)} fields, got {len(row)}")
            study, trt, time_s, status_s = (c.strip() for c in row[:4])
            try:
                t = float(time_s)
            except ValueError:
                raise ValueError(f"{name}:{lineno}: time {time_s!r} is not a number") from None
            if not np.isfinite(t) or t < 0:
                raise ValueError(f"{name}:{lineno}: time must be finite and nonnegative")
            if status_s not in ("0", "1"):
                raise ValueError(
                    f"{name}:{lineno}: status must be 0 (censored) or 1 (event), got {status_s!r}"
                )
            try:
                covs = [float(c) for c in row[4:]]
            except ValueError:
                raise ValueError(f"{name}:{lineno}: covariates must be numeric") from None
            records.append((study, trt, t, int(status_s), covs))
        if not records:
            raise ValueError(f"{name}: no data rows")
        return cls.from_records(records, covariate_names=cov_names, reference=reference)

    def to_csv(self, path) -> None:
        """Lossless re-serialization (times kept to full precision)."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["study", "treatment", "time", "status", *self.covariate_names])
            for i in range(self.n_records):
                row = [
                    self.studies[self.study_idx[i]],
                    self.treatments[self.treatment_idx[i]],
                    np.format_float_positional(self.time[i], trim="0", precision=None),
                    int(self.status[i]),
                ]
                if self.covariates is not None:
                    row += [np.format_float_positional(v, trim="0") for v in self.covariates[i]]
                w.writerow(row)

    # -- validation ------------------------------------------------------

    def _validate(self):
        n = len(self.time)
        for arr, label in [(self.study_idx, "study_idx"), (self.treatment_idx, "treatment_idx"),
                           (self.status, "status")]:
            if len(arr) != n:
                raise ValueError(f"{label} length mismatch")
        if not np.all(np.isfinite(self.time)) or np.any(self.time < 0):
            raise ValueError("times must be finite and nonnegative")
        if not np.all(np.isin(self.status, (0, 1))):
            raise ValueError("status must be 0 or 1")
        zero_events = np.flatnonzero((self.time == 0) & (self.status == 1))
        if len(zero_events):
            raise ValueError(
                f"events at time 0 are invalid (records {zero_events[:5].tolist()})"
            )
        for j, study in enumerate(self.studies):
            arms = np.unique(self.treatment_idx[self.study_idx == j])
            if len(arms) < 2:
                raise ValueError(f"study {study!r} has a single arm; every study needs >= 2")
        self._check_connected()

    def _check_connected(self):
        parent = list(range(self.K))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for j in range(self.J):
            arms = np.unique(self.treatment_idx[self.study_idx == j])
            for k in arms[1:]:
                ra, rb = find(int(arms[0])), find(int(k))
                if ra != rb:
                    parent[rb] = ra
        comps: dict[int, list[str]] = {}
        for k in range(self.K):
            comps.setdefault(find(k), []).append(self.treatments[k])
        if len(comps) > 1:
            parts = "; ".join("{" + ", ".join(v) + "}" for v in comps.values())
            raise ValueError(f"treatment network is disconnected: components {parts}")

    # -- metadata ---------------------------------------------------------

    @property
    def n_records(self) -> int:
        return len(self.time)

    @property
    def J(self) -> int:
        return len(self.studies)

    @property
    def K(self) -> int:
        return len(self.treatments)

    def study_arms(self, j: int) -> np.ndarray:
        """Sorted treatment ids present in study j."""
        return np.unique(self.treatment_idx[self.study_idx == j])

    def arm1_treatment(self, j: int) -> int:
        """Treatment id of the study's reference arm (lowest id)."""
        return int(self.study_arms(j).min())

    def subset(self, mask) -> "SurvivalDataset":
        """Dataset restricted to ``mask`` records; labels are kept stable."""
        mask = np.asarray(mask)
        return SurvivalDataset(
            studies=self.studies,
            treatments=self.treatments,
            study_idx=self.study_idx[mask],
            treatment_idx=self.treatment_idx[mask],
            time=self.time[mask],
            status=self.status[mask],
            covariates=None if self.covariates is None else self.covariates[mask],
            covariate_names=self.covariate_names,
        )

    def summary(self) -> str:
        """Network description: studies, arms, events per arm."""
        lines = [f"{self.J} studies, {self.K} treatments: {', '.join(self.treatments)}"]
        for j, study in enumerate(self.studies):
            parts = []
            for k in self.study_arms(j):
                sel = (self.study_idx == j) & (self.treatment_idx == k)
                parts.append(
                    f"{self.treatments[k]} (n={int(sel.sum())}, events={int(self.status[sel].sum())})"
                )
            lines.append(f"  {study}: " + " vs ".join(parts))
        edges: dict[tuple[int, int], int] = {}
        for j in range(self.J):
            arms = self.study_arms(j)
            for a in range(len(arms)):
                for b in range(a + 1, len(arms)):
                    key = (int(arms[a]), int(arms[b]))
                    edges[key] = edges.get(key, 0) + 1
        lines.append(
            "comparisons: "
            + ", ".join(
                f"{self.treatments[a]}-{self.treatments[b]} ({c} study{'ies' if c > 1 else ''})"
                for (a, b), c in sorted(edges.items())
            )
        )
        return "\n".join(lines)


def kaplan_meier(times, status):
    """Product-limit survival estimate.

    Returns step-function coordinates ``(t, s)`` starting at (0, 1); ``s[i]``
    is the estimate just after ``t[i]``.
    """
    times = np.asarray(times, dtype=float)
    status = np.asarray(status, dtype=int)
    order = np.argsort(times, kind="stable")
    times, status = times[order], status[order]
    n = len(times)
    at_risk = n
    surv = 1.0
    t_out, s_out = [0.0], [1.0]
    i = 0
    while i < n:
        t = times[i]
        deaths = 0
        removed = 0
        while i < n and times[i] == t:
            deaths += status[i]
            removed += 1
            i += 1
        if deaths:
            surv *= 1.0 - deaths / at_risk
            t_out.append(t)
            s_out.append(surv)
        at_risk -= removed
    return np.array(t_out), np.array(s_out)
