"""Data model for semicompeting-risks records with a binary time-varying confounder.

Each subject carries a treatment arm ``z``, baseline covariates ``x``, an
optional 0->1 jump time of the confounder process (``l_time``), and the usual
semicompeting-risks quadruple ``(t1, delta1, t2, delta2)`` where the terminal
event censors the intermediate event but not vice versa.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd


class SchemaError(ValueError):
    """Raised when input rows violate the record schema or its invariants."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(str(p) for p in self.problems))


@dataclass(frozen=True)
class SubjectRecord:
    """One individual's observed history.

    ``l_time`` is the time the binary confounder jumps 0->1, or None if the
    jump was never observed.  If ``delta1 == 0`` then ``t1 == t2`` (the
    intermediate event was not observed before exit).  Ties at the same clock
    time are resolved intermediate-before-terminal.
    """

    id: Union[int, str]
    z: int
    x: tuple
    l_time: Optional[float]
    t1: float
    delta1: int
    t2: float
    delta2: int

    def validate(self):
        problems = []
        if self.z not in (0, 1):
            problems.append(f"row {self.id}: z must be 0 or 1, got {self.z}")
        if self.delta1 not in (0, 1) or self.delta2 not in (0, 1):
            problems.append(f"row {self.id}: delta1/delta2 must be 0 or 1")
        if not all(np.isfinite(v) for v in self.x):
            problems.append(f"row {self.id}: non-finite covariate")
        if not (self.t1 > 0 and self.t2 > 0):
            problems.append(f"row {self.id}: times must be positive")
        if self.t1 > self.t2:
            problems.append(f"row {self.id}: t1={self.t1} > t2={self.t2}")
        if self.delta1 == 0 and self.t1 != self.t2:
            problems.append(
                f"row {self.id}: delta1=0 requires t1 == t2 "
                f"(got t1={self.t1}, t2={self.t2})"
            )
        if self.l_time is not None:
            if not self.l_time > 0:
                problems.append(f"row {self.id}: l_time must be positive")
            elif self.l_time > self.t2:
                problems.append(
                    f"row {self.id}: l_time={self.l_time} > t2={self.t2}"
                )
        return problems


@dataclass(frozen=True)
class TimeGrid:
    """A strictly increasing sequence of positive times below a study horizon."""

    times: np.ndarray
    t_star: float

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        object.__setattr__(self, "times", t)
        if t.size:
            if np.any(np.diff(t) <= 0):
                raise ValueError("grid times must be strictly increasing")
            if t[0] <= 0:
                raise ValueError("grid times must be positive")
            if t[-1] > self.t_star:
                raise ValueError("grid times must not exceed t_star")


class Dataset:
    """Validated, immutable array view of a set of :class:`SubjectRecord`.

    Arrays: ``x`` is (n, p); ``l_time`` uses NaN for absent jumps.  Safe to
    share read-only across parallel workers.
    """

    def __init__(self, ids, z, x, l_time, t1, delta1, t2, delta2,
                 covariate_names=None):
        self.ids = np.asarray(ids)
        self.z = np.asarray(z, dtype=int)
        self.x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.x.size == 0:
            self.x = self.x.reshape(len(self.ids), 0)
        self.l_time = np.asarray(l_time, dtype=float)
        self.t1 = np.asarray(t1, dtype=float)
        self.delta1 = np.asarray(delta1, dtype=int)
        self.t2 = np.asarray(t2, dtype=float)
        self.delta2 = np.asarray(delta2, dtype=int)
        self.covariate_names = (
            list(covariate_names)
            if covariate_names is not None
            else [f"x{j + 1}" for j in range(self.x.shape[1])]
        )
        for a in (self.ids, self.z, self.x, self.l_time, self.t1,
                  self.delta1, self.t2, self.delta2):
            a.setflags(write=False)

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def has_l(self) -> np.ndarray:
        return ~np.isnan(self.l_time)

    def arm_indices(self, arm: int) -> np.ndarray:
        return np.flatnonzero(self.z == arm)

    def arm_counts(self) -> tuple:
        return (int(np.sum(self.z == 0)), int(np.sum(self.z == 1)))

    def subset(self, indices) -> "Dataset":
        """Row subset (repeats allowed, e.g. bootstrap resamples)."""
        idx = np.asarray(indices, dtype=int)
        return Dataset(
            self.ids[idx], self.z[idx], self.x[idx], self.l_time[idx],
            self.t1[idx], self.delta1[idx], self.t2[idx], self.delta2[idx],
            covariate_names=self.covariate_names,
        )

    def record(self, i: int) -> SubjectRecord:
        lt = self.l_time[i]
        return SubjectRecord(
            id=self.ids[i], z=int(self.z[i]), x=tuple(self.x[i]),
            l_time=None if np.isnan(lt) else float(lt),
            t1=float(self.t1[i]), delta1=int(self.delta1[i]),
            t2=float(self.t2[i]), delta2=int(self.delta2[i]),
        )

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame({"id": self.ids, "z": self.z})
        for j, name in enumerate(self.covariate_names):
            df[name] = self.x[:, j]
        df["l_time"] = self.l_time
        df["t1"] = self.t1
        df["delta1"] = self.delta1
        df["t2"] = self.t2
        df["delta2"] = self.delta2
        return df


def _coerce_record(row, default_id) -> SubjectRecord:
    if isinstance(row, SubjectRecord):
        return row
    if isinstance(row, Mapping):
        lt = row.get("l_time", None)
        if lt is not None and (isinstance(lt, float) and np.isnan(lt)):
            lt = None
        return SubjectRecord(
            id=row.get("id", default_id), z=int(row["z"]),
            x=tuple(float(v) for v in row["x"]),
            l_time=None if lt is None else float(lt),
            t1=float(row["t1"]), delta1=int(row["delta1"]),
            t2=float(row["t2"]), delta2=int(row["delta2"]),
        )
    raise TypeError(f"cannot interpret row of type {type(row)!r}")


def build_dataset(rows: Iterable, covariate_names: Optional[Sequence[str]] = None
                  ) -> Dataset:
    """Validate raw rows and assemble an immutable :class:`Dataset`.

    Rows may be :class:`SubjectRecord` instances or mappings with the record
    fields.  Any invariant violation rejects the whole input, naming the
    offending rows.
    """
    records = [_coerce_record(r, i) for i, r in enumerate(rows)]
    problems = []
    p = None
    for rec in records:
        if p is None:
            p = len(rec.x)
        elif len(rec.x) != p:
            problems.append(f"row {rec.id}: covariate dimension "
                            f"{len(rec.x)} != {p}")
        problems.extend(rec.validate())
    if problems:
        raise SchemaError(problems)
    n = len(records)
    p = p or 0
    return Dataset(
        ids=[r.id for r in records],
        z=[r.z for r in records],
        x=np.array([r.x for r in records], dtype=float).reshape(n, p),
        l_time=[np.nan if r.l_time is None else r.l_time for r in records],
        t1=[r.t1 for r in records],
        delta1=[r.delta1 for r in records],
        t2=[r.t2 for r in records],
        delta2=[r.delta2 for r in records],
        covariate_names=covariate_names,
    )


def pooled_event_grid(dataset: Dataset, arm: Optional[int] = None,
                      include_censoring_times: bool = False) -> TimeGrid:
    """Sorted distinct union of observed transition times.

    Includes confounder-jump times, observed intermediate event times and
    observed terminal event times; censoring exit times only when flagged.
    """
    if dataset.n == 0:
        raise ValueError("empty dataset has no event grid")
    mask = np.ones(dataset.n, dtype=bool) if arm is None else dataset.z == arm
    times = [
        dataset.l_time[mask & dataset.has_l],
        dataset.t1[mask & (dataset.delta1 == 1)],
        dataset.t2[mask & (dataset.delta2 == 1)],
    ]
    if include_censoring_times:
        times.append(dataset.t2[mask & (dataset.delta2 == 0)])
    all_times = np.unique(np.concatenate(times))
    t_star = float(dataset.t2[mask].max()) if mask.any() else 0.0
    return TimeGrid(times=all_times, t_star=max(t_star, float(all_times[-1]) if all_times.size else t_star))


CSV_FIXED_COLUMNS = ("id", "z", "l_time", "t1", "delta1", "t2", "delta2")


def read_subjects_csv(path, covariates: Optional[Sequence[str]] = None) -> Dataset:
    """Read the documented CSV schema: ``id,z,x1,...,xp,l_time,t1,delta1,t2,delta2``.

    An empty ``l_time`` field means the confounder jump was never observed.
    If ``covariates`` is None, every column that is not a fixed schema column
    is treated as a covariate, in file order.
    """
    df = pd.read_csv(path)
    missing = [c for c in CSV_FIXED_COLUMNS if c not in df.columns]
    if missing:
        raise SchemaError([f"missing required column(s): {', '.join(missing)}"])
    if covariates is None:
        covariates = [c for c in df.columns if c not in CSV_FIXED_COLUMNS]
    else:
        absent = [c for c in covariates if c not in df.columns]
        if absent:
            raise SchemaError([f"missing covariate column(s): {', '.join(absent)}"])
    rows = []
    for _, r in df.iterrows():
        lt = r["l_time"]
        rows.append(dict(
            id=r["id"], z=r["z"], x=[r[c] for c in covariates],
            l_time=None if pd.isna(lt) else float(lt),
            t1=r["t1"], delta1=r["delta1"], t2=r["t2"], delta2=r["delta2"],
        ))
    return build_dataset(rows, covariate_names=covariates)


def write_subjects_csv(dataset: Dataset, path) -> None:
    dataset.to_frame().to_csv(path, index=False)
