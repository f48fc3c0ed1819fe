"""Study/auxiliary samples, the pseudo-merged sample, and CSV ingestion."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import ValidationError

__all__ = [
    "StudySample",
    "AuxSample",
    "MergedSample",
    "OverlapReport",
    "merge_samples",
    "validate_overlap",
    "read_study_csv",
    "read_aux_csv",
]


def _as_matrix(a, n: int, what: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a.reshape(-1, 1) if a.size else a.reshape(n, 0)
    if a.ndim != 2 or a.shape[0] != n:
        raise ValidationError(f"{what} must have {n} rows, got shape {a.shape}")
    return a


def _check_finite(name: str, *arrays: np.ndarray) -> None:
    bad = np.zeros(arrays[0].shape[0], dtype=bool)
    for a in arrays:
        a2 = a.reshape(a.shape[0], -1)
        bad |= ~np.isfinite(a2).all(axis=1)
    if bad.any():
        rows = np.flatnonzero(bad)
        shown = ", ".join(map(str, rows[:20])) + (" ..." if rows.size > 20 else "")
        raise ValidationError(f"{name}: {rows.size} row(s) with missing/non-finite values: {shown}")


def _default_names(prefix: str, k: int) -> tuple[str, ...]:
    return tuple(f"{prefix}_{j + 1}" for j in range(k))


@dataclass(frozen=True)
class StudySample:
    """Main sample: outcome ``y`` plus instruments, target covariate missing."""

    y: np.ndarray
    z1: np.ndarray
    z2: np.ndarray
    z1_names: tuple[str, ...] = ()
    z2_names: tuple[str, ...] = ()

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        if y.size < 1:
            raise ValidationError("study sample is empty")
        z1 = _as_matrix(self.z1, y.size, "study z1")
        z2 = _as_matrix(self.z2, y.size, "study z2")
        _check_finite("study sample", y, z1, z2)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "z1", z1)
        object.__setattr__(self, "z2", z2)
        object.__setattr__(self, "z1_names", tuple(self.z1_names) or _default_names("z1", z1.shape[1]))
        object.__setattr__(self, "z2_names", tuple(self.z2_names) or _default_names("z2", z2.shape[1]))

    @property
    def n(self) -> int:
        return self.y.size


@dataclass(frozen=True)
class AuxSample:
    """Auxiliary sample: target covariate ``x`` plus instruments, outcome missing."""

    x: np.ndarray
    z1: np.ndarray
    z2: np.ndarray
    z1_names: tuple[str, ...] = ()
    z2_names: tuple[str, ...] = ()

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).ravel()
        if x.size < 1:
            raise ValidationError("auxiliary sample is empty")
        z1 = _as_matrix(self.z1, x.size, "aux z1")
        z2 = _as_matrix(self.z2, x.size, "aux z2")
        _check_finite("auxiliary sample", x, z1, z2)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z1", z1)
        object.__setattr__(self, "z2", z2)
        object.__setattr__(self, "z1_names", tuple(self.z1_names) or _default_names("z1", z1.shape[1]))
        object.__setattr__(self, "z2_names", tuple(self.z2_names) or _default_names("z2", z2.shape[1]))

    @property
    def n(self) -> int:
        return self.x.size


@dataclass(frozen=True)
class MergedSample:
    """Pseudo-merged sample ``{R, RY, (1-R)X, Z}``, study rows first.

    ``y_obs`` is NaN on auxiliary rows and ``x_obs`` is NaN on study rows.
    """

    r: np.ndarray
    y_obs: np.ndarray
    x_obs: np.ndarray
    z1: np.ndarray
    z2: np.ndarray
    z1_names: tuple[str, ...]
    z2_names: tuple[str, ...]

    @property
    def n(self) -> int:
        return self.r.size

    @property
    def n_s(self) -> int:
        return int(self.r.sum())

    @property
    def n_a(self) -> int:
        return self.n - self.n_s

    @property
    def q0_hat(self) -> float:
        return self.n_s / self.n

    @property
    def study_rows(self) -> slice:
        return slice(0, self.n_s)

    @property
    def aux_rows(self) -> slice:
        return slice(self.n_s, self.n)

    @property
    def y(self) -> np.ndarray:
        """Study outcomes (length ``n_s``)."""
        return self.y_obs[: self.n_s]

    @property
    def x(self) -> np.ndarray:
        """Auxiliary covariate values (length ``n_a``)."""
        return self.x_obs[self.n_s :]

    def columns(self, x: np.ndarray | None = None, rows: slice | np.ndarray | None = None) -> dict:
        """Column dict for term evaluation; ``x`` overrides the covariate column."""
        rows = slice(None) if rows is None else rows
        cols = {name: self.z1[rows, j] for j, name in enumerate(self.z1_names)}
        cols.update({name: self.z2[rows, j] for j, name in enumerate(self.z2_names)})
        if x is not None:
            cols["x"] = np.asarray(x, dtype=float)
        return cols

    def study(self) -> StudySample:
        s = self.study_rows
        return StudySample(self.y_obs[s], self.z1[s], self.z2[s], self.z1_names, self.z2_names)

    def aux(self) -> AuxSample:
        s = self.aux_rows
        return AuxSample(self.x_obs[s], self.z1[s], self.z2[s], self.z1_names, self.z2_names)


def merge_samples(study: StudySample, aux: AuxSample) -> MergedSample:
    """Stack the two samples with study rows first and membership indicator ``r``."""
    if study.z1.shape[1] != aux.z1.shape[1] or study.z2.shape[1] != aux.z2.shape[1]:
        raise ValidationError(
            f"instrument dimensions differ: study z1/z2 = {study.z1.shape[1]}/{study.z2.shape[1]}, "
            f"aux z1/z2 = {aux.z1.shape[1]}/{aux.z2.shape[1]}"
        )
    if (study.z1_names != aux.z1_names or study.z2_names != aux.z2_names) and (
        sorted(study.z1_names) == sorted(aux.z1_names) and sorted(study.z2_names) == sorted(aux.z2_names)
    ):
        # same instruments in a different column order: align on names
        p1 = [aux.z1_names.index(c) for c in study.z1_names]
        p2 = [aux.z2_names.index(c) for c in study.z2_names]
        aux = AuxSample(aux.x, aux.z1[:, p1], aux.z2[:, p2], study.z1_names, study.z2_names)
    if study.z1_names != aux.z1_names or study.z2_names != aux.z2_names:
        raise ValidationError(
            f"instrument names differ between samples: {study.z1_names + study.z2_names} vs "
            f"{aux.z1_names + aux.z2_names}"
        )
    n_s, n_a = study.n, aux.n
    r = np.concatenate([np.ones(n_s), np.zeros(n_a)])
    y_obs = np.concatenate([study.y, np.full(n_a, np.nan)])
    x_obs = np.concatenate([np.full(n_s, np.nan), aux.x])
    z1 = np.vstack([study.z1, aux.z1])
    z2 = np.vstack([study.z2, aux.z2])
    for a in (r, y_obs, x_obs, z1, z2):
        a.setflags(write=False)
    return MergedSample(r, y_obs, x_obs, z1, z2, study.z1_names, study.z2_names)


@dataclass(frozen=True)
class OverlapReport:
    columns: tuple[str, ...]
    study_min: np.ndarray
    study_max: np.ndarray
    aux_min: np.ndarray
    aux_max: np.ndarray
    excess: np.ndarray  # how far the study range sticks out of the aux range
    flagged: tuple[str, ...] = field(default=())

    def as_rows(self) -> list[dict]:
        return [
            {
                "column": c,
                "study_min": float(self.study_min[j]),
                "study_max": float(self.study_max[j]),
                "aux_min": float(self.aux_min[j]),
                "aux_max": float(self.aux_max[j]),
                "excess": float(self.excess[j]),
                "flagged": c in self.flagged,
            }
            for j, c in enumerate(self.columns)
        ]


def validate_overlap(merged: MergedSample, tol: float = 0.0, warn: bool = True) -> OverlapReport:
    """Compare per-column instrument ranges of the study and auxiliary rows.

    Advisory only: columns whose study range exceeds the auxiliary range by
    more than ``tol`` are flagged and a warning is emitted; nothing is raised.
    """
    z = np.hstack([merged.z1, merged.z2])
    names = merged.z1_names + merged.z2_names
    zs, za = z[merged.study_rows], z[merged.aux_rows]
    smin, smax = zs.min(axis=0), zs.max(axis=0)
    amin, amax = za.min(axis=0), za.max(axis=0)
    excess = np.maximum(np.maximum(amin - smin, smax - amax), 0.0)
    flagged = tuple(c for c, e in zip(names, excess) if e > tol)
    if flagged and warn:
        warnings.warn(
            f"study-sample instrument range exceeds the auxiliary range for {list(flagged)}; "
            "the support condition may fail",
            stacklevel=2,
        )
    return OverlapReport(tuple(names), smin, smax, amin, amax, excess, flagged)


def _split_columns(df: pd.DataFrame, path) -> tuple[list[str], list[str]]:
    z1 = [c for c in df.columns if str(c).startswith("z1_")]
    z2 = [c for c in df.columns if str(c).startswith("z2_")]
    if not z2:
        raise ValidationError(f"{path}: no excluded-instrument columns (z2_*) found")
    return z1, z2


def _read(path, required: str) -> tuple[pd.DataFrame, list[str], list[str]]:
    try:
        df = pd.read_csv(path, encoding="utf-8", float_precision="round_trip")
    except FileNotFoundError:
        raise ValidationError(f"file not found: {path}") from None
    except (pd.errors.ParserError, UnicodeDecodeError, pd.errors.EmptyDataError) as exc:
        raise ValidationError(f"{path}: cannot parse CSV ({exc})") from None
    df.columns = [str(c).strip() for c in df.columns]
    if required not in df.columns:
        raise ValidationError(f"{path}: required column {required!r} missing")
    z1, z2 = _split_columns(df, path)
    other = [c for c in df.columns if c not in z1 + z2 + [required]]
    if other:
        raise ValidationError(f"{path}: unexpected columns {other}")
    num = df.apply(pd.to_numeric, errors="coerce")
    bad = num.isna().any(axis=1).to_numpy()
    if bad.any():
        rows = np.flatnonzero(bad)
        raise ValidationError(
            f"{path}: {rows.size} row(s) with missing or non-numeric cells (0-based data rows): "
            + ", ".join(map(str, rows[:20]))
        )
    return num, z1, z2


def read_study_csv(path: str | Path) -> StudySample:
    df, z1, z2 = _read(path, "y")
    return StudySample(df["y"].to_numpy(), df[z1].to_numpy(), df[z2].to_numpy(), tuple(z1), tuple(z2))


def read_aux_csv(path: str | Path) -> AuxSample:
    df, z1, z2 = _read(path, "x")
    return AuxSample(df["x"].to_numpy(), df[z1].to_numpy(), df[z2].to_numpy(), tuple(z1), tuple(z2))


def write_sample_csv(sample: StudySample | AuxSample, path: str | Path) -> None:
    lead = ("y", sample.y) if isinstance(sample, StudySample) else ("x", sample.x)
    data = {lead[0]: lead[1]}
    for j, c in enumerate(sample.z1_names):
        data[c] = sample.z1[:, j]
    for j, c in enumerate(sample.z2_names):
        data[c] = sample.z2[:, j]
    pd.DataFrame(data).to_csv(path, index=False, float_format="%.17g")


def as_names(names: Sequence[str] | None, prefix: str, k: int) -> tuple[str, ...]:
    return tuple(names) if names else _default_names(prefix, k)
