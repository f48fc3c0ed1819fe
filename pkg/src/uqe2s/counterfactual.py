"""Counterfactual covariate distributions and the shift directions g_q, g_p."""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import Callable

import numpy as np
import pandas as pd
from scipy import stats

from .errors import ValidationError
from .nonparametrics import InterpolatedCdf

__all__ = [
    "ShiftKind",
    "CounterfactualDistribution",
    "build_counterfactual",
    "shift_direction",
    "DENSITY_FLOOR",
]

DENSITY_FLOOR = 1e-3  # relative to max f_hat


class ShiftKind(str, Enum):
    MDS = "MDS"  # marginal distributional shift
    MQS = "MQS"  # marginal quantile shift
    MLS = "MLS"  # marginal location shift (MQS with unit direction)

    @classmethod
    def parse(cls, s) -> "ShiftKind":
        if isinstance(s, cls):
            return s
        try:
            return cls(str(s).upper())
        except ValueError:
            raise ValidationError(f"unknown shift kind {s!r}; expected MDS, MQS or MLS") from None


@dataclass(frozen=True)
class CounterfactualDistribution:
    """A coherent ``(cdf, pdf, quantile)`` triple for the target distribution ``G``.

    ``quantile_pdf(u)`` returns ``G'(G^{-1}(u))``, which is what the quantile-shift
    derivative needs; for interpolated sources it is the slope of the segment
    containing ``G^{-1}(u)`` (right derivative at knots).
    """

    cdf: Callable
    pdf: Callable
    quantile: Callable
    quantile_pdf: Callable
    source: str
    support: tuple[float, float]
    discrete_points: np.ndarray | None = None

    @classmethod
    def from_sample(cls, x, weights=None, label: str = "sample") -> "CounterfactualDistribution":
        c = InterpolatedCdf.from_sample(x, weights)
        return cls(c.cdf, c.pdf, c.quantile, c.pdf_at_quantile, f"sample_ecdf_interpolated:{label}",
                   (float(c.knots[0]), float(c.knots[-1])))

    @classmethod
    def from_interpolant(cls, c: InterpolatedCdf, label: str = "interpolant") -> "CounterfactualDistribution":
        return cls(c.cdf, c.pdf, c.quantile, c.pdf_at_quantile, label, (float(c.knots[0]), float(c.knots[-1])))

    @classmethod
    def normal(cls, mu: float = 0.0, sigma: float = 1.0) -> "CounterfactualDistribution":
        if not sigma > 0:
            raise ValidationError("normal counterfactual needs sigma > 0")
        d = stats.norm(mu, sigma)
        return cls(d.cdf, d.pdf, d.ppf, lambda u: d.pdf(d.ppf(u)), f"normal({mu:g},{sigma:g})", (-np.inf, np.inf))

    @classmethod
    def uniform(cls, a: float = 0.0, b: float = 1.0) -> "CounterfactualDistribution":
        if not b > a:
            raise ValidationError("uniform counterfactual needs b > a")
        c = InterpolatedCdf(np.array([a, b], dtype=float), np.array([0.0, 1.0]))
        return cls(c.cdf, c.pdf, c.quantile, c.pdf_at_quantile, f"uniform({a:g},{b:g})", (float(a), float(b)))

    @classmethod
    def quantile_table(cls, u, q) -> "CounterfactualDistribution":
        """Piecewise-linear quantile function through ``(u_k, q_k)`` with ``u`` from 0 to 1."""
        u = np.asarray(u, dtype=float)
        q = np.asarray(q, dtype=float)
        if u.size < 2 or u.shape != q.shape:
            raise ValidationError("quantile table needs at least two (u, q) pairs")
        if np.any(np.diff(u) <= 0) or np.any(np.diff(q) <= 0):
            raise ValidationError("quantile table must be strictly increasing in both u and q")
        if abs(u[0]) > 1e-12 or abs(u[-1] - 1) > 1e-12:
            raise ValidationError("quantile table must span u = 0 to u = 1")
        c = InterpolatedCdf(q, np.clip(u, 0, 1))
        return cls.from_interpolant(c, "quantile_table")

    @classmethod
    def discrete(cls, points, probs) -> "CounterfactualDistribution":
        """Step CDF on finitely many points (for discrete-covariate bounds)."""
        pts = np.asarray(points, dtype=float)
        p = np.asarray(probs, dtype=float)
        if pts.size < 1 or pts.shape != p.shape or np.any(np.diff(pts) <= 0):
            raise ValidationError("discrete counterfactual needs strictly increasing points with matching probs")
        if np.any(p < 0) or abs(p.sum() - 1) > 1e-9:
            raise ValidationError("discrete counterfactual probabilities must be nonnegative and sum to 1")
        cum = np.cumsum(p)
        cum[-1] = 1.0

        def cdf(x):
            k = np.searchsorted(pts, np.asarray(x, dtype=float), side="right")
            return np.where(k > 0, cum[np.maximum(k - 1, 0)], 0.0)

        def quantile(u):
            k = np.searchsorted(cum, np.asarray(u, dtype=float) - 1e-12, side="left")
            return pts[np.clip(k, 0, pts.size - 1)]

        def nopdf(x):
            raise ValidationError("a discrete counterfactual has no density")

        return cls(cdf, nopdf, quantile, nopdf, "discrete", (float(pts[0]), float(pts[-1])), pts)

    @classmethod
    def from_callables(cls, cdf, pdf, quantile, label="callable", support=(-np.inf, np.inf)):
        return cls(cdf, pdf, quantile, lambda u: pdf(quantile(u)), label, support)


def build_counterfactual(spec, base_dir=None) -> CounterfactualDistribution:
    """Build ``G`` from a spec string, a dict, or pass through an existing object.

    Strings: ``"normal(mu,sigma)"``, ``"uniform(a,b)"``, ``"file:path.csv"``
    (a donor sample; first numeric column, or column ``x`` if present) and
    ``"table:u1:q1,u2:q2,..."`` (inline quantile table).
    Dicts: ``{"sample": [...]}`` / ``{"u": [...], "q": [...]}`` /
    ``{"points": [...], "probs": [...]}``.
    """
    if isinstance(spec, CounterfactualDistribution):
        return spec
    if isinstance(spec, dict):
        if "sample" in spec:
            return CounterfactualDistribution.from_sample(spec["sample"], spec.get("weights"))
        if "u" in spec and "q" in spec:
            return CounterfactualDistribution.quantile_table(spec["u"], spec["q"])
        if "points" in spec and "probs" in spec:
            return CounterfactualDistribution.discrete(spec["points"], spec["probs"])
        raise ValidationError(f"unrecognised counterfactual dict keys {sorted(spec)}")
    s = str(spec).strip()
    m = re.fullmatch(r"(normal|uniform)\(\s*([^,]+)\s*,\s*([^)]+)\s*\)", s, flags=re.I)
    if m:
        try:
            a, b = float(m.group(2)), float(m.group(3))
        except ValueError:
            raise ValidationError(f"bad parameters in counterfactual {s!r}") from None
        return (CounterfactualDistribution.normal if m.group(1).lower() == "normal"
                else CounterfactualDistribution.uniform)(a, b)
    if s.lower().startswith("table:"):
        try:
            pairs = [tuple(map(float, p.split(":"))) for p in s[6:].split(",") if p.strip()]
        except ValueError:
            raise ValidationError(f"bad inline quantile table {s!r}") from None
        u, q = zip(*pairs)
        return CounterfactualDistribution.quantile_table(u, q)
    if s.lower().startswith("file:"):
        from pathlib import Path

        path = Path(s[5:])
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        try:
            df = pd.read_csv(path)
        except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
            raise ValidationError(f"cannot read counterfactual file {path}: {exc}") from None
        col = "x" if "x" in df.columns else df.columns[0]
        vals = pd.to_numeric(df[col], errors="coerce").to_numpy()
        if not np.all(np.isfinite(vals)):
            raise ValidationError(f"{path}: non-numeric or missing donor values in column {col!r}")
        w = pd.to_numeric(df["weight"], errors="coerce").to_numpy() if "weight" in df.columns else None
        return CounterfactualDistribution.from_sample(vals, w, label=str(path.name))
    raise ValidationError(f"unrecognised counterfactual spec {s!r}")


def shift_direction(G: CounterfactualDistribution, F_hat, f_hat, x, kind, in_trim=None,
                    floor: float = DENSITY_FLOOR):
    """Evaluate the shift direction at covariate values ``x``.

    ``F_hat`` and ``f_hat`` are arrays already evaluated at ``x``.
    Returns ``(g, keep)``; ``keep`` marks points usable in averages (always all
    True for MQS/MLS; for MDS, trimmed-out or low-density points are dropped
    and their ``g`` is set to 0).
    """
    kind = ShiftKind.parse(kind)
    x = np.asarray(x, dtype=float)
    if kind is ShiftKind.MLS:
        return np.ones_like(x), np.ones(x.shape, dtype=bool)
    F_hat = np.asarray(F_hat, dtype=float)
    if kind is ShiftKind.MQS:
        u = F_hat
        q = G.quantile(u)
        if not np.all(np.isfinite(q)):
            # unbounded G at u in {0, 1}: nudge inside
            u = np.clip(u, 1e-10, 1 - 1e-10)
            q = G.quantile(u)
        return q - x, np.ones(x.shape, dtype=bool)
    f_hat = np.asarray(f_hat, dtype=float)
    keep = f_hat >= floor * np.max(f_hat)
    if in_trim is not None:
        keep &= np.asarray(in_trim, dtype=bool)
    g = np.zeros_like(x)
    g[keep] = -(G.cdf(x[keep]) - F_hat[keep]) / f_hat[keep]
    return g, keep
