"""Empirical quantiles, compact-support kernels, KDEs and (weighted) ECDFs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .errors import ValidationError

__all__ = [
    "KernelSpec",
    "get_kernel",
    "empirical_quantile",
    "rule_of_thumb_bandwidth",
    "covariate_bandwidth",
    "kernel_sums",
    "kernel_matrix",
    "kde",
    "kde_derivative",
    "kde_outcome_density",
    "trimmed_interval",
    "kde_covariate_density_trimmed",
    "weighted_ecdf",
    "smoothed_ecdf_knots",
    "InterpolatedCdf",
]


@dataclass(frozen=True)
class KernelSpec:
    """Symmetric second-order kernel supported on ``[-1, 1]`` (diameter ``rho = 2``)."""

    kind: str = "epanechnikov"

    def __post_init__(self):
        if self.kind not in _KERNELS:
            raise ValidationError(f"unknown kernel {self.kind!r}; expected one of {sorted(_KERNELS)}")

    @property
    def radius(self) -> float:
        return 1.0

    @property
    def rho(self) -> float:
        return 2.0 * self.radius

    @property
    def int_k2(self) -> float:
        """``∫K(u)^2 du``."""
        return _KERNELS[self.kind][3]

    @property
    def mu2(self) -> float:
        """``∫u^2 K(u) du``."""
        return _KERNELS[self.kind][4]

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        inside = np.abs(u) <= 1.0
        return np.where(inside, _KERNELS[self.kind][0](u), 0.0)

    def derivative(self, u, order: int = 1):
        """``K'`` or ``K''`` (zero outside the support; kinks are ignored)."""
        u = np.asarray(u, dtype=float)
        if order == 0:
            return self(u)
        if order not in (1, 2):
            raise ValidationError("kernel derivative order must be 0, 1 or 2")
        inside = np.abs(u) < 1.0
        return np.where(inside, _KERNELS[self.kind][order](u), 0.0)


_KERNELS = {
    # K, K', K'', ∫K², μ2
    "epanechnikov": (
        lambda u: 0.75 * (1.0 - u * u),
        lambda u: -1.5 * u,
        lambda u: np.full_like(u, -1.5),
        3.0 / 5.0,
        1.0 / 5.0,
    ),
    "biweight": (
        lambda u: 15.0 / 16.0 * (1.0 - u * u) ** 2,
        lambda u: -15.0 / 4.0 * u * (1.0 - u * u),
        lambda u: -15.0 / 4.0 * (1.0 - 3.0 * u * u),
        5.0 / 7.0,
        1.0 / 7.0,
    ),
    "triangular": (
        lambda u: 1.0 - np.abs(u),
        lambda u: -np.sign(u),
        lambda u: np.zeros_like(u),
        2.0 / 3.0,
        1.0 / 6.0,
    ),
}


def get_kernel(kernel: str | KernelSpec) -> KernelSpec:
    return kernel if isinstance(kernel, KernelSpec) else KernelSpec(str(kernel).lower())


def _values(data, rows: str):
    """Accept a MergedSample (study outcomes / aux covariate) or a plain array."""
    if hasattr(data, "r"):
        return data.y if rows == "y" else data.x
    return np.asarray(data, dtype=float).ravel()


def empirical_quantile(y, tau: float) -> float:
    """Left-continuous empirical quantile ``inf{q : F_n(q) >= tau}``.

    This is an exact minimiser of the check-function objective.
    """
    if not 0.0 < tau < 1.0:
        raise ValidationError(f"tau must lie in (0, 1), got {tau}")
    y = np.sort(_values(y, "y"))
    if y.size < 1:
        raise ValidationError("empty sample")
    # rounding guards against n*tau landing a hair above an integer
    k = int(np.ceil(np.round(y.size * tau, 10))) - 1
    return float(y[max(k, 0)])


def rule_of_thumb_bandwidth(y) -> float:
    """``n^-0.01 * 1.06 * min(sd, IQR) * n^-0.2`` for the outcome density."""
    y = _values(y, "y")
    n = y.size
    if n < 2:
        raise ValidationError("bandwidth rule needs at least two observations")
    sd = float(np.std(y, ddof=1))
    q75, q25 = np.percentile(y, [75, 25])
    spread = min(sd, float(q75 - q25))
    if not spread > 0:
        # fall back to sd when the IQR alone is degenerate
        spread = sd
    if not spread > 0:
        raise ValidationError("outcome has zero dispersion; bandwidth undefined")
    return float(n ** -0.01 * 1.06 * spread * n ** -0.2)


def covariate_bandwidth(x, c: float = 1.06) -> float:
    """``c * sd(x) * n^(-1/3)``; undersmoothed so that ``n b^4 -> 0``."""
    x = _values(x, "x")
    if x.size < 2:
        raise ValidationError("bandwidth rule needs at least two observations")
    sd = float(np.std(x, ddof=1))
    if not sd > 0:
        raise ValidationError("covariate has zero dispersion; bandwidth undefined")
    return float(c * sd * x.size ** (-1.0 / 3.0))


def kernel_sums(data, x_eval, b: float, kernel="epanechnikov", weights=None, order: int = 0,
                max_pairs: int = 2_000_000) -> np.ndarray:
    """``S[j, :] = sum_i weights[i, :] * K^(order)((data_i - x_eval_j) / b)``.

    Only pairs within the kernel support are visited, via a sorted window per
    evaluation point. ``weights`` may be None (ones), 1-D or 2-D ``(n, p)``.
    Returns shape ``(m,)`` for None/1-D weights and ``(m, p)`` otherwise.
    """
    K = get_kernel(kernel)
    data = np.asarray(data, dtype=float).ravel()
    x_eval = np.atleast_1d(np.asarray(x_eval, dtype=float)).ravel()
    if not b > 0:
        raise ValidationError(f"bandwidth must be positive, got {b}")
    squeeze = weights is None or np.ndim(weights) == 1
    w = np.ones((data.size, 1)) if weights is None else np.asarray(weights, dtype=float).reshape(data.size, -1)
    order_idx = np.argsort(data, kind="stable")
    ds, ws = data[order_idx], w[order_idx]
    lo = np.searchsorted(ds, x_eval - K.radius * b, side="left")
    hi = np.searchsorted(ds, x_eval + K.radius * b, side="right")
    counts = hi - lo
    out = np.zeros((x_eval.size, ws.shape[1]))
    # chunk evaluation points so the flattened pair arrays stay bounded
    start = 0
    csum = np.cumsum(counts)
    while start < x_eval.size:
        base = csum[start - 1] if start else 0
        stop = int(np.searchsorted(csum, base + max_pairs, side="right"))
        stop = max(stop, start + 1)
        c = counts[start:stop]
        tot = int(c.sum())
        if tot:
            owner = np.repeat(np.arange(start, stop), c)
            offs = np.arange(tot) - np.repeat(np.cumsum(c) - c, c)
            idx = lo[owner] + offs
            u = (ds[idx] - x_eval[owner]) / b
            kv = K.derivative(u, order)
            for col in range(ws.shape[1]):
                out[start:stop, col] = np.bincount(owner - start, weights=kv * ws[idx, col], minlength=stop - start)
        start = stop
    return out[:, 0] if squeeze else out


def kernel_matrix(data, x_eval, b: float, kernel="epanechnikov", order: int = 0):
    """Sparse ``(m, n)`` matrix with entries ``K^(order)((data_i - x_eval_j) / b)``.

    Worth building when several weight vectors are smoothed on the same points.
    """
    K = get_kernel(kernel)
    data = np.asarray(data, dtype=float).ravel()
    x_eval = np.atleast_1d(np.asarray(x_eval, dtype=float)).ravel()
    if not b > 0:
        raise ValidationError(f"bandwidth must be positive, got {b}")
    order_idx = np.argsort(data, kind="stable")
    ds = data[order_idx]
    lo = np.searchsorted(ds, x_eval - K.radius * b, side="left")
    hi = np.searchsorted(ds, x_eval + K.radius * b, side="right")
    counts = hi - lo
    tot = int(counts.sum())
    owner = np.repeat(np.arange(x_eval.size), counts)
    offs = np.arange(tot) - np.repeat(np.cumsum(counts) - counts, counts)
    idx = lo[owner] + offs
    vals = K.derivative((ds[idx] - x_eval[owner]) / b, order)
    indptr = np.concatenate([[0], np.cumsum(counts)])
    return sparse.csr_matrix((vals, order_idx[idx], indptr), shape=(x_eval.size, data.size))


def kde(data, x_eval, b: float, kernel="epanechnikov", weights=None) -> np.ndarray:
    """``(1/n) sum_i w_i K_b(data_i - x)`` with ``K_b(u) = K(u/b)/b``."""
    data = np.asarray(data, dtype=float).ravel()
    return kernel_sums(data, x_eval, b, kernel, weights) / (data.size * b)


def kde_derivative(data, x_eval, b: float, order: int, kernel="biweight", weights=None) -> np.ndarray:
    """Derivative of :func:`kde` with respect to the evaluation point."""
    data = np.asarray(data, dtype=float).ravel()
    s = kernel_sums(data, x_eval, b, kernel, weights, order=order)
    return s * (-1.0) ** order / (data.size * b ** (order + 1))


def kde_outcome_density(y, y_eval, b_y: float, kernel="epanechnikov") -> np.ndarray:
    """Unweighted KDE of the study-sample outcomes."""
    return kde(_values(y, "y"), y_eval, b_y, kernel)


def trimmed_interval(x, b: float, kernel="epanechnikov") -> tuple[float, float]:
    """``[min + rho b / 2, max - rho b / 2]``: points whose kernel window stays inside the data range."""
    x = _values(x, "x")
    K = get_kernel(kernel)
    return float(x.min() + K.radius * b), float(x.max() - K.radius * b)


def _normalized(ell, n: int) -> np.ndarray:
    if ell is None:
        return np.ones(n)
    w = np.asarray(ell, dtype=float).ravel()
    if w.size != n:
        raise ValidationError(f"weights have length {w.size}, expected {n}")
    if np.any(w < 0) or not np.all(np.isfinite(w)) or w.sum() <= 0:
        raise ValidationError("weights must be finite, nonnegative and not all zero")
    return w / w.mean()


def kde_covariate_density_trimmed(x, ell, x_eval, b_x: float, kernel="epanechnikov"):
    """Likelihood-ratio weighted KDE of the auxiliary covariate with a trimming flag.

    Weights are normalised to mean one. Returns ``(f_hat, in_trim)``;
    ``in_trim`` is False at points too close to the edge of the data range,
    where ``f_hat`` must not be used as a divisor.
    """
    x = _values(x, "x")
    if x.size == 0:
        raise ValidationError("empty auxiliary sample")
    w = _normalized(ell, x.size)
    x_eval = np.atleast_1d(np.asarray(x_eval, dtype=float))
    f = kde(x, x_eval, b_x, kernel, weights=w)
    lo, hi = trimmed_interval(x, b_x, kernel)
    return f, (x_eval >= lo) & (x_eval <= hi)


def weighted_ecdf(x, ell, x_eval) -> np.ndarray:
    """Right-continuous weighted ECDF with normalised weights (terminal value 1)."""
    x = _values(x, "x")
    w = _normalized(ell, x.size)
    order = np.argsort(x, kind="stable")
    xs, cw = x[order], np.cumsum(w[order])
    cw /= cw[-1]
    k = np.searchsorted(xs, np.asarray(x_eval, dtype=float), side="right")
    return np.where(k > 0, cw[np.maximum(k - 1, 0)], 0.0)


def smoothed_ecdf_knots(x, weights=None) -> tuple[np.ndarray, np.ndarray]:
    """Knots ``(x_k, u_k)`` of the linearly interpolated (weighted) ECDF.

    Distinct sorted values carry aggregated probability ``p_k``; the knot
    height is the midpoint ``P_k - p_k / 2`` rescaled affinely so the first
    knot sits at 0 and the last at 1. Unweighted data give ``(k-1)/(m-1)``.
    """
    x = np.asarray(x, dtype=float).ravel()
    w = np.ones(x.size) if weights is None else np.asarray(weights, dtype=float).ravel()
    xs, inv = np.unique(x, return_inverse=True)
    if xs.size < 2:
        raise ValidationError("need at least two distinct values to build an interpolated CDF")
    p = np.bincount(inv, weights=w, minlength=xs.size)
    if np.any(p <= 0):
        raise ValidationError("every distinct value needs positive weight")
    p = p / p.sum()
    mid = np.cumsum(p) - 0.5 * p
    u = (mid - mid[0]) / (mid[-1] - mid[0])
    u[-1] = 1.0
    return xs, u


class InterpolatedCdf:
    """Continuous, strictly increasing piecewise-linear CDF through ``(x_k, u_k)``."""

    def __init__(self, knots: np.ndarray, levels: np.ndarray):
        knots = np.asarray(knots, dtype=float)
        levels = np.asarray(levels, dtype=float)
        if knots.size < 2 or knots.shape != levels.shape:
            raise ValidationError("interpolated CDF needs at least two matching knots/levels")
        if np.any(np.diff(knots) <= 0) or np.any(np.diff(levels) <= 0):
            raise ValidationError("knots and levels must be strictly increasing")
        if abs(levels[0]) > 1e-12 or abs(levels[-1] - 1.0) > 1e-12:
            raise ValidationError("levels must run from 0 to 1")
        self.knots, self.levels = knots, levels
        self.slopes = np.diff(levels) / np.diff(knots)

    @classmethod
    def from_sample(cls, x, weights=None) -> "InterpolatedCdf":
        return cls(*smoothed_ecdf_knots(x, weights))

    def cdf(self, x):
        return np.interp(np.asarray(x, dtype=float), self.knots, self.levels, left=0.0, right=1.0)

    def quantile(self, u):
        return np.interp(np.asarray(u, dtype=float), self.levels, self.knots)

    def pdf(self, x):
        """Right derivative of the interpolant; the last knot takes the left slope."""
        x = np.asarray(x, dtype=float)
        seg = np.searchsorted(self.knots, x, side="right") - 1
        inside = (x >= self.knots[0]) & (x <= self.knots[-1])
        seg = np.clip(seg, 0, self.slopes.size - 1)
        return np.where(inside, self.slopes[seg], 0.0)

    def pdf_at_quantile(self, u):
        """Slope of the segment hit by ``quantile(u)`` (right derivative at knots)."""
        u = np.asarray(u, dtype=float)
        seg = np.clip(np.searchsorted(self.levels, u, side="right") - 1, 0, self.slopes.size - 1)
        return self.slopes[seg]
