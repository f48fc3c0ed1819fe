"""Partial-identification bounds on the distributional-shift effect for a discrete covariate.

For support points ``x^1 < ... < x^l`` the effect is a sum over ``j = 2..l``
of the period bound generating function

    h(x^j, x^{j-1}, z1) = -(Lambda(x^{j-1}, z1) - Lambda(x^j, z1)) (G(x^{j-1}) - F(x^{j-1})) / f_Y(q),

integrated against an unidentified conditional law of ``z1``. The ``j = 1``
term vanishes because ``G(x^0) = F(x^0) = 0`` (``x^0 = -inf``). Each
summand is bounded by evaluating ``h`` at the ``z1`` maximising or minimising
the ``Lambda`` difference over the observed ``z1`` rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .counterfactual import build_counterfactual
from .errors import ValidationError
from .outcome_model import LambdaModel
from .sample import MergedSample

__all__ = ["DiscreteSupport", "BoundsResult", "discrete_support", "period_bound", "estimate_bounds"]


@dataclass(frozen=True)
class DiscreteSupport:
    points: np.ndarray
    F_hat: np.ndarray  # cumulative, terminal value 1
    G: np.ndarray  # cumulative, terminal value 1


@dataclass(frozen=True)
class BoundsResult:
    tau: float
    lower: float
    upper: float
    collapsed: bool
    f_y_at_q: float
    q_hat: float
    terms: list = field(default_factory=list)  # per-j details

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "lower": self.lower,
            "upper": self.upper,
            "width": self.width,
            "collapsed": self.collapsed,
            "f_y_at_q": self.f_y_at_q,
            "q_hat": self.q_hat,
            "terms": self.terms,
        }


def discrete_support(x, ell_hat, G, max_levels: int = 50) -> DiscreteSupport:
    """Support points, ``ell``-weighted cumulative masses and ``G`` at those points."""
    x = np.asarray(x, dtype=float)
    pts, inv = np.unique(x, return_inverse=True)
    if pts.size > max_levels:
        raise ValidationError(f"covariate has {pts.size} distinct values, more than max_levels={max_levels}")
    if pts.size < 2:
        raise ValidationError("a discrete covariate needs at least two support points")
    w = np.ones(x.size) if ell_hat is None else np.asarray(ell_hat, dtype=float)
    mass = np.bincount(inv, weights=w, minlength=pts.size)
    F = np.cumsum(mass) / mass.sum()
    F[-1] = 1.0
    G = build_counterfactual(G)
    if G.discrete_points is not None and not np.all(np.isin(G.discrete_points, pts)):
        raise ValidationError("counterfactual support must lie inside the observed covariate support")
    Gv = np.asarray(G.cdf(pts), dtype=float)
    if abs(Gv[-1] - 1.0) > 1e-9:
        raise ValidationError("counterfactual puts mass above the largest covariate value")
    return DiscreteSupport(pts, F, Gv)


def period_bound(lam_jm1, lam_j, G_jm1: float, F_jm1: float, f_y: float):
    """``h = -(Lambda(x^{j-1}, z1) - Lambda(x^j, z1)) (G(x^{j-1}) - F(x^{j-1})) / f_Y``."""
    if not f_y > 0:
        raise ValidationError("outcome density must be positive")
    return -(np.asarray(lam_jm1) - np.asarray(lam_j)) * (G_jm1 - F_jm1) / f_y


def _lambda_at(model: LambdaModel, beta, x: float, z1_rows: np.ndarray, z1_names) -> np.ndarray:
    cols = {name: z1_rows[:, k] for k, name in enumerate(z1_names)}
    cols["x"] = np.full(z1_rows.shape[0], float(x))
    return model.evaluate(cols, z1_rows.shape[0], beta)[0]


def estimate_bounds(merged: MergedSample, th, G, tau: float | None = None, z1_search=None,
                    tol: float = 1e-10, max_levels: int = 50) -> BoundsResult:
    """Estimated identified interval for the distributional-shift effect.

    ``th`` is a fitted :class:`~uqe2s.uqe.ThetaEstimate`. ``z1_search``
    defaults to the distinct ``z1`` rows in the merged sample.
    """
    sup = discrete_support(merged.x, th.prop.ell_hat, G, max_levels)
    if z1_search is None:
        z1_rows = np.unique(merged.z1, axis=0) if merged.z1.shape[1] else np.zeros((1, 0))
    else:
        z1_rows = np.asarray(z1_search, dtype=float).reshape(-1, merged.z1.shape[1])
    if z1_rows.shape[0] == 0:
        raise ValidationError("empty z1 search set")
    f_y = th.f_y
    beta = th.gmm.beta
    lam = np.stack([_lambda_at(th.model, beta, xv, z1_rows, merged.z1_names) for xv in sup.points])
    lower = upper = 0.0
    terms = []
    for j in range(1, sup.points.size):
        diff = lam[j - 1] - lam[j]
        i_star, i_dag = int(np.argmax(diff)), int(np.argmin(diff))
        Gm, Fm = float(sup.G[j - 1]), float(sup.F_hat[j - 1])
        h_star = float(period_bound(lam[j - 1, i_star], lam[j, i_star], Gm, Fm, f_y))
        h_dag = float(period_bound(lam[j - 1, i_dag], lam[j, i_dag], Gm, Fm, f_y))
        plus = Gm <= Fm
        if plus:
            upper += h_star
            lower += h_dag
        else:
            upper += h_dag
            lower += h_star
        terms.append({
            "j": j + 1,
            "x_j": float(sup.points[j]),
            "x_jm1": float(sup.points[j - 1]),
            "G_jm1": Gm,
            "F_jm1": Fm,
            "set": "J+" if plus else "J-",
            "z1_star": z1_rows[i_star].tolist(),
            "z1_dagger": z1_rows[i_dag].tolist(),
            "h_star": h_star,
            "h_dagger": h_dag,
        })
    lo, hi = min(lower, upper), max(lower, upper)
    t = th.tau if tau is None else tau
    return BoundsResult(float(t), float(lo), float(hi), bool(hi - lo <= tol), float(f_y), float(th.q_hat), terms)
