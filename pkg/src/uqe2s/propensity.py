"""Propensity MLE, auxiliary-to-study tilting, tilt weights and the likelihood ratio."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, OverlapError, SeparationError, ValidationError
from .links import LinkFunction, get_link
from .sample import MergedSample
from .terms import TermSet

__all__ = [
    "PropensityFit",
    "fit_propensity",
    "fit_tilts",
    "compute_tilt_weights",
    "likelihood_ratio",
    "fit_propensity_model",
    "build_basis",
    "PROB_FLOOR",
]

PROB_FLOOR = 1e-6
DEFAULT_BASIS = ("1", "z1", "z2")


def build_basis(merged: MergedSample, basis) -> tuple[TermSet, np.ndarray]:
    """Resolve a basis spec (TermSet or term list) into ``(TermSet, design)`` on the merged rows."""
    ts = basis if isinstance(basis, TermSet) else TermSet.from_spec(
        list(basis), merged.z1_names, merged.z2_names, allow_x=False, allow_z2=True
    )
    B = ts.design(merged.columns(), merged.n)
    if not np.all(np.isfinite(B)):
        raise ValidationError("basis evaluates to non-finite values")
    return ts, B


def _check_rank(B: np.ndarray, what: str) -> None:
    s = np.linalg.svd(B / np.sqrt(B.shape[0]), compute_uv=False)
    if s.size == 0 or s[-1] <= 1e-10 * max(s[0], 1.0):
        raise ValidationError(
            f"{what} design is rank deficient (smallest singular value {s[-1] if s.size else 0:.3g})"
        )


def _check_band(p: np.ndarray, what: str, eps: float = PROB_FLOOR) -> None:
    bad = np.flatnonzero((p <= eps) | (p >= 1.0 - eps))
    if bad.size:
        raise OverlapError(
            f"{what}: fitted probability outside ({eps:g}, 1-{eps:g}) at {bad.size} row(s), "
            f"first row index {bad[0]} (value {p[bad[0]]:.3g})"
        )


def fit_propensity(merged: MergedSample, basis_k=DEFAULT_BASIS, link="logit", tol: float = 1e-8,
                   max_iter: int = 100) -> tuple[np.ndarray, dict]:
    """Bernoulli maximum likelihood for ``P(R=1|Z) = L(k(Z)'gamma)``.

    Newton-Raphson on the mean log-likelihood with step halving. Returns
    ``(gamma, info)``; convergence means the sup-norm of the mean score is
    at most ``tol``.
    """
    L = get_link(link)
    _, K = build_basis(merged, basis_k)
    _check_rank(K, "propensity basis")
    r = merged.r
    gamma = np.zeros(K.shape[1])
    # start the intercept (if any) at the sample share
    const = np.flatnonzero(np.all(K == 1.0, axis=0))
    if const.size:
        gamma[const[0]] = float(L.inverse(merged.q0_hat))

    def loglik(g):
        v = K @ g
        return float(np.mean(r * L.logcdf(v) + (1 - r) * L.logsf(v)))

    ll = loglik(gamma)
    grad = np.inf
    for it in range(1, max_iter + 1):
        v = K @ gamma
        p, d1, d2 = L.evaluate(v)
        pq = p * (1 - p)
        a = d1 / pq
        da = (d2 * pq - d1 * d1 * (1 - 2 * p)) / pq**2
        score = K.T @ ((r - p) * a) / K.shape[0]
        grad = float(np.max(np.abs(score)))
        if grad <= tol:
            break
        H = (K * (da * (r - p) - a * d1)[:, None]).T @ K / K.shape[0]
        try:
            step = np.linalg.solve(H, -score)
        except np.linalg.LinAlgError:
            step = score
        if score @ step <= 0:  # observed Hessian not negative definite: fall back to Fisher scoring
            H_f = -(K * (a * d1)[:, None]).T @ K / K.shape[0]
            step = np.linalg.solve(H_f, -score)
        t = 1.0
        while t > 1e-10:
            cand = gamma + t * step
            ll_new = loglik(cand)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-14:
                break
            t *= 0.5
        else:
            break
        gamma, ll = cand, ll_new
        extreme = np.mean((p < 1e-8) | (p > 1 - 1e-8))
        if extreme > 0.01 and np.linalg.norm(gamma) > 30:
            raise SeparationError(
                f"propensity MLE diverging: {extreme:.1%} of fitted probabilities at 0/1 "
                f"(|gamma| = {np.linalg.norm(gamma):.3g}); the samples look perfectly separated"
            )
    p = L.cdf(K @ gamma)
    if np.mean((p < 1e-8) | (p > 1 - 1e-8)) > 0.01:
        # the score vanishes as probabilities saturate, so a "converged" fit can still be separated
        raise SeparationError(
            f"propensity MLE: {np.mean((p < 1e-8) | (p > 1 - 1e-8)):.1%} of fitted probabilities at 0/1 "
            f"(|gamma| = {np.linalg.norm(gamma):.3g}); the samples look perfectly separated"
        )
    if grad > tol:
        raise ConvergenceError(f"propensity MLE did not converge (score norm {grad:.3g})")
    _check_band(L.cdf(K @ gamma), "propensity")
    return gamma, {"iterations": it, "score_norm": grad, "loglik": ll}


def _solve_tilt(F, J, dim: int, tol: float, max_iter: int, what: str) -> tuple[np.ndarray, dict]:
    lam = np.zeros(dim)
    f = F(lam)
    norm = float(np.max(np.abs(f)))
    it = 0
    for it in range(1, max_iter + 1):
        if norm <= tol:
            break
        try:
            step = np.linalg.solve(J(lam), -f)
        except np.linalg.LinAlgError:
            raise ConvergenceError(f"{what}: singular Jacobian") from None
        t = 1.0
        while t > 1e-10:
            cand = lam + t * step
            with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
                f_new = F(cand)
            n_new = float(np.max(np.abs(f_new)))
            if np.isfinite(n_new) and n_new < norm:
                break
            t *= 0.5
        else:
            break
        lam, f, norm = cand, f_new, n_new
    if norm > tol:
        raise ConvergenceError(f"{what}: tilting equations not solved (residual {norm:.3g})")
    return lam, {"iterations": it, "residual": norm}


def fit_tilts(merged: MergedSample, gamma, basis_k=DEFAULT_BASIS, basis_t=DEFAULT_BASIS, link="logit",
              tol: float = 1e-12, max_iter: int = 100):
    """Solve the study and auxiliary tilting equations.

    ``lambda_a``: mean[((1-R)/(1-L(v_a)) - 1) L0 t] = 0,
    ``lambda_s``: mean[(R/L(v_s) - 1) L0 t] = 0, with ``v = k'gamma + t'lambda``
    and ``L0 = L(k'gamma)``. Returns ``(lambda_s, lambda_a, info)``.
    """
    L = get_link(link)
    _, K = build_basis(merged, basis_k)
    ts, T = build_basis(merged, basis_t)
    if not ts.terms[0].factors == ():
        raise ValidationError("tilting basis must start with the constant term '1'")
    _check_rank(T, "tilting basis")
    r = merged.r
    base = K @ np.asarray(gamma, dtype=float)
    L0 = L.cdf(base)
    n = merged.n

    def F_a(lam):
        v = base + T @ lam
        return T.T @ (((1 - r) / L.cdf(-v) - 1) * L0) / n

    def J_a(lam):
        v = base + T @ lam
        return (T * ((1 - r) * L.pdf(v) / L.cdf(-v) ** 2 * L0)[:, None]).T @ T / n

    def F_s(lam):
        v = base + T @ lam
        return T.T @ ((r / L.cdf(v) - 1) * L0) / n

    def J_s(lam):
        v = base + T @ lam
        return -(T * (r * L.pdf(v) / L.cdf(v) ** 2 * L0)[:, None]).T @ T / n

    lam_a, info_a = _solve_tilt(F_a, J_a, T.shape[1], tol, max_iter, "auxiliary tilt")
    lam_s, info_s = _solve_tilt(F_s, J_s, T.shape[1], tol, max_iter, "study tilt")
    _check_band(L.cdf(base + T @ lam_s), "study tilt")
    _check_band(L.cdf(base + T @ lam_a), "auxiliary tilt")
    return lam_s, lam_a, {"study": info_s, "aux": info_a}


def compute_tilt_weights(merged: MergedSample, gamma, lambda_s, lambda_a, basis_k=DEFAULT_BASIS,
                         basis_t=DEFAULT_BASIS, link="logit"):
    """``pi_s = L0 / L(v_s)`` and ``pi_a = L0 / (1 - L(v_a))`` on every merged row."""
    L = get_link(link)
    _, K = build_basis(merged, basis_k)
    _, T = build_basis(merged, basis_t)
    base = K @ np.asarray(gamma, dtype=float)
    Ls = L.cdf(base + T @ np.asarray(lambda_s, dtype=float))
    La_c = L.cdf(-(base + T @ np.asarray(lambda_a, dtype=float)))
    _check_band(Ls, "study tilt")
    _check_band(1 - La_c, "auxiliary tilt")
    L0 = L.cdf(base)
    return L0 / Ls, L0 / La_c


def likelihood_ratio(merged: MergedSample, gamma, lambda_s, lambda_a, basis_k=DEFAULT_BASIS,
                     basis_t=DEFAULT_BASIS, link="logit") -> np.ndarray:
    """``(n_a/n_s) L(v_s) / (1 - L(v_a))`` evaluated on the auxiliary rows."""
    L = get_link(link)
    _, K = build_basis(merged, basis_k)
    _, T = build_basis(merged, basis_t)
    base = K @ np.asarray(gamma, dtype=float)
    Ls = L.cdf(base + T @ np.asarray(lambda_s, dtype=float))
    La_c = L.cdf(-(base + T @ np.asarray(lambda_a, dtype=float)))
    _check_band(Ls, "study tilt")
    _check_band(1 - La_c, "auxiliary tilt")
    rho = Ls / La_c
    return (merged.n_a / merged.n_s) * rho[merged.aux_rows]


@dataclass(frozen=True)
class PropensityFit:
    """Fitted propensity score, tilts and per-row weights on the merged sample."""

    link: LinkFunction
    basis_k: TermSet
    basis_t: TermSet
    K: np.ndarray
    T: np.ndarray
    gamma: np.ndarray
    lambda_s: np.ndarray
    lambda_a: np.ndarray
    pi_s: np.ndarray
    pi_a: np.ndarray
    ell_hat: np.ndarray  # auxiliary rows only
    diagnostics: dict = field(default_factory=dict)

    def balance(self, merged: MergedSample) -> np.ndarray:
        """Max componentwise gaps among the three balanced means of ``t(Z)``."""
        r = merged.r
        ms = self.T.T @ (r * self.pi_s) / merged.n
        m0 = self.T.T @ self.link.cdf(self.K @ self.gamma) / merged.n
        ma = self.T.T @ ((1 - r) * self.pi_a) / merged.n
        return np.array([np.max(np.abs(ms - ma)), np.max(np.abs(ms - m0)), np.max(np.abs(ma - m0))])


def fit_propensity_model(merged: MergedSample, basis_k=DEFAULT_BASIS, basis_t=DEFAULT_BASIS,
                         link="logit") -> PropensityFit:
    """Steps 2-3: propensity MLE, both tilts, tilt weights and the likelihood ratio."""
    L = get_link(link)
    tk, K = build_basis(merged, basis_k)
    tt, T = build_basis(merged, basis_t)
    gamma, info_g = fit_propensity(merged, tk, L)
    lam_s, lam_a, info_t = fit_tilts(merged, gamma, tk, tt, L)
    pi_s, pi_a = compute_tilt_weights(merged, gamma, lam_s, lam_a, tk, tt, L)
    ell = likelihood_ratio(merged, gamma, lam_s, lam_a, tk, tt, L)
    for a in (K, T, pi_s, pi_a, ell):
        a.setflags(write=False)
    fit = PropensityFit(L, tk, tt, K, T, gamma, lam_s, lam_a, pi_s, pi_a, ell,
                        {"propensity": info_g, "tilts": info_t})
    fit.diagnostics["balance_gap"] = float(fit.balance(merged).max())
    return fit
