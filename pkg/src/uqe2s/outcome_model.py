"""Parametric model for ``P(Y <= q | X, Z1, R=1)`` and its GMM fit from tilted moments."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, IdentificationError, ValidationError
from .links import LinkFunction, get_link
from .propensity import PropensityFit, build_basis
from .sample import MergedSample
from .terms import TermSet

__all__ = ["LambdaModel", "GmmFit", "lambda_eval", "moment_matrix", "fit_beta", "DEFAULT_INDEX"]

DEFAULT_INDEX = ("1", "z1", "x", "x^2")


@dataclass(frozen=True)
class LambdaModel:
    """``Lambda(w; beta) = link(index(w)'beta)`` with an index over ``x`` and ``z1``."""

    link: LinkFunction
    index: TermSet

    @classmethod
    def from_spec(cls, merged: MergedSample, index=DEFAULT_INDEX, link="logit") -> "LambdaModel":
        ts = index if isinstance(index, TermSet) else TermSet.from_spec(
            list(index), merged.z1_names, merged.z2_names, allow_x=True, allow_z2=False
        )
        return cls(get_link(link), ts)

    @property
    def dim(self) -> int:
        return len(self.index)

    @property
    def involves_x(self) -> bool:
        return self.index.involves_x

    def design(self, cols, n):
        return self.index.design(cols, n), self.index.design_dx(cols, n)

    def evaluate(self, cols, n, beta):
        """Return ``(Lambda, Lambda_x, Lambda_beta, Lambda_xbeta)``.

        ``Lambda_beta`` and ``Lambda_xbeta`` are ``(n, d_beta)`` matrices.
        """
        beta = np.asarray(beta, dtype=float)
        W, Wx = self.design(cols, n)
        v = W @ beta
        vx = Wx @ beta
        L, d1, d2 = self.link.evaluate(v)
        lam_x = d1 * vx
        lam_b = d1[:, None] * W
        lam_xb = (d2 * vx)[:, None] * W + d1[:, None] * Wx
        return L, lam_x, lam_b, lam_xb


def lambda_eval(cols, beta, model: LambdaModel):
    """Functional form of :meth:`LambdaModel.evaluate` on a column dict."""
    n = len(next(iter(cols.values()))) if cols else 1
    return model.evaluate(cols, n, beta)


def aux_columns(merged: MergedSample, x=None) -> dict:
    return merged.columns(x=merged.x if x is None else x, rows=merged.aux_rows)


def moment_matrix(merged: MergedSample, prop: PropensityFit, q_hat: float, E: np.ndarray,
                  model: LambdaModel, beta) -> np.ndarray:
    """Per-row moments ``(pi_s R 1(y<=q) - pi_a (1-R) Lambda) e(z)`` as an ``(n, d_e)`` matrix."""
    n_s = merged.n_s
    scal = np.empty(merged.n)
    scal[:n_s] = prop.pi_s[:n_s] * (merged.y <= q_hat)
    lam = model.evaluate(aux_columns(merged), merged.n_a, beta)[0]
    scal[n_s:] = -prop.pi_a[n_s:] * lam
    return scal[:, None] * E


def moment_jacobian(merged: MergedSample, prop: PropensityFit, E: np.ndarray, model: LambdaModel,
                    beta) -> np.ndarray:
    """``d gbar / d beta = -mean[pi_a (1-R) e Lambda_beta']`` (``d_e x d_beta``)."""
    n_s = merged.n_s
    lam_b = model.evaluate(aux_columns(merged), merged.n_a, beta)[2]
    return -(E[n_s:] * prop.pi_a[n_s:, None]).T @ lam_b / merged.n


@dataclass(frozen=True)
class GmmFit:
    beta: np.ndarray
    objective: float
    moment_mean: np.ndarray
    omega: np.ndarray
    gradient_norm: float
    iterations: int
    converged: bool
    jacobian_min_sv: float
    E: np.ndarray = field(repr=False)
    labels: tuple[str, ...] = ()
    diagnostics: dict = field(default_factory=dict)


def _lm(resid_jac, beta0, tol, max_iter):
    """Levenberg-Marquardt on ``0.5 ||res(beta)||^2``; returns ``(beta, obj, grad_norm, iters, ok)``."""
    beta = np.array(beta0, dtype=float)
    res, J = resid_jac(beta)
    obj = float(res @ res)
    mu = 1e-3
    grad = J.T @ res
    for it in range(1, max_iter + 1):
        gn = float(np.max(np.abs(grad)))
        if gn <= tol:
            return beta, obj, gn, it - 1, True
        A = J.T @ J
        damp = mu * np.maximum(np.diag(A), 1e-12)
        try:
            step = np.linalg.solve(A + np.diag(damp), -grad)
        except np.linalg.LinAlgError:
            mu *= 10
            continue
        cand = beta + step
        res_c, J_c = resid_jac(cand)
        obj_c = float(res_c @ res_c)
        if np.isfinite(obj_c) and obj_c <= obj:
            small = np.max(np.abs(step)) <= 1e-13 * (1 + np.max(np.abs(beta)))
            beta, res, J, obj = cand, res_c, J_c, obj_c
            grad = J.T @ res
            mu = max(mu / 5, 1e-12)
            if small:
                gn = float(np.max(np.abs(grad)))
                return beta, obj, gn, it, gn <= max(tol, 1e3 * tol)
        else:
            mu *= 10
            if mu > 1e12:
                break
    gn = float(np.max(np.abs(grad)))
    return beta, obj, gn, max_iter, gn <= tol


def fit_beta(merged: MergedSample, prop: PropensityFit, q_hat: float, basis_e=("1", "z1", "z2"),
             model: LambdaModel | None = None, weighting: str = "identity", omega=None,
             tol: float = 1e-11, max_iter: int = 500, n_starts: int = 5, seed: int = 0) -> GmmFit:
    """GMM estimate of ``beta`` minimising ``gbar' Omega gbar``.

    ``weighting`` is ``"identity"`` or ``"twostep"`` (inverse covariance of the
    moments at a first-step estimate); an explicit ``omega`` overrides both.
    """
    model = model or LambdaModel.from_spec(merged)
    te, E = build_basis(merged, basis_e)
    d_e, d_b = E.shape[1], model.dim
    if d_e < d_b:
        raise IdentificationError(
            f"order condition fails: {d_e} moment functions for {d_b} outcome-model parameters"
        )
    if weighting not in ("identity", "twostep"):
        raise ValidationError(f"unknown weighting {weighting!r}; expected 'identity' or 'twostep'")

    def gbar(beta):
        return moment_matrix(merged, prop, q_hat, E, model, beta).mean(axis=0)

    def solve(Om, starts):
        Om = 0.5 * (Om + Om.T)
        try:
            C = np.linalg.cholesky(Om)
        except np.linalg.LinAlgError:
            raise ValidationError("GMM weighting matrix is not positive definite") from None

        def rj(beta):
            return C.T @ gbar(beta), C.T @ moment_jacobian(merged, prop, E, model, beta)

        best = None
        for k, b0 in enumerate(starts):
            out = _lm(rj, b0, tol, max_iter)
            if best is None or (out[4], -out[1]) > (best[4], -best[1]):
                best = out
            # further starts only when the first does not converge (flat or multimodal objective)
            if k == 0 and out[4]:
                break
        return best, len(starts)

    # starting value: intercept at the link inverse of the tilted share below q
    b0 = np.zeros(d_b)
    share = float(np.sum(prop.pi_s[: merged.n_s] * (merged.y <= q_hat)) / np.sum(prop.pi_a[merged.n_s:]))
    share = min(max(share, 1e-4), 1 - 1e-4)
    const = [j for j, t in enumerate(model.index.terms) if not t.factors]
    if const:
        b0[const[0]] = float(model.link.inverse(share))
    rng = np.random.default_rng(seed)
    starts = [b0] + [b0 + rng.normal(scale=0.5, size=d_b) for _ in range(max(n_starts - 1, 0))]

    Om = np.eye(d_e) if omega is None else np.asarray(omega, dtype=float)
    (beta, obj, gn, iters, ok), ns = solve(Om, starts)
    if omega is None and weighting == "twostep":
        G = moment_matrix(merged, prop, q_hat, E, model, beta)
        S = np.cov(G, rowvar=False, bias=True).reshape(d_e, d_e)
        try:
            Om = np.linalg.inv(S)
        except np.linalg.LinAlgError:
            raise IdentificationError("moment covariance is singular; two-step weighting unavailable") from None
        (beta, obj, gn, iters2, ok), _ = solve(Om, [beta] + starts[1:])
        iters += iters2
    D = moment_jacobian(merged, prop, E, model, beta)
    sv = np.linalg.svd(D, compute_uv=False)
    scale = max(float(np.abs(E).mean()), 1e-300)
    if sv[-1] <= 1e-8 * scale:
        raise IdentificationError(
            f"outcome model not identified: moment Jacobian smallest singular value {sv[-1]:.3g} "
            "(check that the excluded instruments move the covariate)"
        )
    if not ok:
        raise ConvergenceError(f"GMM did not converge (gradient norm {gn:.3g} after {iters} iterations)")
    g = gbar(beta)
    for a in (beta, E, Om):
        a.setflags(write=False)
    return GmmFit(beta, float(g @ Om @ g), g, Om, gn, iters, ok, float(sv[-1]), E, tuple(model.index.labels),
                  {"n_starts_used": ns, "weighting": weighting})
