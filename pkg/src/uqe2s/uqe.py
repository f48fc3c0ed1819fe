"""Point estimation and inference for the unconditional quantile effect.

Pipeline (``fit_theta`` then ``estimate_uqe``):

1. left-continuous empirical quantile ``q_hat`` of the study outcomes;
2. propensity MLE ``gamma``;
3. study/auxiliary tilts ``lambda_s``, ``lambda_a`` and the likelihood ratio ``ell``;
4. GMM fit of the outcome model ``Lambda(x, z1; beta)``;
5. ``d_hat = mean_aux[ell * Lambda_x * g(X)]`` and ``point = -d_hat / f_Y(q_hat)``;
6. bias term, plug-in and influence-function standard errors, zero-effect test.

The influence function of ``d_hat`` is assembled from three pieces: the
nuisance part ``M' psi_theta`` where ``psi_theta`` comes from stacking the
estimating equations of steps 1-4, the part due to estimating ``F`` (and
``f`` for MDS) inside the shift direction, and the sampling variation of the
auxiliary average itself.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import stats

from .counterfactual import DENSITY_FLOOR, CounterfactualDistribution, ShiftKind, build_counterfactual
from .errors import NumericalError, UqeError, ValidationError
from .nonparametrics import (
    covariate_bandwidth,
    empirical_quantile,
    get_kernel,
    kde,
    kde_derivative,
    kernel_matrix,
    kernel_sums,
    rule_of_thumb_bandwidth,
    trimmed_interval,
)
from .outcome_model import DEFAULT_INDEX, GmmFit, LambdaModel, aux_columns, fit_beta
from .propensity import DEFAULT_BASIS, PropensityFit, fit_propensity_model
from .sample import MergedSample

__all__ = [
    "EstimatorConfig",
    "ThetaEstimate",
    "UqeResult",
    "InfluenceComponents",
    "fit_theta",
    "estimate_d",
    "estimate_uqe",
    "bias_term",
    "plugin_se",
    "influence_components",
    "improved_se",
    "zero_effect_test",
    "jacobian_check",
    "run_pipeline",
]

Z975 = float(stats.norm.ppf(0.975))


@dataclass(frozen=True)
class EstimatorConfig:
    """Tuning choices for the estimator; defaults follow the application setup."""

    prop_link: str = "logit"
    basis_k: tuple[str, ...] = DEFAULT_BASIS
    basis_t: tuple[str, ...] = DEFAULT_BASIS
    basis_e: tuple[str, ...] = DEFAULT_BASIS
    basis_degree: int = 1
    lambda_link: str = "logit"
    lambda_index: tuple[str, ...] = DEFAULT_INDEX
    kernel_y: str = "epanechnikov"
    kernel_x: str = "epanechnikov"
    bandwidth_y: float | str = "paper"
    bandwidth_x: float | str = "n13"
    derivative_bandwidth_factor: float = 2.0
    gmm_weighting: str = "identity"
    gmm_tol: float = 1e-11
    gmm_max_iter: int = 500
    density_floor: float = DENSITY_FLOOR
    recenter_ci: bool = False

    def bases(self):
        from .terms import expand_degree

        d = self.basis_degree
        return (expand_degree(self.basis_k, d), expand_degree(self.basis_t, d), expand_degree(self.basis_e, d))


@dataclass(frozen=True)
class ThetaEstimate:
    """Fitted nuisances of steps 1-4 for one quantile level."""

    tau: float
    q_hat: float
    prop: PropensityFit
    gmm: GmmFit
    model: LambdaModel
    b_y: float
    b_x: float
    kernel_y: str
    kernel_x: str
    f_y: float  # f_Y|R=1 at q_hat
    f_y1: float  # first derivative (oversmoothed)
    f_y2: float  # second derivative (oversmoothed)

    @property
    def theta(self) -> np.ndarray:
        """Stacked ``(gamma, lambda_s, lambda_a, beta)``."""
        return np.concatenate([self.prop.gamma, self.prop.lambda_s, self.prop.lambda_a, self.gmm.beta])

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return (self.prop.gamma.size, self.prop.lambda_s.size, self.prop.lambda_a.size, self.gmm.beta.size)

    def F_hat_distribution(self, merged: MergedSample) -> CounterfactualDistribution:
        """The interpolated, likelihood-ratio weighted ``F_{X|R=1}`` as a distribution object."""
        return CounterfactualDistribution.from_sample(merged.x, self.prop.ell_hat, label="F_hat")


@dataclass(frozen=True)
class InfluenceComponents:
    psi_fy: np.ndarray
    psi_d: np.ndarray
    psi: np.ndarray
    psi_theta: np.ndarray
    psi_g: np.ndarray
    psi_direct: np.ndarray
    M: np.ndarray
    H_cond: float
    fallback: bool = False


@dataclass(frozen=True)
class UqeResult:
    tau: float
    kind: str
    point: float
    d_hat: float
    f_y_at_q: float
    q_hat: float
    bias: float
    se_plugin: float
    se_improved: float
    ci_95: tuple[float, float]
    test_statistic: float
    p_value: float
    n: int
    n_retained: int
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ci_95"] = list(self.ci_95)
        return d


# --------------------------------------------------------------------------- steps 1-4


def _bandwidths(merged: MergedSample, cfg: EstimatorConfig) -> tuple[float, float]:
    by = rule_of_thumb_bandwidth(merged.y) if cfg.bandwidth_y == "paper" else float(cfg.bandwidth_y)
    bx = covariate_bandwidth(merged.x) if cfg.bandwidth_x == "n13" else float(cfg.bandwidth_x)
    if not (by > 0 and bx > 0):
        raise ValidationError(f"bandwidths must be positive (b_y={by}, b_x={bx})")
    return by, bx


def _tagged(step: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except UqeError as exc:
        if exc.step is None:
            exc.step = step
        raise


def fit_theta(merged: MergedSample, tau: float, cfg: EstimatorConfig | None = None,
              prop: PropensityFit | None = None) -> ThetaEstimate:
    """Steps 1-4. Pass ``prop`` to reuse a propensity fit across quantile levels."""
    cfg = cfg or EstimatorConfig()
    bk, bt, be = cfg.bases()
    q_hat = _tagged("1:quantile", empirical_quantile, merged.y, tau)
    if prop is None:
        prop = _tagged("2-3:propensity", fit_propensity_model, merged, bk, bt, cfg.prop_link)
    model = _tagged("4:outcome_model", LambdaModel.from_spec, merged, cfg.lambda_index, cfg.lambda_link)
    gmm = _tagged("4:outcome_model", fit_beta, merged, prop, q_hat, be, model, cfg.gmm_weighting,
                  None, cfg.gmm_tol, cfg.gmm_max_iter)
    by, bx = _tagged("5:bandwidth", _bandwidths, merged, cfg)
    f_y = float(kde(merged.y, q_hat, by, cfg.kernel_y)[0])
    bd = cfg.derivative_bandwidth_factor * by
    f1 = float(kde_derivative(merged.y, q_hat, bd, 1, "biweight")[0])
    f2 = float(kde_derivative(merged.y, q_hat, bd, 2, "biweight")[0])
    return ThetaEstimate(tau, q_hat, prop, gmm, model, by, bx, cfg.kernel_y, cfg.kernel_x, f_y, f1, f2)


# --------------------------------------------------------------------------- d_hat and its derivative


class _DFunctional:
    """``d(theta)`` with trimming/floor masks frozen at the fitted values.

    Holds everything needed to evaluate ``d_hat`` and its exact derivative with
    respect to ``theta = (gamma, lambda_s, lambda_a, beta)``.
    """

    def __init__(self, merged: MergedSample, th: ThetaEstimate, G: CounterfactualDistribution, kind,
                 floor: float = DENSITY_FLOOR):
        self.m, self.th, self.G = merged, th, G
        self.kind = ShiftKind.parse(kind)
        self.floor = floor
        self.x = merged.x
        self.cols = aux_columns(merged)
        self.Ka = th.prop.K[merged.aux_rows]
        self.Ta = th.prop.T[merged.aux_rows]
        self.link = th.prop.link
        self.scale = merged.n_a / merged.n_s
        self.knots, self.inv = np.unique(self.x, return_inverse=True)
        dg, dls, dla, db = th.dims
        self.sl = {
            "gamma": slice(0, dg),
            "lambda_s": slice(dg, dg + dls),
            "lambda_a": slice(dg + dls, dg + dls + dla),
            "beta": slice(dg + dls + dla, dg + dls + dla + db),
        }
        if self.kind is ShiftKind.MDS and G.discrete_points is not None:
            raise ValidationError("MDS with a discrete counterfactual needs the discrete-bounds pipeline")
        # masks from the fitted values
        rho = self._rho(th.theta)[0]
        self.keep = np.ones(self.x.size, dtype=bool)
        self.Kret = None
        if self.kind is ShiftKind.MDS:
            Kfull = kernel_matrix(self.x, self.x, th.b_x, th.kernel_x)
            f = Kfull @ rho / (th.b_x * rho.sum())
            lo, hi = trimmed_interval(self.x, th.b_x, th.kernel_x)
            in_trim = (self.x >= lo) & (self.x <= hi)
            self.keep = in_trim & (f >= floor * f.max())
            if not self.keep.any():
                raise NumericalError("every auxiliary row was trimmed; the covariate bandwidth is too large")
            self.Kret = Kfull[np.flatnonzero(self.keep)]
        self.ret = np.flatnonzero(self.keep)
        self._fitted = None

    # pieces -------------------------------------------------------------
    def _split(self, theta):
        return {k: theta[s] for k, s in self.sl.items()}

    def _rho(self, theta):
        p = self._split(theta)
        base = self.Ka @ p["gamma"]
        vs = base + self.Ta @ p["lambda_s"]
        va = base + self.Ta @ p["lambda_a"]
        return self.link.cdf(vs) / self.link.cdf(-va), vs, va

    def _grad_rho(self, theta):
        """``(n_a, p)`` gradient of ``rho = L(v_s)/(1-L(v_a))`` in theta (beta block zero)."""
        _, vs, va = self._rho(theta)
        Ls, dLs = self.link.cdf(vs), self.link.pdf(vs)
        Lac, dLa = self.link.cdf(-va), self.link.pdf(va)
        out = np.zeros((self.x.size, theta.size))
        out[:, self.sl["gamma"]] = ((dLs * Lac + Ls * dLa) / Lac**2)[:, None] * self.Ka
        out[:, self.sl["lambda_s"]] = (dLs / Lac)[:, None] * self.Ta
        out[:, self.sl["lambda_a"]] = (Ls * dLa / Lac**2)[:, None] * self.Ta
        return out

    def _u(self, rho):
        p = np.bincount(self.inv, weights=rho, minlength=self.knots.size)
        S = p.sum()
        p = p / S
        mid = np.cumsum(p) - 0.5 * p
        return (mid - mid[0]) / (mid[-1] - mid[0]), mid, S

    def _du(self, rho, grho):
        """Derivative of each row's knot level ``u`` with respect to theta."""
        u, mid, S = self._u(rho)
        gk = np.stack([np.bincount(self.inv, weights=grho[:, j], minlength=self.knots.size)
                       for j in range(grho.shape[1])], axis=1)
        dmid = (np.cumsum(gk, axis=0) - 0.5 * gk - mid[:, None] * gk.sum(axis=0)) / S
        span = mid[-1] - mid[0]
        du = ((dmid - dmid[0]) - u[:, None] * (dmid[-1] - dmid[0])) / span
        return du[self.inv]

    def _f(self, rho):
        """Weighted KDE at the retained rows (weights normalised by their sum)."""
        return self.Kret @ rho / (self.th.b_x * rho.sum())

    def _g(self, theta):
        rho = self._rho(theta)[0]
        u = self._u(rho)[0][self.inv]
        x = self.x
        if self.kind is ShiftKind.MLS:
            return np.ones(x.size), rho, u, None
        if self.kind is ShiftKind.MQS:
            q = self.G.quantile(u)
            if not np.all(np.isfinite(q)):
                q = self.G.quantile(np.clip(u, 1e-10, 1 - 1e-10))
            return q - x, rho, u, None
        g = np.zeros(x.size)
        f = np.zeros(x.size)
        r = self.ret
        f[r] = self._f(rho)
        g[r] = -(self.G.cdf(x[r]) - u[r]) / f[r]
        return g, rho, u, f

    # public -------------------------------------------------------------
    def value(self, theta=None) -> float:
        theta = self.th.theta if theta is None else np.asarray(theta, dtype=float)
        g, rho, _, _ = self._g(theta)
        lam_x = self.th.model.evaluate(self.cols, self.x.size, theta[self.sl["beta"]])[1]
        r = self.ret
        return float(np.mean(self.scale * rho[r] * lam_x[r] * g[r]))

    def parts(self):
        """Pieces at the fitted theta (cached)."""
        if self._fitted is None:
            theta = self.th.theta
            g, rho, u, f = self._g(theta)
            _, lam_x, _, lam_xb = self.th.model.evaluate(self.cols, self.x.size, theta[self.sl["beta"]])
            self._fitted = (theta, g, rho, u, f, lam_x, lam_xb)
        return self._fitted

    def fitted_value(self) -> float:
        _, g, rho, _, _, lam_x, _ = self.parts()
        r = self.ret
        return float(np.mean(self.scale * rho[r] * lam_x[r] * g[r]))

    def dg_du_and_gradient(self):
        """Returns ``(M, dg_du, dg_df)`` with ``M = d d_hat / d theta``."""
        theta, g, rho, u, f, lam_x, lam_xb = self.parts()
        r = self.ret
        grho = self._grad_rho(theta)
        ell = self.scale * rho
        dg_du = np.zeros(self.x.size)
        dg_df = np.zeros(self.x.size)
        dg = np.zeros((self.x.size, theta.size))
        if self.kind is ShiftKind.MQS:
            uu = u if np.all(np.isfinite(self.G.quantile(u))) else np.clip(u, 1e-10, 1 - 1e-10)
            dg_du = 1.0 / self.G.quantile_pdf(uu)
            # the end knots are pinned at 0 and 1, so they do not respond to F_hat
            dg_du[(u <= 0.0) | (u >= 1.0)] = 0.0
            dg = dg_du[:, None] * self._du(rho, grho)
        elif self.kind is ShiftKind.MDS:
            Gx = self.G.cdf(self.x[r])
            dg_du[r] = 1.0 / f[r]
            dg_df[r] = (Gx - u[r]) / f[r] ** 2
            du = self._du(rho, grho)[r]
            S = rho.sum()
            ks = self.Kret @ grho / self.th.b_x
            df = (ks - f[r][:, None] * grho.sum(axis=0)) / S
            dg[r] = dg_du[r][:, None] * du + dg_df[r][:, None] * df
        M = np.zeros(theta.size)
        M += ((self.scale * lam_x * g)[r] @ grho[r])
        M += (ell * lam_x)[r] @ dg[r]
        M[self.sl["beta"]] += (ell * g)[r] @ lam_xb[r]
        return M / r.size, dg_du, dg_df


def estimate_d(merged: MergedSample, th: ThetaEstimate, G, kind, floor: float = DENSITY_FLOOR) -> tuple[float, int]:
    """``d_hat`` averaged over retained auxiliary rows; returns ``(d_hat, n_retained)``."""
    D = _DFunctional(merged, th, build_counterfactual(G), kind, floor)
    return D.fitted_value(), int(D.ret.size)


def bias_term(th: ThetaEstimate, d_hat: float, b_y: float | None = None) -> float:
    """``b^2 f'' d mu2 / (2 f^2)``, the leading smoothing bias of the point estimate."""
    b = th.b_y if b_y is None else b_y
    mu2 = get_kernel(th.kernel_y).mu2
    return float(b * b * th.f_y2 * d_hat * mu2 / (2.0 * th.f_y**2))


def plugin_se(d_hat: float, f_y: float, q0: float, kernel, n: int, b_y: float) -> float:
    """``sqrt(d^2 intK^2 / (f^3 Q0) / (n b_y))``."""
    sigma = d_hat**2 * get_kernel(kernel).int_k2 / (f_y**3 * q0)
    return float(np.sqrt(sigma / (n * b_y)))


# --------------------------------------------------------------------------- stacked sandwich


def _stacked(merged: MergedSample, th: ThetaEstimate):
    """Per-row estimating functions ``m`` (n, P) and their mean Jacobian ``H`` (P, P).

    Order: ``(q, gamma, lambda_s, lambda_a, beta)``.
    """
    n, n_s = merged.n, merged.n_s
    r = merged.r
    prop, link = th.prop, th.prop.link
    K, T = prop.K, prop.T
    dg, dls, dla, db = th.dims
    E = th.gmm.E
    Om = th.gmm.omega
    tau, q = th.tau, th.q_hat

    v0 = K @ prop.gamma
    L0, d0, dd0 = link.evaluate(v0)
    vs = v0 + T @ prop.lambda_s
    va = v0 + T @ prop.lambda_a
    Ls, dLs = link.cdf(vs), link.pdf(vs)
    Lac, dLa = link.cdf(-va), link.pdf(va)

    ind = np.zeros(n)
    ind[:n_s] = merged.y <= q
    # blocks of m
    m_q = r * (ind - tau)
    pq = L0 * (1 - L0)
    a = d0 / pq
    da = (dd0 * pq - d0 * d0 * (1 - 2 * L0)) / pq**2
    m_g = ((r - L0) * a)[:, None] * K
    m_ls = ((r / Ls - 1) * L0)[:, None] * T
    m_la = (((1 - r) / Lac - 1) * L0)[:, None] * T
    model = th.model
    lam_all = np.zeros(n)
    lam_b = np.zeros((n, db))
    L_aux, _, lb_aux, _ = model.evaluate(aux_columns(merged), merged.n_a, th.gmm.beta)
    lam_all[n_s:] = L_aux
    lam_b[n_s:] = lb_aux
    pi_s, pi_a = prop.pi_s, prop.pi_a
    gi = (pi_s * r * ind - pi_a * (1 - r) * lam_all)[:, None] * E
    D = -(E * (pi_a * (1 - r))[:, None]).T @ lam_b / n
    A = D.T @ Om
    m_b = gi @ A.T

    m = np.hstack([m_q[:, None], m_g, m_ls, m_la, m_b])
    P = m.shape[1]
    iq = slice(0, 1)
    ig = slice(1, 1 + dg)
    ils = slice(1 + dg, 1 + dg + dls)
    ila = slice(1 + dg + dls, 1 + dg + dls + dla)
    ib = slice(1 + dg + dls + dla, P)
    H = np.zeros((P, P))
    H[iq, iq] = merged.q0_hat * th.f_y
    H[ig, ig] = (K * (da * (r - L0) - a * d0)[:, None]).T @ K / n
    H[ils, ils] = -(T * (r * dLs / Ls**2 * L0)[:, None]).T @ T / n
    H[ils, ig] = (T * ((-r * dLs / Ls**2) * L0 + (r / Ls - 1) * d0)[:, None]).T @ K / n
    H[ila, ila] = (T * ((1 - r) * dLa / Lac**2 * L0)[:, None]).T @ T / n
    H[ila, ig] = (T * ((1 - r) * dLa / Lac**2 * L0 + ((1 - r) / Lac - 1) * d0)[:, None]).T @ K / n
    # beta block: d/dphi of D' Omega gbar with D frozen
    Kb = kernel_sums(merged.y, [q], th.b_y, th.kernel_y,
                     weights=(pi_s[:n_s, None] * E[:n_s]))[0] / (n * th.b_y)
    dpis_g = ((d0 * Ls - L0 * dLs) / Ls**2)[:, None] * K
    dpis_ls = (-L0 * dLs / Ls**2)[:, None] * T
    dpia_g = ((d0 * Lac + L0 * dLa) / Lac**2)[:, None] * K
    dpia_la = (L0 * dLa / Lac**2)[:, None] * T
    w_s = r * ind
    w_a = (1 - r) * lam_all
    dg_dg = (E * w_s[:, None]).T @ dpis_g / n - (E * w_a[:, None]).T @ dpia_g / n
    dg_dls = (E * w_s[:, None]).T @ dpis_ls / n
    dg_dla = -(E * w_a[:, None]).T @ dpia_la / n
    H[ib, iq] = (A @ Kb)[:, None]
    H[ib, ig] = A @ dg_dg
    H[ib, ils] = A @ dg_dls
    H[ib, ila] = A @ dg_dla
    H[ib, ib] = A @ D
    return m - m.mean(axis=0), H


def influence_components(merged: MergedSample, th: ThetaEstimate, G, kind,
                         floor: float = DENSITY_FLOOR) -> tuple[InfluenceComponents, float, int]:
    """Per-row influence functions of ``d_hat`` and of the UQE point estimate.

    Returns ``(components, d_hat, n_retained)``.
    """
    G = build_counterfactual(G)
    Dfun = _DFunctional(merged, th, G, kind, floor)
    d_hat = Dfun.fitted_value()
    n, n_s, n_a = merged.n, merged.n_s, merged.n_a
    theta, g, rho, u, f, lam_x, _ = Dfun.parts()
    M, dg_du, dg_df = Dfun.dg_du_and_gradient()
    ret = Dfun.ret
    n_ret = ret.size

    m, H = _stacked(merged, th)
    cond = float(np.linalg.cond(H))
    fallback = not np.isfinite(cond) or cond > 1e12
    if fallback:
        warnings.warn(f"stacked Jacobian is near singular (condition number {cond:.3g}); "
                      "falling back to the plug-in variance", stacklevel=2)
        psi_phi = np.zeros_like(m)
    else:
        psi_phi = -np.linalg.solve(H, m.T).T
    psi_theta = psi_phi[:, 1:]
    psi_nuis = psi_theta @ M

    # estimation of F (and f) inside the direction, with weights held at their fitted values
    ell = Dfun.scale * rho
    w = rho / rho.mean()
    xa = Dfun.x
    psi_g_aux = np.zeros(n_a)
    aF = np.zeros(n_a)
    aF[ret] = (ell * lam_x * dg_du)[ret] / n_ret
    if np.any(aF):
        Fk = u  # smoothed F_hat at each aux point
        order = np.argsort(xa, kind="stable")
        xs = xa[order]
        tail = np.cumsum(aF[order][::-1])[::-1]  # sum over k with X_k >= xs[pos]
        pos = np.searchsorted(xs, xa, side="left")
        s_ind = np.where(pos < n_a, tail[np.minimum(pos, n_a - 1)], 0.0)
        psi_g_aux += s_ind - np.sum(aF * Fk)
    if Dfun.kind is ShiftKind.MDS:
        af = np.zeros(n_a)
        af[ret] = (ell * lam_x * dg_df)[ret] / n_ret
        # d g / d f = (G - u)/f^2 is the coefficient on (f_hat - f)
        ks = Dfun.Kret.T @ af[ret] / th.b_x
        psi_g_aux += ks - np.sum(af[ret] * f[ret])
    psi_g = np.zeros(n)
    psi_g[n_s:] = w * (n / n_a) * psi_g_aux

    # sampling variation of the retained-row average, including the n_a/n_s prefactor
    C = n_a / n
    Dq = n_s / n
    a_i = np.zeros(n)
    b_i = np.zeros(n)
    a_i[n_s + ret] = (rho * lam_x * g)[ret]
    b_i[n_s + ret] = 1.0
    Bc = n_ret / n
    c_i = 1.0 - merged.r
    psi_direct = (C / (Bc * Dq)) * a_i - d_hat * b_i / Bc + d_hat * c_i / C - d_hat * merged.r / Dq

    psi_d = psi_nuis + psi_g + psi_direct

    # outcome density at q_hat, including the effect of estimating q_hat
    f_y = th.f_y
    Ky = np.zeros(n)
    ysd = (merged.y - th.q_hat) / th.b_y
    Ky[:n_s] = get_kernel(th.kernel_y)(ysd) / th.b_y
    ind = np.zeros(n)
    ind[:n_s] = merged.y <= th.q_hat
    psi_f = merged.r / merged.q0_hat * (Ky - f_y - (ind - th.tau) * th.f_y1 / f_y)
    psi_fy = d_hat / f_y**2 * psi_f
    psi = psi_fy - psi_d / f_y
    comp = InfluenceComponents(psi_fy, psi_d, psi, psi_theta, psi_g, psi_direct, M, cond, fallback)
    return comp, d_hat, n_ret


def improved_se(components: InfluenceComponents, n: int | None = None) -> float:
    n = components.psi.size if n is None else n
    return float(np.sqrt(np.mean(components.psi**2) / n))


def zero_effect_test(components: InfluenceComponents, d_hat: float, n: int | None = None) -> tuple[float, float]:
    """Wald test of ``d = 0`` (equivalently, of a zero quantile effect)."""
    n = components.psi_d.size if n is None else n
    V = float(np.mean(components.psi_d**2))
    if V <= 0 or not np.isfinite(V):
        if d_hat == 0:
            return 0.0, 1.0
        raise NumericalError("zero-effect test: influence variance is zero while d_hat is not")
    stat = float(np.sqrt(n) * d_hat / np.sqrt(V))
    return stat, float(2 * stats.norm.sf(abs(stat)))


def estimate_uqe(merged: MergedSample, th: ThetaEstimate, G, kind, cfg: EstimatorConfig | None = None) -> UqeResult:
    """Steps 5-6 for one counterfactual and shift kind."""
    cfg = cfg or EstimatorConfig()
    kind = ShiftKind.parse(kind)
    G = build_counterfactual(G)
    f_y = th.f_y
    if not f_y > 1e-8:
        err = NumericalError(f"outcome density at q_hat={th.q_hat:.4g} is ~0; tau={th.tau} is too extreme")
        err.step = "5:outcome_density"
        raise err
    comp, d_hat, n_ret = _tagged("6:influence", influence_components, merged, th, G, kind, cfg.density_floor)
    n = merged.n
    point = -d_hat / f_y
    B = bias_term(th, d_hat)
    se_p = plugin_se(d_hat, f_y, merged.q0_hat, th.kernel_y, n, th.b_y)
    se_i = se_p if comp.fallback else improved_se(comp, n)
    stat, p = _tagged("6:test", zero_effect_test, comp, d_hat, n)
    centre = point - B if cfg.recenter_ci else point
    ci = (centre - Z975 * se_i, centre + Z975 * se_i)
    diag = {
        "b_y": th.b_y,
        "b_x": th.b_x,
        "f_y_prime": th.f_y1,
        "f_y_second": th.f_y2,
        "stacked_jacobian_condition": comp.H_cond,
        "variance_fallback": comp.fallback,
        "psi_d_mean": float(comp.psi_d.mean()),
        "gmm_objective": th.gmm.objective,
        "gmm_jacobian_min_sv": th.gmm.jacobian_min_sv,
        "tilt_balance_gap": th.prop.diagnostics.get("balance_gap"),
        "ci_recentered": cfg.recenter_ci,
        "counterfactual": G.source,
    }
    return UqeResult(th.tau, kind.value, float(point), float(d_hat), f_y, th.q_hat, B, se_p, se_i,
                     (float(ci[0]), float(ci[1])), stat, p, n, n_ret, diag)


def jacobian_check(merged: MergedSample, th: ThetaEstimate, G, kind, h: float = 1e-6,
                   floor: float = DENSITY_FLOOR) -> dict:
    """Compare the analytic ``d d_hat / d theta`` with central finite differences."""
    Dfun = _DFunctional(merged, th, build_counterfactual(G), kind, floor)
    M = Dfun.dg_du_and_gradient()[0]
    theta = th.theta
    fd = np.zeros_like(theta)
    for j in range(theta.size):
        step = h * max(1.0, abs(theta[j]))
        tp, tm = theta.copy(), theta.copy()
        tp[j] += step
        tm[j] -= step
        fd[j] = (Dfun.value(tp) - Dfun.value(tm)) / (2 * step)
    err = np.abs(M - fd)
    rel = err / np.maximum(np.abs(fd), 1e-300)
    return {
        "analytic": M,
        "finite_difference": fd,
        "max_abs_error": float(err.max()),
        "max_rel_error": float(np.max(np.where(np.abs(fd) > 1e-6, rel, 0.0))),
        "norm_rel_error": float(np.linalg.norm(M - fd) / max(np.linalg.norm(fd), 1e-300)),
    }


def run_pipeline(merged: MergedSample, taus, kinds, G, cfg: EstimatorConfig | None = None) -> list[UqeResult]:
    """All six steps for every ``tau`` x ``kind`` pair (the propensity fit is shared)."""
    cfg = cfg or EstimatorConfig()
    G = build_counterfactual(G)
    bk, bt, _ = cfg.bases()
    prop = _tagged("2-3:propensity", fit_propensity_model, merged, bk, bt, cfg.prop_link)
    out = []
    for tau in taus:
        th = fit_theta(merged, float(tau), cfg, prop)
        for kind in kinds:
            out.append(estimate_uqe(merged, th, G, kind, cfg))
    return out
