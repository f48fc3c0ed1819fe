"""Conditional-normal data generating process, brute-force oracle and Monte Carlo harness.

The design has structural equations for the study population

    Y = gamma_s1 * X + gamma_s2' (1, z1) + eps,   X = delta_1' (1, z1) + delta_2' z2 + eta,

with independent normal errors, instruments iid across rows and study
membership ``R ~ Bernoulli(L(k(Z)' gamma_prop))``. The reduced form of X is
shared by both populations, so the auxiliary rows carry the same law of
``X | Z``. A discrete-X variant bins a latent ``X*`` at fixed cutpoints.

Population quantities of the study population are computed by importance
weighting draws of ``Z`` from its marginal with weight ``r(z)``; ``eps`` is
integrated out analytically wherever possible.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace, asdict

import numpy as np
from scipy import optimize, special, stats

from .counterfactual import CounterfactualDistribution, ShiftKind, build_counterfactual
from .errors import NumericalError, UqeError, ValidationError
from .links import get_link
from .sample import AuxSample, StudySample, merge_samples

__all__ = [
    "DgpSpec",
    "McReport",
    "generate_dgp",
    "generate_merged",
    "population_outcome_density",
    "OracleResult",
    "with_n",
    "draw_population",
    "population_quantile",
    "TrueXDistribution",
    "true_x_distribution",
    "oracle_uqe",
    "oracle_uqe_discrete",
    "oracle_bounds_discrete",
    "true_beta",
    "run_monte_carlo",
    "replication_seeds",
]


@dataclass(frozen=True)
class DgpSpec:
    """Parameters of the simulation design (module defaults, not estimates)."""

    gamma_s1: float = 0.5
    gamma_s2: tuple[float, ...] = (0.5, 0.5)  # on (1, z1)
    delta_1: tuple[float, ...] = (0.0, 1.0)  # on (1, z1)
    delta_2: tuple[float, ...] = (1.0,)  # on z2
    psi_y: float = 1.0
    psi_x: float = 1.0
    gamma_prop: tuple[float, ...] = (-0.45, 0.5, -0.5)  # on (1, z1, z2)
    prop_link: str = "logit"
    z1_dist: str = "normal"  # or "bernoulli"
    n: int = 5000
    seed: int = 0
    cutpoints: tuple[float, ...] | None = None  # discrete-X variant
    gamma_xz1: float = 0.0  # x * z1 interaction in the outcome equation
    aux_x_shift: float = 0.0  # misspecification toggle: breaks rank similarity

    def __post_init__(self):
        if len(self.gamma_s2) != len(self.delta_1) or len(self.gamma_s2) < 1:
            raise ValidationError("gamma_s2 and delta_1 must both have length 1 + dim(z1)")
        if not any(abs(d) > 0 for d in self.delta_2):
            raise ValidationError("delta_2 must be nonzero (instrument relevance)")
        if not (self.psi_y > 0 and self.psi_x > 0):
            raise ValidationError("psi_y and psi_x must be positive")
        if len(self.gamma_prop) != 1 + self.d_z1 + self.d_z2:
            raise ValidationError("gamma_prop must have length 1 + dim(z1) + dim(z2)")
        if self.z1_dist not in ("normal", "bernoulli"):
            raise ValidationError("z1_dist must be 'normal' or 'bernoulli'")
        if self.cutpoints is not None and np.any(np.diff(self.cutpoints) <= 0):
            raise ValidationError("cutpoints must be strictly increasing")
        if self.n < 2:
            raise ValidationError("n must be at least 2")

    @property
    def d_z1(self) -> int:
        return len(self.gamma_s2) - 1

    @property
    def d_z2(self) -> int:
        return len(self.delta_2)

    @property
    def discrete(self) -> bool:
        return self.cutpoints is not None

    @property
    def levels(self) -> np.ndarray:
        return np.arange(len(self.cutpoints) + 1, dtype=float) if self.discrete else np.array([])

    @property
    def z1_names(self) -> tuple[str, ...]:
        return tuple(f"z1_{j + 1}" for j in range(self.d_z1))

    @property
    def z2_names(self) -> tuple[str, ...]:
        return tuple(f"z2_{j + 1}" for j in range(self.d_z2))


def _draw_z(spec: DgpSpec, rng, n):
    if spec.z1_dist == "normal":
        z1 = rng.standard_normal((n, spec.d_z1))
    else:
        z1 = (rng.random((n, spec.d_z1)) < 0.5).astype(float)
    z2 = rng.standard_normal((n, spec.d_z2))
    return z1, z2


def _propensity(spec: DgpSpec, z1, z2):
    k = np.hstack([np.ones((z1.shape[0], 1)), z1, z2])
    return get_link(spec.prop_link).cdf(k @ np.asarray(spec.gamma_prop))


def _h(spec: DgpSpec, z1, z2):
    """Reduced-form mean of the (latent) covariate."""
    return spec.delta_1[0] + z1 @ np.asarray(spec.delta_1[1:]) + z2 @ np.asarray(spec.delta_2)


def _discretize(spec: DgpSpec, xstar):
    return np.searchsorted(np.asarray(spec.cutpoints), xstar, side="left").astype(float) if spec.discrete else xstar


def _mu_y(spec: DgpSpec, x, z1):
    """Mean of Y given (X, Z1) in the study population."""
    m = spec.gamma_s1 * x + spec.gamma_s2[0] + z1 @ np.asarray(spec.gamma_s2[1:])
    if spec.gamma_xz1 and spec.d_z1:
        m = m + spec.gamma_xz1 * x * z1[:, 0]
    return m


def generate_dgp(spec: DgpSpec, n: int | None = None, seed=None) -> tuple[StudySample, AuxSample]:
    """Draw ``n`` rows, assign membership, and return the two observed samples."""
    n = spec.n if n is None else int(n)
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    z1, z2 = _draw_z(spec, rng, n)
    r = rng.random(n) < _propensity(spec, z1, z2)
    eta = np.sqrt(spec.psi_x) * rng.standard_normal(n)
    eps = np.sqrt(spec.psi_y) * rng.standard_normal(n)
    xstar = _h(spec, z1, z2) + eta
    x = _discretize(spec, xstar)
    y = _mu_y(spec, x, z1) + eps
    if spec.aux_x_shift:
        x = np.where(r, x, _discretize(spec, xstar + spec.aux_x_shift))
    if r.all() or not r.any():
        raise NumericalError("simulated sample has no rows in one of the two populations")
    st = StudySample(y[r], z1[r], z2[r], spec.z1_names, spec.z2_names)
    au = AuxSample(x[~r], z1[~r], z2[~r], spec.z1_names, spec.z2_names)
    return st, au


def generate_merged(spec: DgpSpec, n: int | None = None, seed=None):
    return merge_samples(*generate_dgp(spec, n, seed))


# --------------------------------------------------------------------------- population quantities


@dataclass(frozen=True)
class Population:
    """Importance-weighted draws representing the study population."""

    z1: np.ndarray
    z2: np.ndarray
    w: np.ndarray  # r(z), unnormalised
    xstar: np.ndarray
    x: np.ndarray
    hz: np.ndarray


def draw_population(spec: DgpSpec, n_draws: int = 1_000_000, seed: int = 12345) -> Population:
    rng = np.random.default_rng(seed)
    z1, z2 = _draw_z(spec, rng, n_draws)
    w = _propensity(spec, z1, z2)
    hz = _h(spec, z1, z2)
    xstar = hz + np.sqrt(spec.psi_x) * rng.standard_normal(n_draws)
    return Population(z1, z2, w, xstar, _discretize(spec, xstar), hz)


def _weighted_normal_mixture_root(mu, w, sd, target, lo=None, hi=None):
    """Solve ``sum w Phi((y - mu)/sd) / sum w = target`` for y."""
    W = w.sum()

    def F(y):
        return float(np.dot(w, special.ndtr((y - mu) / sd)) / W) - target

    lo = float(mu.min() - 10 * sd) if lo is None else lo
    hi = float(mu.max() + 10 * sd) if hi is None else hi
    return optimize.brentq(F, lo, hi, xtol=1e-12, rtol=1e-14)


def population_quantile(spec: DgpSpec, tau: float, pop: Population | None = None) -> float:
    """``q_tau`` of ``Y | R = 1``."""
    pop = pop or draw_population(spec)
    mu = _mu_y(spec, pop.x, pop.z1)
    return _weighted_normal_mixture_root(mu, pop.w, np.sqrt(spec.psi_y), tau)


def population_outcome_density(spec: DgpSpec, y: float, pop: Population | None = None, order: int = 0) -> float:
    """``f_{Y|R=1}`` (order 0) or its derivatives (orders 1, 2) at ``y``."""
    pop = pop or draw_population(spec)
    sd = np.sqrt(spec.psi_y)
    v = (y - _mu_y(spec, pop.x, pop.z1)) / sd
    phi = stats.norm.pdf(v)
    if order == 0:
        k = phi / sd
    elif order == 1:
        k = -v * phi / sd**2
    elif order == 2:
        k = (v * v - 1) * phi / sd**3
    else:
        raise ValidationError("order must be 0, 1 or 2")
    return float(np.dot(pop.w, k) / pop.w.sum())


class TrueXDistribution:
    """Tabulated ``F``, ``f`` and ``F^{-1}`` of the continuous covariate in the study population."""

    def __init__(self, spec: DgpSpec, pop: Population, n_grid: int = 4001, n_bins: int = 4000):
        sd = np.sqrt(spec.psi_x)
        lo, hi = pop.hz.min() - 8 * sd, pop.hz.max() + 8 * sd
        # bin the conditional means, then convolve with the normal error law
        mass, edges = np.histogram(pop.hz, bins=n_bins, weights=pop.w)
        mass = mass / mass.sum()
        centres = 0.5 * (edges[:-1] + edges[1:])
        nz = mass > 0
        centres, mass = centres[nz], mass[nz]
        self.grid = np.linspace(lo, hi, n_grid)
        F = np.zeros(n_grid)
        f = np.zeros(n_grid)
        for s in range(0, n_grid, 256):
            d = (self.grid[s:s + 256, None] - centres[None, :]) / sd
            F[s:s + 256] = special.ndtr(d) @ mass
            f[s:s + 256] = stats.norm.pdf(d) @ mass / sd
        self.F, self.f = np.maximum.accumulate(F), f

    def cdf(self, x):
        return np.interp(x, self.grid, self.F, left=0.0, right=1.0)

    def pdf(self, x):
        return np.interp(x, self.grid, self.f, left=0.0, right=0.0)

    def quantile(self, u):
        return np.interp(u, self.F, self.grid)

    def as_distribution(self) -> CounterfactualDistribution:
        return CounterfactualDistribution.from_callables(self.cdf, self.pdf, self.quantile, "true_F_x")


def true_x_distribution(spec: DgpSpec, pop: Population | None = None) -> TrueXDistribution:
    if spec.discrete:
        raise ValidationError("true_x_distribution is for the continuous design")
    return TrueXDistribution(spec, pop or draw_population(spec))


def true_beta(spec: DgpSpec, q_tau: float) -> np.ndarray:
    """Probit coefficients of ``Lambda`` on ``(1, z1..., x)`` (plus ``x*z1_1`` if interacted)."""
    s = np.sqrt(spec.psi_y)
    b = [(q_tau - spec.gamma_s2[0]) / s] + [-c / s for c in spec.gamma_s2[1:]] + [-spec.gamma_s1 / s]
    if spec.gamma_xz1:
        b.append(-spec.gamma_xz1 / s)
    return np.array(b)


# --------------------------------------------------------------------------- oracle


@dataclass(frozen=True)
class OracleResult:
    value: float
    mc_se: float
    richardson_error: float
    q_tau: float
    t_step: float
    n_draws: int

    def __float__(self):
        return self.value


def _transport(kind: ShiftKind, t: float, x, u, Fx: TrueXDistribution, G: CounterfactualDistribution):
    if kind is ShiftKind.MLS:
        return x + t
    gq = G.quantile(np.clip(u, 1e-12, 1 - 1e-12))
    if kind is ShiftKind.MQS:
        return x + t * (gq - x)
    # MDS: invert (1 - t) F + t G on a grid covering both supports
    lo = min(Fx.grid[0], float(np.min(gq)))
    hi = max(Fx.grid[-1], float(np.max(gq)))
    grid = np.linspace(lo, hi, 20001)
    Gt = (1 - t) * Fx.cdf(grid) + t * G.cdf(grid)
    Gt = np.maximum.accumulate(Gt)
    keep = np.concatenate([[True], np.diff(Gt) > 0])
    return np.interp(u, Gt[keep], grid[keep])


def oracle_uqe(spec: DgpSpec, tau: float, G, kind, t_step: float = 0.01, n_draws: int = 1_000_000,
               seed: int = 12345, n_batches: int = 20, richardson_tol: float | None = None) -> OracleResult:
    """Brute-force UQE by rank-preserving transport and a central difference in ``t``.

    The counterfactual covariate is ``G_t^{-1}(U)`` with ``U = F_{X|R=1}(X)``;
    ``eps`` is held fixed and integrated out, so the counterfactual outcome CDF
    is a weighted normal mixture whose quantile is found by root finding. The
    returned value is the Richardson combination of steps ``t`` and ``t/2``.
    """
    if spec.discrete:
        raise ValidationError("use oracle_uqe_discrete for the discrete design")
    kind = ShiftKind.parse(kind)
    G = build_counterfactual(G)
    pop = draw_population(spec, n_draws, seed)
    Fx = TrueXDistribution(spec, pop)
    u = Fx.cdf(pop.x)
    base = spec.gamma_s2[0] + pop.z1 @ np.asarray(spec.gamma_s2[1:])
    sd = np.sqrt(spec.psi_y)
    mu0 = _mu_y(spec, pop.x, pop.z1)
    q_tau = _weighted_normal_mixture_root(mu0, pop.w, sd, tau)

    xt = {}
    for t in (t_step, -t_step, t_step / 2, -t_step / 2):
        xt[t] = _transport(kind, t, pop.x, u, Fx, G)

    def deriv(idx):
        w = pop.w[idx]
        qs = {}
        for t, x_t in xt.items():
            mu = spec.gamma_s1 * x_t[idx] + base[idx]
            if spec.gamma_xz1 and spec.d_z1:
                mu = mu + spec.gamma_xz1 * x_t[idx] * pop.z1[idx, 0]
            qs[t] = _weighted_normal_mixture_root(mu, w, sd, tau, q_tau - 5, q_tau + 5)
        d1 = (qs[t_step] - qs[-t_step]) / (2 * t_step)
        d2 = (qs[t_step / 2] - qs[-t_step / 2]) / t_step
        return (4 * d2 - d1) / 3, abs(d2 - d1)

    value, rich = deriv(slice(None))
    batches = np.array_split(np.arange(n_draws), n_batches)
    bvals = np.array([deriv(b)[0] for b in batches])
    mc_se = float(bvals.std(ddof=1) / np.sqrt(n_batches))
    if richardson_tol is not None and rich > richardson_tol:
        raise NumericalError(f"oracle finite difference unstable (Richardson error {rich:.3g})")
    return OracleResult(float(value), mc_se, float(rich), float(q_tau), t_step, n_draws)


def oracle_uqe_discrete(spec: DgpSpec, tau: float, G, t_step: float = 0.01, n_draws: int = 1_000_000,
                        seed: int = 12345) -> OracleResult:
    """True MDS effect in the discrete design under the DGP's own rank variable ``U = F_{X*}(X*)``."""
    if not spec.discrete:
        raise ValidationError("oracle_uqe_discrete needs a discrete design")
    G = build_counterfactual(G)
    pop = draw_population(spec, n_draws, seed)
    lv = spec.levels
    W = pop.w.sum()
    order = np.argsort(pop.xstar)
    cw = np.empty(n_draws)
    cw[order] = np.cumsum(pop.w[order]) / W
    u = cw  # weighted rank of the latent index in the study population
    Fl = np.array([np.dot(pop.w, pop.x <= v) / W for v in lv])
    Gl = np.asarray(G.cdf(lv), dtype=float)
    sd = np.sqrt(spec.psi_y)
    q_tau = _weighted_normal_mixture_root(_mu_y(spec, pop.x, pop.z1), pop.w, sd, tau)
    f_y = population_outcome_density(spec, q_tau, pop)

    def cdf_at_q(t):
        Gt = (1 - t) * Fl + t * Gl
        xt = lv[np.minimum(np.searchsorted(Gt, u, side="left"), lv.size - 1)]
        return float(np.dot(pop.w, special.ndtr((q_tau - _mu_y(spec, xt, pop.z1)) / sd)) / W)

    dF = (cdf_at_q(t_step) - cdf_at_q(-t_step)) / (2 * t_step)
    dF2 = (cdf_at_q(t_step / 2) - cdf_at_q(-t_step / 2)) / t_step
    return OracleResult(float(-dF / f_y), float("nan"), float(abs(dF2 - dF) / f_y), q_tau, t_step, n_draws)


def oracle_bounds_discrete(spec: DgpSpec, tau: float, G, p_grid: int = 11, n_draws: int = 1_000_000,
                           seed: int = 12345) -> tuple[float, float]:
    """Identified interval by enumerating conditional laws of a two-point ``z1``.

    Each period ``j = 2..l`` integrates the true period bound function against
    ``Bernoulli(p_j)``; every combination of ``p_j`` on a grid over ``[0, 1]``
    is evaluated and the extreme sums returned.
    """
    if not spec.discrete or spec.z1_dist != "bernoulli" or spec.d_z1 != 1:
        raise ValidationError("oracle_bounds_discrete needs a discrete design with one Bernoulli z1")
    import itertools

    G = build_counterfactual(G)
    pop = draw_population(spec, n_draws, seed)
    lv = spec.levels
    W = pop.w.sum()
    Fl = np.array([np.dot(pop.w, pop.x <= v) / W for v in lv])
    Gl = np.asarray(G.cdf(lv), dtype=float)
    sd = np.sqrt(spec.psi_y)
    q_tau = _weighted_normal_mixture_root(_mu_y(spec, pop.x, pop.z1), pop.w, sd, tau)
    f_y = population_outcome_density(spec, q_tau, pop)
    z1s = np.array([[0.0], [1.0]])

    def lam(x):
        return special.ndtr((q_tau - _mu_y(spec, np.full(2, x), z1s)) / sd)

    h = np.array([-(lam(lv[j - 1]) - lam(lv[j])) * (Gl[j - 1] - Fl[j - 1]) / f_y for j in range(1, lv.size)])
    ps = np.linspace(0.0, 1.0, p_grid)
    vals = [sum(p * hj[1] + (1 - p) * hj[0] for p, hj in zip(combo, h))
            for combo in itertools.product(ps, repeat=h.shape[0])]
    return float(min(vals)), float(max(vals))


# --------------------------------------------------------------------------- Monte Carlo harness


@dataclass
class McReport:
    n_reps: int
    n_failed: int
    failures: list
    records: list  # one dict per (replication, tau, kind)
    summary: list  # one dict per (tau, kind)
    runtime_s: float
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def replication_seeds(seed: int, n_reps: int) -> list[np.random.SeedSequence]:
    """Independent child streams of the master seed, one per replication."""
    return np.random.SeedSequence(seed).spawn(n_reps)


def _one_replication(args):
    i, child, spec, cfg, taus, kinds, G = args
    from .uqe import run_pipeline

    try:
        merged = merge_samples(*generate_dgp(spec, seed=np.random.default_rng(child)))
        res = run_pipeline(merged, taus, kinds, build_counterfactual(G), cfg)
        return i, [dict(rep=i, **r.to_dict()) for r in res], None
    except UqeError as exc:
        return i, [], f"rep {i}: {type(exc).__name__}: {exc}"


def run_monte_carlo(spec: DgpSpec, estimator_config=None, n_reps: int = 100, seed: int = 0,
                    taus=(0.5,), kinds=("MQS",), G="normal(0.3,1.5)", oracle: dict | None = None,
                    workers: int = 1, alpha: float = 0.05) -> McReport:
    """Replicate ``generate_dgp`` -> full pipeline ``n_reps`` times.

    ``oracle`` maps ``(tau, kind)`` to the true effect; when given, bias, RMSE
    and CI coverage are reported. Results do not depend on ``workers``;
    with ``workers > 1`` pass ``G`` as a spec string or dict so it can be
    sent to worker processes.
    """
    from .uqe import EstimatorConfig

    cfg = estimator_config or EstimatorConfig()
    G_spec = G
    G = build_counterfactual(G)
    kinds = [ShiftKind.parse(k).value for k in kinds]
    G_job = G if workers <= 1 else G_spec
    jobs = [(i, c, spec, cfg, tuple(taus), tuple(kinds), G_job)
            for i, c in enumerate(replication_seeds(seed, n_reps))]
    t0 = time.perf_counter()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            outs = list(ex.map(_one_replication, jobs, chunksize=max(1, n_reps // (4 * workers))))
    else:
        outs = [_one_replication(j) for j in jobs]
    outs.sort(key=lambda o: o[0])
    records = [r for _, recs, _ in outs for r in recs]
    failures = [e for _, _, e in outs if e]
    summary = []
    for tau in taus:
        for kind in kinds:
            rows = [r for r in records if r["tau"] == tau and r["kind"] == kind]
            if not rows:
                continue
            pts = np.array([r["point"] for r in rows])
            s = {
                "tau": tau,
                "kind": kind,
                "n_ok": len(rows),
                "mean": float(pts.mean()),
                "sd": float(pts.std(ddof=1)) if len(rows) > 1 else float("nan"),
                "mean_se_improved": float(np.mean([r["se_improved"] for r in rows])),
                "mean_se_plugin": float(np.mean([r["se_plugin"] for r in rows])),
                "mean_d_hat": float(np.mean([r["d_hat"] for r in rows])),
                "sd_d_hat": float(np.std([r["d_hat"] for r in rows], ddof=1)) if len(rows) > 1 else float("nan"),
                "rejection_rate": float(np.mean([r["p_value"] < alpha for r in rows])),
            }
            if oracle is not None and (tau, kind) in oracle:
                o = float(oracle[(tau, kind)])
                s["oracle"] = o
                s["bias"] = s["mean"] - o
                s["rmse"] = float(np.sqrt(np.mean((pts - o) ** 2)))
                s["coverage"] = float(np.mean([r["ci_95"][0] <= o <= r["ci_95"][1] for r in rows]))
            summary.append(s)
    return McReport(n_reps, len(failures), failures, records, summary, time.perf_counter() - t0,
                    {"spec": asdict(spec), "seed": seed, "taus": list(taus), "kinds": kinds, "G": G.source})


def with_n(spec: DgpSpec, n: int) -> DgpSpec:
    return replace(spec, n=int(n))
