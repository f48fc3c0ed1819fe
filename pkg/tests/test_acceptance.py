"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line.

Monte Carlo runs come from the session fixtures in ``conftest.py`` (fixed seeds).
"""

from __future__ import annotations

import dataclasses

import numpy as np
import pytest
from scipy import special, stats

from uqe2s.bounds import estimate_bounds
from uqe2s.counterfactual import CounterfactualDistribution
from uqe2s.links import get_link
from uqe2s.nonparametrics import kde_covariate_density_trimmed, kde_outcome_density, rule_of_thumb_bandwidth
from uqe2s.propensity import fit_propensity_model
from uqe2s.simulation import (
    DgpSpec,
    generate_dgp,
    generate_merged,
    oracle_bounds_discrete,
    population_quantile,
    true_beta,
)
from uqe2s.uqe import EstimatorConfig, estimate_uqe, fit_theta, jacobian_check, run_pipeline

from conftest import DISCRETE_CFG, DISCRETE_SPEC, G_SIM, KINDS, SIM_CFG, TAUS, summary_row

pytestmark = pytest.mark.slow

SEEDS = {"oracle_single": 20001, "moment": 20002, "balance": 20003, "jacobian": 20004, "zero_shift": 20005,
         "remark2": 20006, "collapse": 20007, "bounds": 0, "kde": 20009}


@pytest.fixture
def check(capsys):
    def _check(name: str, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, f"{name}: {detail}"

    return _check


def test_oracle_equivalence_single_run(check, oracles):
    merged = generate_merged(DgpSpec(n=20000), seed=SEEDS["oracle_single"])
    res = run_pipeline(merged, TAUS, KINDS, G_SIM, SIM_CFG)
    worst, lines = -np.inf, []
    for r in res:
        o = oracles[(r.tau, r.kind)]
        slack = abs(o) * 0.10 + 0.01 - abs(r.point - o)
        worst = max(worst, -slack)
        lines.append(f"{r.kind}@{r.tau}: est {r.point:.4f} oracle {o:.4f}")
    check("oracle equivalence (single run, n=20000, 9 cells)", worst <= 0,
          f"max excess over tolerance {worst:.4f}; " + "; ".join(lines))


def test_oracle_equivalence_mc_bias(check, oracles, mc_grid_20000):
    rep = mc_grid_20000
    bad, lines = [], []
    for t in TAUS:
        for k in KINDS:
            s = summary_row(rep, t, k)
            lim = 2 * s["sd"] / np.sqrt(s["n_ok"])
            bias = s["mean"] - oracles[(t, k)]
            lines.append(f"{k}@{t}: bias {bias:+.4f} (limit {lim:.4f})")
            if abs(bias) > lim or s["n_ok"] != 200:
                bad.append(f"{k}@{t}")
    check("oracle equivalence (200-rep MC bias <= 2 MC se)", not bad,
          f"failing cells {bad}; " + "; ".join(lines))
    check("oracle equivalence runtime (200 reps, full grid, < 10 min)", rep.runtime_s < 600,
          f"{rep.runtime_s:.0f} s")


def test_moment_condition_at_truth(check):
    spec = DgpSpec(n=1_000_000)
    s, a = generate_dgp(spec, seed=SEEDS["moment"])
    tau = 0.5
    q = population_quantile(spec, tau)
    beta = true_beta(spec, q)
    L = get_link(spec.prop_link)

    def odds(z1, z2):
        r = L.cdf(np.hstack([np.ones((z1.shape[0], 1)), z1, z2]) @ np.asarray(spec.gamma_prop))
        return r / (1 - r)

    lam = special.ndtr(np.hstack([np.ones((a.n, 1)), a.z1, a.x[:, None]]) @ beta)
    e_s = np.hstack([np.ones((s.n, 1)), s.z1, s.z2])
    e_a = np.hstack([np.ones((a.n, 1)), a.z1, a.z2])
    # pi_s = 1 and pi_a = r/(1-r) at the truth (zero tilts)
    g = np.vstack([(s.y <= q)[:, None] * e_s, -(odds(a.z1, a.z2) * lam)[:, None] * e_a])
    mean, se = g.mean(axis=0), g.std(axis=0, ddof=1) / np.sqrt(g.shape[0])
    z = mean / se
    check("moment condition at truth (10^6 rows, |mean| <= 3 se)", bool(np.all(np.abs(z) <= 3)),
          f"t-ratios {np.round(z, 2).tolist()}")


def test_tilting_balance(check):
    gaps = []
    designs = [(DgpSpec(n=n), s) for n, s in [(500, 1), (2000, 2), (5000, 3), (20000, 4)]]
    designs += [(dataclasses.replace(DISCRETE_SPEC, n=5000), 5),
                (DgpSpec(n=5000, gamma_prop=(0.3, -0.4, 0.6)), 6)]
    for k, (spec, s) in enumerate(designs):
        m = generate_merged(spec, seed=SEEDS["balance"] + s)
        for link in ("logit", "probit"):
            fit = fit_propensity_model(m, link=link)
            gaps.append(float(np.max(np.abs(fit.balance(m)))))
    check("tilting balance (componentwise <= 1e-6, 12 fits)", max(gaps) <= 1e-6, f"max gap {max(gaps):.2e}")


def test_jacobian_fidelity(check):
    m = generate_merged(DgpSpec(n=5000), seed=SEEDS["jacobian"])
    th = fit_theta(m, 0.5, SIM_CFG)
    errs = {k: jacobian_check(m, th, G_SIM, k)["max_rel_error"] for k in ("MQS", "MDS")}
    check("Jacobian fidelity (analytic vs central FD, rel <= 1e-3)", max(errs.values()) <= 1e-3,
          ", ".join(f"{k} {v:.2e}" for k, v in errs.items()))


def test_coverage(check, oracles, mc_default_5000):
    s = summary_row(mc_default_5000, 0.5, "MQS")
    o = oracles[(0.5, "MQS")]
    cov = np.mean([r["ci_95"][0] <= o <= r["ci_95"][1] for r in mc_default_5000.records if r["kind"] == "MQS"])
    check("coverage (500 reps, n=5000, tau=0.5, MQS, in [0.90, 0.98])",
          0.90 <= cov <= 0.98 and s["n_ok"] == 500, f"coverage {cov:.3f}")


def test_size_and_power(check, mc_null_5000, mc_default_5000):
    size = summary_row(mc_null_5000, 0.5, "MQS")
    power = summary_row(mc_default_5000, 0.5, "MQS")
    check("test size (gamma_s1=0, 500 reps, in [2%, 9%])",
          0.02 <= size["rejection_rate"] <= 0.09 and size["n_ok"] == 500, f"{size['rejection_rate']:.3f}")
    check("test power (gamma_s1=0.5, n=5000, 500 reps, >= 90%)",
          power["rejection_rate"] >= 0.90 and power["n_ok"] == 500, f"{power['rejection_rate']:.3f}")


def test_zero_shift_null(check):
    worst_pt, worst_p = 0.0, 1.0
    cases = [(DgpSpec(n=2000), 0.5), (DgpSpec(n=5000), 0.25), (DgpSpec(n=5000, gamma_s1=-1.0), 0.75),
             (DgpSpec(n=10000, gamma_prop=(0.3, -0.4, 0.6)), 0.5)]
    for i, (spec, tau) in enumerate(cases):
        m = generate_merged(spec, seed=SEEDS["zero_shift"] + i)
        th = fit_theta(m, tau, SIM_CFG)
        r = estimate_uqe(m, th, th.F_hat_distribution(m), "MQS", SIM_CFG)
        worst_pt, worst_p = max(worst_pt, abs(r.point)), min(worst_p, r.p_value)
    check("zero-shift null (G = F_hat, |point| <= 1e-10, p >= 0.999)", worst_pt <= 1e-10 and worst_p >= 0.999,
          f"max |point| {worst_pt:.1e}, min p {worst_p:.6f}")


def test_remark2_consistency(check):
    m = generate_merged(DgpSpec(n=20000), seed=SEEDS["remark2"])
    th = fit_theta(m, 0.5, SIM_CFG)
    F = th.F_hat_distribution(m)
    qdir = lambda x: 0.2 + 0.1 * np.tanh(x)  # noqa: E731
    ell = th.prop.ell_hat

    def f_hat(x):
        return kde_covariate_density_trimmed(m.x, ell, x, th.b_x, th.kernel_x)[0]

    dqdir = lambda x: 0.1 / np.cosh(x) ** 2  # noqa: E731

    def G_q_quantile(u):
        x = F.quantile(u)
        return x + qdir(x)

    def G_q_density_at_quantile(u):
        x = F.quantile(u)
        return F.quantile_pdf(u) / (1 + dqdir(x))

    G_q = CounterfactualDistribution(None, None, G_q_quantile, G_q_density_at_quantile, "direction_q",
                                     (-np.inf, np.inf))
    G_p = CounterfactualDistribution(lambda x: F.cdf(x) - f_hat(x) * qdir(x), None, None, None,
                                     "F_minus_f_q", (-np.inf, np.inf))
    uq = estimate_uqe(m, th, G_q, "MQS", SIM_CFG).point
    up = estimate_uqe(m, th, G_p, "MDS", SIM_CFG).point
    rel = abs(uq - up) / abs(uq)
    check("Remark 2 consistency (MQS direction q vs MDS G=F-f q, within 10%)", rel <= 0.10,
          f"MQS {uq:.4f}, MDS {up:.4f}, rel diff {rel:.3f}")


def test_discrete_bounds_collapse(check):
    spec = DgpSpec(z1_dist="bernoulli", cutpoints=(0.3,), gamma_prop=(-0.4, 0.3, -0.5), n=20000)
    cfg = EstimatorConfig(lambda_link="probit", lambda_index=("1", "x"), basis_e=("1", "z1", "z2"))
    m = generate_merged(spec, seed=SEEDS["collapse"])
    th = fit_theta(m, 0.5, cfg)
    G = CounterfactualDistribution.discrete([0, 1], [0.3, 0.7])
    b = estimate_bounds(m, th, G)
    # binary case: -(Lambda(0) - Lambda(1)) (G(0) - F(0)) / f
    lam0, lam1 = special.ndtr(th.gmm.beta[0]), special.ndtr(th.gmm.beta[0] + th.gmm.beta[1])
    F0 = th.prop.ell_hat[m.x == 0].sum() / th.prop.ell_hat.sum()
    point = -(lam0 - lam1) * (0.3 - F0) / th.f_y
    ok = b.width <= 1e-10 and abs(b.lower - point) <= 1e-12 and abs(b.upper - point) <= 1e-12
    check("discrete bounds (i): z1-free Lambda collapses to the binary formula", ok,
          f"width {b.width:.1e}, bound {b.lower:.6f}, formula {point:.6f}")


def test_discrete_bounds_contain_oracle(check):
    G = CounterfactualDistribution.discrete([0, 1, 2], [0.2, 0.3, 0.5])
    lo, hi = oracle_bounds_discrete(DISCRETE_SPEC, 0.5, G)
    m = generate_merged(dataclasses.replace(DISCRETE_SPEC, n=200_000), seed=SEEDS["bounds"])
    b = estimate_bounds(m, fit_theta(m, 0.5, DISCRETE_CFG), G)
    ok = b.lower <= lo + 0.02 and b.upper >= hi - 0.02
    check("discrete bounds (ii): l=3, two-point z1, estimate contains oracle (tol 0.02)", ok,
          f"estimate [{b.lower:.4f}, {b.upper:.4f}], oracle [{lo:.4f}, {hi:.4f}]")


def test_rate_sd_d_hat(check, mc_default_1250, mc_default_5000, mc_grid_20000):
    ns = np.array([1250, 5000, 20000])
    sds = np.array([summary_row(r, 0.5, "MQS")["sd_d_hat"] for r in (mc_default_1250, mc_default_5000,
                                                                       mc_grid_20000)])
    slope = float(np.polyfit(np.log(ns), np.log(sds), 1)[0])
    check("rate: MC sd of d_hat has log-log slope -0.5 +/- 0.15", abs(slope + 0.5) <= 0.15,
          f"slope {slope:.3f} (sd {np.round(sds, 5).tolist()})")


def test_rate_kde_mode(check):
    y = np.random.default_rng(SEEDS["kde"]).standard_normal(100_000)
    f0 = kde_outcome_density(y, [0.0], rule_of_thumb_bandwidth(y))[0]
    rel = abs(f0 / stats.norm.pdf(0.0) - 1)
    check("rate: KDE at the standard-normal mode within 5% (n=1e5)", rel <= 0.05, f"rel error {rel:.4f}")
