from __future__ import annotations

import dataclasses
import numpy as np
import pytest
from scipy import stats

from uqe2s.nonparametrics import get_kernel
from uqe2s.errors import NumericalError, ValidationError
from uqe2s.simulation import DgpSpec, _mu_y, draw_population, generate_merged, population_outcome_density, \
    population_quantile
from uqe2s.uqe import (
    EstimatorConfig,
    InfluenceComponents,
    bias_term,
    estimate_d,
    estimate_uqe,
    fit_theta,
    influence_components,
    jacobian_check,
    plugin_se,
    run_pipeline,
    zero_effect_test,
)

from conftest import G_SIM, SIM_CFG

NO_X = EstimatorConfig(lambda_link="probit", lambda_index=("1", "z1"))


@pytest.fixture(scope="module")
def th_small(merged_small):
    return fit_theta(merged_small, 0.5, SIM_CFG)


@pytest.fixture(scope="module")
def results_small(merged_small, th_small):
    return {k: estimate_uqe(merged_small, th_small, G_SIM, k, SIM_CFG) for k in ("MQS", "MDS", "MLS")}


def test_x_free_index_gives_zero(merged_small):
    th = fit_theta(merged_small, 0.5, NO_X)
    for kind in ("MQS", "MDS", "MLS"):
        r = estimate_uqe(merged_small, th, G_SIM, kind, NO_X)
        assert r.d_hat == 0 and r.point == 0
        assert r.p_value == 1.0 and r.test_statistic == 0.0
        assert r.se_plugin == 0 and r.bias == 0
        comp, _, _ = influence_components(merged_small, th, G_SIM, kind)
        assert np.max(np.abs(comp.psi)) <= 1e-12
        assert np.max(np.abs(comp.psi_g)) == 0


def test_zero_shift_null(merged_small, th_small):
    F_hat = th_small.F_hat_distribution(merged_small)
    r = estimate_uqe(merged_small, th_small, F_hat, "MQS", SIM_CFG)
    assert abs(r.point) <= 1e-10 and abs(r.d_hat) <= 1e-10
    assert r.p_value >= 0.999


def test_structural_identity(results_small):
    for r in results_small.values():
        assert r.point * r.f_y_at_q + r.d_hat == pytest.approx(0.0, abs=1e-15)
        assert r.ci_95[0] < r.point < r.ci_95[1]
        assert r.se_plugin > 0 and r.se_improved > 0


def test_bias_scaling(th_small, results_small):
    d = results_small["MQS"].d_hat
    b = th_small.b_y
    assert bias_term(th_small, d, b / 2) == pytest.approx(bias_term(th_small, d, b) / 4, rel=1e-12)
    assert bias_term(th_small, 0.0) == 0.0


def test_plugin_se_homogeneity():
    se = plugin_se(0.1, 0.3, 0.4, "epanechnikov", 5000, 0.2)
    assert plugin_se(0.2, 0.3, 0.4, "epanechnikov", 5000, 0.2) == pytest.approx(2 * se)
    assert plugin_se(-0.1, 0.3, 0.4, "epanechnikov", 5000, 0.2) == pytest.approx(se)
    assert plugin_se(0.0, 0.3, 0.4, "epanechnikov", 5000, 0.2) == 0.0
    # closed form: d^2 intK^2 / (f^3 Q0) / (n b)
    assert se == pytest.approx(np.sqrt(0.01 * 0.6 / (0.027 * 0.4) / (5000 * 0.2)))


def test_se_ratio_band():
    m = generate_merged(DgpSpec(n=5000), seed=55)
    res = run_pipeline(m, [0.5], ["MQS", "MDS", "MLS"], G_SIM, SIM_CFG)
    ratios = [r.se_improved / r.se_plugin for r in res]
    assert all(0.5 <= q <= 2.0 for q in ratios), ratios


def test_zero_effect_test_degenerate():
    z = np.zeros(10)
    comp = InfluenceComponents(z, z, z, np.zeros((10, 1)), z, z, np.zeros(1), 1.0)
    assert zero_effect_test(comp, 0.0) == (0.0, 1.0)
    with pytest.raises(NumericalError):
        zero_effect_test(comp, 0.3)


def test_zero_effect_test_formula():
    psi_d = np.array([1.0, -1.0, 2.0, -2.0])
    comp = InfluenceComponents(psi_d, psi_d, psi_d, np.zeros((4, 1)), psi_d, psi_d, np.zeros(1), 1.0)
    stat, p = zero_effect_test(comp, 0.5)
    assert stat == pytest.approx(np.sqrt(4) * 0.5 / np.sqrt(2.5))
    assert p == pytest.approx(2 * stats.norm.sf(stat))


def test_zero_outcome_density_aborts(merged_small, th_small):
    th = dataclasses.replace(th_small, f_y=0.0)
    with pytest.raises(NumericalError) as exc:
        estimate_uqe(merged_small, th, G_SIM, "MQS")
    assert exc.value.step == "5:outcome_density"


def test_mds_rejects_discrete_counterfactual(merged_small, th_small):
    with pytest.raises(ValidationError):
        estimate_d(merged_small, th_small, {"points": [0, 1], "probs": [0.5, 0.5]}, "MDS")


@pytest.mark.parametrize("kind", ["MQS", "MDS", "MLS"])
def test_jacobian_matches_finite_differences(merged_small, th_small, kind):
    chk = jacobian_check(merged_small, th_small, G_SIM, kind)
    assert chk["max_rel_error"] <= 1e-3
    assert chk["norm_rel_error"] <= 1e-4


def test_run_pipeline_shares_propensity(merged_small):
    res = run_pipeline(merged_small, [0.25, 0.5], ["MQS", "MLS"], G_SIM, SIM_CFG)
    assert [(r.tau, r.kind) for r in res] == [(0.25, "MQS"), (0.25, "MLS"), (0.5, "MQS"), (0.5, "MLS")]
    r = estimate_uqe(merged_small, fit_theta(merged_small, 0.25, SIM_CFG), G_SIM, "MQS", SIM_CFG)
    assert res[0].point == r.point


def test_recentred_interval(merged_small, th_small):
    cfg = dataclasses.replace(SIM_CFG, recenter_ci=True)
    r = estimate_uqe(merged_small, th_small, G_SIM, "MQS", cfg)
    assert np.mean(r.ci_95) == pytest.approx(r.point - r.bias)


# --------------------------------------------------------------------------- larger samples


@pytest.fixture(scope="module")
def large():
    spec = DgpSpec(n=50000)
    m = generate_merged(spec, seed=8)
    return spec, m, fit_theta(m, 0.5, SIM_CFG)


@pytest.mark.parametrize("kind", ["MQS", "MDS"])
def test_influence_mean_zero(large, kind):
    _, m, th = large
    comp, _, _ = influence_components(m, th, G_SIM, kind)
    sd = comp.psi_d.std()
    assert abs(comp.psi_d.mean()) <= 5 * sd / np.sqrt(m.n)


def test_location_shift_functional(large):
    # d for MLS is E[Lambda_x | R=1] under the true probit Lambda
    spec, m, th = large
    pop = draw_population(spec, 1_000_000, seed=4)
    q = population_quantile(spec, 0.5, pop)
    s = np.sqrt(spec.psi_y)
    lam_x = -spec.gamma_s1 / s * stats.norm.pdf((q - _mu_y(spec, pop.x, pop.z1)) / s)
    d_true = float(np.dot(pop.w, lam_x) / pop.w.sum())
    comp, d_hat, _ = influence_components(m, th, G_SIM, "MLS")
    se_d = np.sqrt(np.mean(comp.psi_d ** 2) / m.n)
    assert abs(d_hat - d_true) <= 3 * se_d, (d_hat, d_true, se_d)


def test_bias_against_analytic(large):
    spec, m, th = large
    pop = draw_population(spec, 1_000_000, seed=4)
    q = population_quantile(spec, 0.5, pop)
    f0 = population_outcome_density(spec, q, pop)
    f2 = population_outcome_density(spec, q, pop, order=2)
    s = np.sqrt(spec.psi_y)
    d_true = float(np.dot(pop.w, -spec.gamma_s1 / s * stats.norm.pdf((q - _mu_y(spec, pop.x, pop.z1)) / s))
                   / pop.w.sum())
    _, d_hat, _ = influence_components(m, th, G_SIM, "MLS")
    B = bias_term(th, d_hat)
    B_true = th.b_y**2 * f2 * d_true * get_kernel(th.kernel_y).mu2 / (2 * f0**2)
    assert abs(B / B_true - 1) <= 0.25, (B, B_true)


@pytest.mark.slow
def test_plugin_se_against_monte_carlo_sd(mc_default_5000):
    from conftest import summary_row

    s = summary_row(mc_default_5000, 0.5, "MQS")
    assert 0.7 <= s["sd"] / s["mean_se_plugin"] <= 1.4, s
