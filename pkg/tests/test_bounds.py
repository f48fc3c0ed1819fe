from __future__ import annotations

import dataclasses

import numpy as np
import pytest
from scipy import special

from uqe2s.bounds import discrete_support, estimate_bounds, period_bound
from uqe2s.counterfactual import CounterfactualDistribution
from uqe2s.errors import ValidationError
from uqe2s.sample import AuxSample, merge_samples
from uqe2s.simulation import DgpSpec, generate_merged, oracle_uqe_discrete
from uqe2s.uqe import EstimatorConfig, fit_theta

from conftest import DISCRETE_CFG, DISCRETE_SPEC

G3 = CounterfactualDistribution.discrete([0, 1, 2], [0.2, 0.3, 0.5])
Z1_FREE = EstimatorConfig(lambda_link="probit", lambda_index=("1", "x"), basis_e=("1", "z1", "z2"))


@pytest.fixture(scope="module")
def disc():
    m = generate_merged(dataclasses.replace(DISCRETE_SPEC, n=8000), seed=21)
    return m, fit_theta(m, 0.5, DISCRETE_CFG)


def test_period_bound_trivial_cases():
    assert period_bound(0.3, 0.7, 0.4, 0.4, 0.5) == 0.0
    assert period_bound(0.6, 0.6, 0.1, 0.4, 0.5) == 0.0
    # binary X with mass t moved from x=0 to x=1: G(0) - F(0) = -t
    t, lam0, lam1, f = 0.2, 0.7, 0.4, 0.25
    assert period_bound(lam0, lam1, 0.5 - t, 0.5, f) == pytest.approx(t * (lam0 - lam1) / f)
    with pytest.raises(ValidationError):
        period_bound(0.1, 0.2, 0.3, 0.4, 0.0)


def test_support_masses(disc):
    m, th = disc
    sup = discrete_support(m.x, th.prop.ell_hat, G3)
    np.testing.assert_array_equal(sup.points, [0, 1, 2])
    assert np.all(np.diff(sup.F_hat) >= 0) and sup.F_hat[-1] == 1.0
    np.testing.assert_allclose(sup.G, [0.2, 0.5, 1.0])
    w = th.prop.ell_hat
    assert sup.F_hat[0] == pytest.approx(w[m.x == 0].sum() / w.sum())


def test_support_errors(disc):
    m, th = disc
    with pytest.raises(ValidationError, match="max_levels"):
        discrete_support(m.x, None, G3, max_levels=2)
    with pytest.raises(ValidationError, match="support"):
        discrete_support(m.x, None, CounterfactualDistribution.discrete([0, 5], [0.5, 0.5]))
    with pytest.raises(ValidationError, match="largest"):
        discrete_support(m.x, None, CounterfactualDistribution.uniform(-1, 4))
    with pytest.raises(ValidationError, match="two support points"):
        discrete_support(np.ones(5), None, G3)


def test_lower_not_above_upper_and_terms(disc):
    m, th = disc
    b = estimate_bounds(m, th, G3)
    assert b.lower <= b.upper and not b.collapsed
    assert [t["j"] for t in b.terms] == [2, 3]
    for t in b.terms:
        assert t["set"] == ("J+" if t["G_jm1"] <= t["F_jm1"] else "J-")
        assert t["z1_star"] in ([0.0], [1.0]) and t["z1_dagger"] in ([0.0], [1.0])
    assert b.tau == 0.5 and b.width == b.upper - b.lower


def test_empty_search_set(disc):
    m, th = disc
    with pytest.raises(ValidationError, match="empty"):
        estimate_bounds(m, th, G3, z1_search=np.zeros((0, 1)))


def test_widening_search_set_never_narrows(disc):
    m, th = disc
    full = estimate_bounds(m, th, G3)
    for sub in ([[0.0]], [[1.0]]):
        b = estimate_bounds(m, th, G3, z1_search=sub)
        assert full.lower <= b.lower + 1e-15 and full.upper >= b.upper - 1e-15
        assert b.width <= 1e-10  # a single z1 value pins the interval


def test_zero_shift(disc):
    m, th = disc
    sup = discrete_support(m.x, th.prop.ell_hat, G3)
    G0 = CounterfactualDistribution.discrete(sup.points, np.diff(np.concatenate([[0.0], sup.F_hat])))
    b = estimate_bounds(m, th, G0)
    assert abs(b.lower) <= 1e-12 and abs(b.upper) <= 1e-12


def test_order_preserving_relabel(disc):
    m, th = disc
    a, c = 10.0, 3.0
    s, x = m.study(), m.aux()
    m2 = merge_samples(s, AuxSample(a + c * x.x, x.z1, x.z2, x.z1_names, x.z2_names))
    th2 = fit_theta(m2, 0.5, DISCRETE_CFG)
    G2 = CounterfactualDistribution.discrete(a + c * np.array([0, 1, 2]), [0.2, 0.3, 0.5])
    b1, b2 = estimate_bounds(m, th, G3), estimate_bounds(m2, th2, G2)
    assert b2.lower == pytest.approx(b1.lower, abs=1e-7)
    assert b2.upper == pytest.approx(b1.upper, abs=1e-7)


def test_z1_free_model_collapses_to_point_formula(disc):
    m, _ = disc
    th = fit_theta(m, 0.5, Z1_FREE)
    b = estimate_bounds(m, th, G3)
    assert b.width <= 1e-10 and b.collapsed
    # independent evaluation of sum_j -(Lam(x^{j-1}) - Lam(x^j)) (G - F)(x^{j-1}) / f
    b0, b1 = th.gmm.beta
    lam = special.ndtr(b0 + b1 * np.array([0.0, 1.0, 2.0]))
    w = th.prop.ell_hat
    F = np.array([w[m.x <= v].sum() for v in (0, 1, 2)]) / w.sum()
    G = np.array([0.2, 0.5, 1.0])
    point = sum(-(lam[j - 1] - lam[j]) * (G[j - 1] - F[j - 1]) / th.f_y for j in (1, 2))
    assert b.lower == pytest.approx(point, abs=1e-12) and b.upper == pytest.approx(point, abs=1e-12)


def test_binary_sign():
    # Lambda increasing in x (gamma_s1 < 0) and mass moved from 0 to 1: both bounds negative
    spec = DgpSpec(z1_dist="bernoulli", cutpoints=(0.3,), gamma_s1=-0.5, gamma_xz1=0.3,
                   gamma_prop=(-0.4, 0.3, -0.5), n=20000)
    cfg = dataclasses.replace(DISCRETE_CFG, lambda_index=("1", "z1", "x", "x*z1"))
    m = generate_merged(spec, seed=3)
    th = fit_theta(m, 0.5, cfg)
    G = CounterfactualDistribution.discrete([0, 1], [0.2, 0.8])
    b = estimate_bounds(m, th, G)
    assert b.terms[0]["set"] == "J+"
    assert b.lower < 0 and b.upper < 0
    truth = oracle_uqe_discrete(spec, 0.5, G, n_draws=200_000).value
    assert truth < 0
