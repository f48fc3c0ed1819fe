from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from uqe2s.counterfactual import CounterfactualDistribution, ShiftKind, build_counterfactual, shift_direction
from uqe2s.errors import ValidationError

seeds = st.integers(0, 100_000)


def test_two_point_sample():
    G = build_counterfactual({"sample": [0.0, 1.0]})
    assert G.cdf(0.5) == pytest.approx(0.5)
    assert G.quantile(0.25) == pytest.approx(0.25)


def test_normal_source():
    G = build_counterfactual("normal(0,1)")
    assert G.quantile(0.5) == pytest.approx(0.0, abs=1e-12)
    assert G.pdf(0.0) == pytest.approx(0.39894, abs=1e-5)
    assert G.quantile_pdf(0.975) == pytest.approx(stats.norm.pdf(1.959964), rel=1e-5)


def test_uniform_and_table_sources():
    U = build_counterfactual(" uniform( -1 , 3 ) ")
    assert U.cdf(0.0) == pytest.approx(0.25) and U.quantile(0.5) == pytest.approx(1.0)
    T = build_counterfactual("table:0:-2,0.5:0,1:4")
    assert T.quantile(0.75) == pytest.approx(2.0)
    assert T.cdf(-1.0) == pytest.approx(0.25)
    D = build_counterfactual({"u": [0, 1], "q": [1, 2]})
    assert D.pdf(1.5) == pytest.approx(1.0)


def test_discrete_source():
    G = build_counterfactual({"points": [0, 1, 2], "probs": [0.2, 0.3, 0.5]})
    np.testing.assert_allclose(G.cdf([-1, 0, 0.5, 1, 2, 5]), [0, 0.2, 0.2, 0.5, 1, 1])
    np.testing.assert_allclose(G.quantile([0.1, 0.2, 0.21, 0.5, 0.9]), [0, 0, 1, 1, 2])
    assert G.discrete_points is not None


def test_file_source(tmp_path):
    (tmp_path / "donor.csv").write_text("x\n3\n1\n2\n")
    G = build_counterfactual("file:donor.csv", base_dir=tmp_path)
    assert G.support == (1.0, 3.0)
    assert G.cdf(2.0) == pytest.approx(0.5)


@pytest.mark.parametrize("bad", [
    {"sample": [1.0, 1.0, 1.0]},
    "table:0:1,0.5:0.5,1:2",  # non-monotone q
    "table:0:1,0.7:2,0.5:3,1:4",  # non-monotone u
    "table:0.1:1,1:2",  # does not span [0, 1]
    "normal(0,-1)",
    "uniform(2,1)",
    "gamma(1,1)",
    {"points": [0, 1], "probs": [0.5, 0.6]},
    {"what": 1},
    "file:/nonexistent/donor.csv",
])
def test_invalid_sources(bad):
    with pytest.raises(ValidationError):
        build_counterfactual(bad)


def test_shift_kind_parse():
    assert ShiftKind.parse("mqs") is ShiftKind.MQS
    with pytest.raises(ValidationError):
        ShiftKind.parse("XYZ")


@given(seed=seeds, weighted=st.booleans())
@settings(max_examples=40)
def test_zero_shift(seed, weighted):
    rng = np.random.default_rng(seed)
    xs = rng.normal(size=40)
    w = rng.random(40) + 0.2 if weighted else None
    F = CounterfactualDistribution.from_sample(xs, w)
    x = rng.uniform(xs.min(), xs.max(), size=50)
    Fx, fx = F.cdf(x), F.pdf(x)
    g, _ = shift_direction(F, Fx, fx, x, "MQS")
    assert np.max(np.abs(g)) <= 1e-10
    g, keep = shift_direction(F, Fx, fx, x, "MDS")
    assert np.max(np.abs(g)) <= 1e-8 and keep.all()


def test_donor_equals_f_hat_only_without_weights():
    rng = np.random.default_rng(1)
    x = rng.normal(size=200)
    G = build_counterfactual({"sample": x.tolist()})
    F1 = CounterfactualDistribution.from_sample(x)
    Fw = CounterfactualDistribution.from_sample(x, np.exp(x))
    grid = np.linspace(x.min(), x.max(), 101)
    np.testing.assert_allclose(G.cdf(grid), F1.cdf(grid), atol=1e-14)
    assert np.max(np.abs(G.cdf(grid) - Fw.cdf(grid))) > 0.1


def test_location_shift_is_unit():
    x = np.linspace(-3, 3, 11)
    g, keep = shift_direction(None, None, None, x, "MLS")
    np.testing.assert_array_equal(g, 1.0)
    assert keep.all()


def test_distributional_shift_matches_quantile_direction():
    # G = F - f q gives g_p = q exactly when F, f are the true smooth pair
    q = lambda x: 0.2 + 0.1 * np.tanh(x)  # noqa: E731
    F, f = stats.norm.cdf, stats.norm.pdf
    G = CounterfactualDistribution.from_callables(lambda x: F(x) - f(x) * q(x), None, None)
    x = np.linspace(-2.5, 2.5, 51)
    g, keep = shift_direction(G, F(x), f(x), x, "MDS")
    assert keep.all()
    np.testing.assert_allclose(g, q(x), atol=1e-14)


@given(seed=seeds)
@settings(max_examples=40)
def test_quantile_direction_bounded(seed):
    rng = np.random.default_rng(seed)
    xs, gs = rng.standard_t(2, size=30), 5 * rng.standard_t(2, size=30) + 3
    F = CounterfactualDistribution.from_sample(xs)
    G = CounterfactualDistribution.from_sample(gs)
    x = np.linspace(xs.min(), xs.max(), 77)
    g, _ = shift_direction(G, F.cdf(x), F.pdf(x), x, "MQS")
    bound = (gs.max() - gs.min()) + (xs.max() - xs.min())
    assert np.all(np.abs(g) <= bound + 1e-9)


@given(seed=seeds)
@settings(max_examples=40)
def test_distributional_direction_sign(seed):
    rng = np.random.default_rng(seed)
    xs = rng.normal(size=30)
    F = CounterfactualDistribution.from_sample(xs)
    G = build_counterfactual(f"normal({rng.normal():.3f},{rng.uniform(0.5, 2):.3f})")
    x = np.linspace(xs.min(), xs.max(), 60)[1:-1]
    Fx = F.cdf(x)
    g, keep = shift_direction(G, Fx, F.pdf(x), x, "MDS")
    Gx = G.cdf(x)
    assert np.all(g[keep & (Gx < Fx)] > 0)
    assert np.all(g[keep & (Gx > Fx)] < 0)


def test_density_floor_drops_points():
    x = np.array([0.0, 1.0, 2.0])
    g, keep = shift_direction(build_counterfactual("normal(0,1)"), np.array([0.2, 0.5, 0.8]),
                              np.array([1.0, 1e-6, 0.5]), x, "MDS", in_trim=np.array([True, True, False]))
    np.testing.assert_array_equal(keep, [True, False, False])
    assert g[1] == 0 and g[2] == 0
