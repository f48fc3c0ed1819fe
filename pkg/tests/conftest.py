from __future__ import annotations

import numpy as np
import pytest

from uqe2s.simulation import DgpSpec, generate_merged
from uqe2s.uqe import EstimatorConfig

# correctly specified outcome model for the simulation design
SIM_CFG = EstimatorConfig(lambda_link="probit", lambda_index=("1", "z1", "x"))
G_SIM = "normal(0.3,1.5)"

DISCRETE_SPEC = DgpSpec(z1_dist="bernoulli", cutpoints=(-0.3, 0.9), gamma_xz1=0.4,
                        gamma_prop=(-0.4, 0.3, -0.5))
DISCRETE_CFG = EstimatorConfig(lambda_link="probit", lambda_index=("1", "z1", "x", "x*z1"),
                               basis_e=("1", "z1", "z2", "z1*z2", "z2^2"))


@pytest.fixture(scope="session")
def merged_small():
    return generate_merged(DgpSpec(n=3000), seed=2024)


@pytest.fixture(scope="session")
def merged_medium():
    return generate_merged(DgpSpec(n=20000), seed=1)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20260101)


# --------------------------------------------------------------------------- shared Monte Carlo runs
# Seeds are fixed here once; every study below reuses these runs.

MC_SEEDS = {"default_5000": 501, "null_5000": 502, "grid_20000": 503, "default_1250": 504}
TAUS = (0.25, 0.5, 0.75)
KINDS = ("MDS", "MQS", "MLS")


@pytest.fixture(scope="session")
def oracles():
    from uqe2s.simulation import oracle_uqe

    spec = DgpSpec()
    return {(t, k): oracle_uqe(spec, t, G_SIM, k, t_step=0.01, n_draws=1_000_000).value
            for t in TAUS for k in KINDS}


@pytest.fixture(scope="session")
def mc_default_5000():
    from uqe2s.simulation import run_monte_carlo

    return run_monte_carlo(DgpSpec(n=5000), SIM_CFG, n_reps=500, seed=MC_SEEDS["default_5000"],
                           taus=(0.5,), kinds=("MQS", "MDS"), G=G_SIM)


@pytest.fixture(scope="session")
def mc_default_1250():
    from uqe2s.simulation import run_monte_carlo

    return run_monte_carlo(DgpSpec(n=1250), SIM_CFG, n_reps=500, seed=MC_SEEDS["default_1250"],
                           taus=(0.5,), kinds=("MQS",), G=G_SIM)


@pytest.fixture(scope="session")
def mc_null_5000():
    from uqe2s.simulation import run_monte_carlo

    return run_monte_carlo(DgpSpec(n=5000, gamma_s1=0.0), SIM_CFG, n_reps=500, seed=MC_SEEDS["null_5000"],
                           taus=(0.5,), kinds=("MQS",), G=G_SIM)


@pytest.fixture(scope="session")
def mc_grid_20000():
    from uqe2s.simulation import run_monte_carlo

    return run_monte_carlo(DgpSpec(n=20000), SIM_CFG, n_reps=200, seed=MC_SEEDS["grid_20000"],
                           taus=TAUS, kinds=KINDS, G=G_SIM)


def summary_row(report, tau, kind):
    return next(s for s in report.summary if s["tau"] == tau and s["kind"] == kind)
