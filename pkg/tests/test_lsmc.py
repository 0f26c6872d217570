import numpy as np
import pytest

from conftest import load
from mfslq.errors import RegressionIllConditioned
from mfslq.lsmc import Regressor, riccati_lsmc, solve_phi_lsmc
from mfslq.riccati import assemble_gains, solve_riccati_deterministic
from mfslq.bsde import solve_phi_deterministic


def test_zero_spread_columns_dropped():
    w = np.zeros(50)
    reg = Regressor(np.stack([np.ones(50), w, w ** 2], axis=1))
    assert reg.keep.tolist() == [True, False, False]
    np.testing.assert_allclose(reg.fit(np.arange(50.0)), 24.5)


def test_collinear_design_raises():
    w = np.random.default_rng(0).standard_normal(100)
    with pytest.raises(RegressionIllConditioned):
        Regressor(np.stack([np.ones(100), w, w * (1 + 1e-9)], axis=1), where=3)


def test_regressor_reproduces_quadratics():
    w = np.random.default_rng(1).standard_normal(200)
    y = 1 + 2 * w - 0.5 * w ** 2
    reg = Regressor(np.stack([np.ones(200), w, w ** 2], axis=1))
    np.testing.assert_allclose(reg.fit(y), y, atol=1e-12)


def test_phi_tier_matches_deterministic_for_constant_inputs():
    p = load("cp_j1", n_steps=40)
    ric = riccati_lsmc(p, n_paths=300)
    a = np.full((41, 1), 0.3)
    phi, psi, _ = solve_phi_lsmc(p, ric, a=a)
    det = solve_phi_deterministic(p, assemble_gains(p, solve_riccati_deterministic(p)), a=a)
    # explicit Euler in the regressed tier: first order in dt
    assert np.abs(phi[:, :, 0].mean(axis=1) - det.phi[:, 0]).max() < 0.05
    assert np.abs(psi).max() < 1e-10
