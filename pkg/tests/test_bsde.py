import numpy as np
import pytest

from conftest import load
from mfslq.bsde import assemble_offset_M, backward_linear, reconstruct_adjoint, solve_phi_deterministic, stationarity_terms
from mfslq.riccati import assemble_gains, solve_riccati_deterministic
from mfslq.simulate import ControlPath, FeedbackLaw, NoiseBundle, simulate_state


@pytest.fixture(scope="module")
def setup():
    p = load("cp_j1", n_steps=100)
    ric = solve_riccati_deterministic(p)
    return p, ric, assemble_gains(p, ric)


def test_zero_inputs_give_zero_phi(setup):
    p, _, g = setup
    phi = solve_phi_deterministic(p, g)
    assert phi.phi.shape == (101, 1)
    assert np.all(phi.phi == 0)


def test_backward_linear_exponential():
    # -phi' = -phi + 1, phi(1) = 0  ->  phi(t) = 1 - exp(t - 1)
    N, h = 20, 0.05
    M = -np.ones((N + 1, 1, 1))
    s = np.ones((N + 1, 1, 1))
    phi = backward_linear(M, M[:-1], s, s[:-1], h)
    t = np.linspace(0, 1, N + 1)
    assert np.abs(phi[:, 0, 0] - (1 - np.exp(t - 1))).max() < 1e-7


def test_column_batch_equals_single_solves(setup):
    p, _, g = setup
    rng = np.random.default_rng(0)
    a = rng.standard_normal((101, 1, 3))
    lam = rng.standard_normal((101, 1, 3))
    batch = solve_phi_deterministic(p, g, a=a, lam=lam)
    for c in range(3):
        one = solve_phi_deterministic(p, g, a=a[:, :, c], lam=lam[:, :, c])
        np.testing.assert_allclose(batch.phi[:, :, c], one.phi, rtol=0, atol=1e-14)


def test_adjoint_satisfies_stationarity_along_optimal_feedback(setup):
    # without mean-field terms and multipliers the optimum is u = K X and M = 0
    p, ric, g = setup
    phi = solve_phi_deterministic(p, g)
    M = assemble_offset_M(p, g, ric, phi)
    assert np.all(M == 0)
    law = FeedbackLaw(g.K, np.zeros((101, 1)))
    pb = simulate_state(p, ControlPath.feedback(law), NoiseBundle(p.grid, p.spec.jumps, 50, seed=4))
    adj = reconstruct_adjoint(p, ric, g, phi, pb)
    S = stationarity_terms(p, adj, pb.u)
    assert np.abs(S).max() < 1e-12 * max(1.0, np.abs(pb.u).max())
