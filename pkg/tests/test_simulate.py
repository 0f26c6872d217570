import numpy as np
import pytest

from conftest import load
from mfslq.errors import GridMismatch, InputError
from mfslq.model import CoefficientSet, ProblemSpec, TimeGrid, validate_problem
from mfslq.riccati import assemble_gains, solve_riccati_deterministic
from mfslq.simulate import (BLOCK, ControlPath, FeedbackLaw, NoiseBundle, estimate_mean_trajectory, evaluate_cost,
                            monte_carlo, simulate_state)


@pytest.fixture(scope="module")
def j1():
    return load("cp_j1", n_steps=50)


def test_same_seed_same_noise(j1):
    a = NoiseBundle(j1.grid, j1.spec.jumps, 300, seed=7).increments()
    b = NoiseBundle(j1.grid, j1.spec.jumps, 300, seed=7).increments()
    c = NoiseBundle(j1.grid, j1.spec.jumps, 300, seed=8).increments()
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert not np.array_equal(a[0], c[0])


def test_paths_do_not_depend_on_bundle_size(j1):
    small = NoiseBundle(j1.grid, j1.spec.jumps, 10, seed=3).increments()[0]
    big = NoiseBundle(j1.grid, j1.spec.jumps, BLOCK + 50, seed=3)
    assert np.array_equal(small, big.increments()[0][:, :10])
    split = np.concatenate([big.increments(0, BLOCK - 5)[0], big.increments(BLOCK - 5)[0]], axis=1)
    assert np.array_equal(split, big.increments()[0])


def test_noise_moments(j1):
    dW, dN = NoiseBundle(j1.grid, j1.spec.jumps, 4000, seed=1).increments()
    assert abs(dW.var() / j1.dt - 1) < 0.03
    counts = dN.sum(axis=0)[:, 0]
    assert abs(counts.mean() - 2.0) < 4 * np.sqrt(2.0 / 4000)


def test_bad_path_count(j1):
    with pytest.raises(InputError):
        NoiseBundle(j1.grid, j1.spec.jumps, 0)


def test_grid_mismatch_detected(j1):
    noise = NoiseBundle(TimeGrid(1.0, 20), j1.spec.jumps, 4)
    with pytest.raises(GridMismatch):
        simulate_state(j1, ControlPath.open_loop(np.zeros((51, 1))), noise)


def test_zero_dynamics_keep_state_constant():
    p = validate_problem(ProblemSpec(2, 1, [1.0, -2.0], TimeGrid(1.0, 10),
                                     CoefficientSet(R=[[1.0]], delta=0.5)))
    pb = simulate_state(p, ControlPath.open_loop(np.zeros((11, 1))), NoiseBundle(p.grid, p.spec.jumps, 5))
    assert np.all(pb.X == np.array([1.0, -2.0]))
    assert evaluate_cost(p, pb).value == 0.0


def test_feedback_control_is_gain_times_state(j1):
    g = assemble_gains(j1, solve_riccati_deterministic(j1))
    law = FeedbackLaw(g.K, np.zeros((51, 1)))
    pb = simulate_state(j1, ControlPath.feedback(law), NoiseBundle(j1.grid, j1.spec.jumps, 20, seed=2))
    np.testing.assert_allclose(pb.u, np.einsum("kij,pkj->pki", g.K, pb.X), atol=1e-15)


def test_streamed_summary_matches_in_memory(j1):
    g = assemble_gains(j1, solve_riccati_deterministic(j1))
    ctl = ControlPath.feedback(FeedbackLaw(g.K, np.zeros((51, 1))))
    noise = NoiseBundle(j1.grid, j1.spec.jumps, 2 * BLOCK + 17, seed=5)
    st = monte_carlo(j1, ctl, noise, threads=2)
    pb = simulate_state(j1, ctl, noise)
    mean, se = estimate_mean_trajectory(pb)
    np.testing.assert_allclose(st.mean_state, mean, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(st.se_state, se, rtol=1e-6, atol=1e-14)
    assert st.cost.value == pytest.approx(evaluate_cost(j1, pb).value, rel=1e-12)
    assert st.cost.n_paths == noise.n_paths
