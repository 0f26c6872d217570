import numpy as np
import pytest

from conftest import load
from mfslq.errors import DiscretizationMismatch, ModeUnsupported, TreeTooLarge
from mfslq.meanfield import solve_mfslq
from mfslq.model import CoefficientSet, JumpModel, ProblemSpec, TimeGrid, validate_problem
from mfslq.simulate import ControlPath, NoiseBundle, simulate_state
from mfslq.verify import (ScenarioTree, dp_oracle, dp_oracle_dense, feedback_in_tree, perturbation_gap,
                          run_checks, stationarity_residual)


@pytest.fixture(scope="module")
def mf_small():
    return solve_mfslq(load("mf1", n_steps=48))


def test_one_step_tree_by_hand():
    # x1 = 1 + u, cost u^2 + x1^2  ->  u = -1/2, J = 1/2
    res = dp_oracle(load("cp_lq1"), 1)
    assert res.cost == pytest.approx(0.5, abs=1e-14)
    assert res.controls[0][0, 0] == pytest.approx(-0.5, abs=1e-14)


@pytest.mark.parametrize("name,steps", [("mf1", 3), ("cp_j1", 3), ("cp_lq1", 4)])
def test_sparse_oracle_matches_dense(name, steps):
    p = load(name)
    assert dp_oracle(p, steps).cost == pytest.approx(dp_oracle_dense(p, steps).cost, rel=1e-10, abs=1e-13)


def test_tree_guard_and_marks():
    with pytest.raises(TreeTooLarge) as e:
        ScenarioTree(load("mf1"), 20)
    assert e.value.context["scenarios"] == 2 ** 20
    spec = ProblemSpec(1, 1, [1.0], TimeGrid(1.0, 10), CoefficientSet(B=[[1.0]], R=[[1.0]], delta=0.5),
                       JumpModel(("a", "b"), (1.0, 1.0)))
    with pytest.raises(ModeUnsupported):
        ScenarioTree(validate_problem(spec), 2)


def test_tree_probabilities_sum_to_one():
    tree = ScenarioTree(load("cp_j1"), 4)
    assert tree.b == 4
    assert all(abs(p.sum() - 1) < 1e-14 for p in tree.probs)


def test_feedback_never_beats_oracle(mf_small):
    for k in (2, 4, 8):
        assert feedback_in_tree(mf_small.prob, mf_small.feedback_law(), k) >= dp_oracle(mf_small.prob, k).cost - 1e-12


def test_solver_grid_must_refine_tree(mf_small):
    with pytest.raises(DiscretizationMismatch):
        feedback_in_tree(mf_small.prob, mf_small.feedback_law(), 5)


def test_stationarity_flags_a_corrupted_gain(mf_small):
    p = mf_small.prob
    noise = NoiseBundle(p.grid, p.spec.jumps, 200, seed=1)
    ok = stationarity_residual(p, mf_small, simulate_state(p, ControlPath.feedback(mf_small.feedback_law()), noise))
    assert ok["meanfield"]["normalized_max"] < 1e-10
    bad = solve_mfslq(p)
    bad.gain = bad.gain * 1.2
    res = stationarity_residual(p, bad, simulate_state(p, ControlPath.feedback(bad.feedback_law()), noise))
    assert res["sub1"]["normalized_max"] > 1e-2


def test_zero_direction_has_zero_gap(mf_small):
    p = mf_small.prob
    res = perturbation_gap(p, mf_small, n_directions=1, epsilons=(0.1,), n_paths=200,
                           directions=[np.zeros((p.N + 1, p.m))])
    assert res["cells"][0]["dJ"] == 0.0


def test_battery_passes_on_a_solution(mf_solution):
    # Monte Carlo z-scores compare Euler paths with RK4 means: needs a fine grid
    rep = run_checks(mf_solution.prob, mf_solution, checks=("stationarity", "constraints"), n_paths=200,
                     constraint_paths=4000)
    assert rep.passed
    assert set(rep.to_dict()["checks"]) == {"stationarity", "constraints"}
