import numpy as np
import pytest

import oracles
from conftest import load
from mfslq.errors import ModeUnsupported
from mfslq.meanfield import mean_riccati, solve_mfslq
from mfslq.model import Coefficient, CoefficientSet, ProblemSpec, TimeGrid, validate_problem


def test_mf1_cost_matches_reference(mf_solution):
    assert abs(mf_solution.J - oracles.MF1_J) < 1e-5
    Pi = mean_riccati(mf_solution.prob, mf_solution.ric)
    assert abs(Pi[0, 0, 0] - oracles.MF1_J) < 1e-8


def test_mf1_second_order_in_dt():
    e = [abs(solve_mfslq(load("mf1", n_steps=N)).J - oracles.MF1_J) for N in (50, 100)]
    assert 3.0 < e[0] / e[1] < 5.5


def test_constraints_hold(mf_solution):
    d = mf_solution.diagnostics
    assert d["valid"]
    assert d["constraint_residual_state"] < 1e-10 and d["constraint_residual_control"] < 1e-10
    np.testing.assert_allclose(mf_solution.mean_state, mf_solution.a, atol=1e-10)


def test_plain_problem_has_zero_multipliers(lq_solution):
    assert np.abs(lq_solution.lam).max() < 1e-10
    assert np.abs(lq_solution.gam).max() < 1e-10
    assert lq_solution.J == pytest.approx(0.5, abs=1e-8)


def test_cg_minimizes_the_discrete_form():
    # the discrete minimizer and the stationarity solve differ at O(dt^2) in J
    p = load("mf1", n_steps=60)
    s1 = solve_mfslq(p, method="stationarity")
    s2 = solve_mfslq(p, method="cg")
    assert s2.J <= s1.J + 1e-12
    assert s1.J - s2.J < 1e-5
    assert s1.diagnostics["meanfield_stationarity_normalized"] < 1e-10


def test_both_forms_converge_at_second_order():
    for form in ("plain", "completed"):
        e = [solve_mfslq(load("mf1", n_steps=N), form=form).J - oracles.MF1_J for N in (60, 120)]
        assert e[0] > 0 and 3.5 < e[0] / e[1] < 4.5


def test_path_dependent_rejected():
    A = Coefficient.constant([[0.0]]).with_slope([[0.1]])
    spec = ProblemSpec(1, 1, [1.0], TimeGrid(1.0, 10), CoefficientSet(A=A, B=[[1.0]], R=[[1.0]], delta=0.5),
                       coefficient_mode="path-dependent")
    with pytest.raises(ModeUnsupported):
        solve_mfslq(validate_problem(spec))
