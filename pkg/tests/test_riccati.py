import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from conftest import load
from mfslq.errors import PositivityLost
from mfslq.model import CoefficientSet, JumpModel, ProblemSpec, TimeGrid, validate_problem
from mfslq.riccati import (assemble_gains, cost_to_go_split, riccati_residual, solve_riccati_deterministic,
                           theta_inverse)


def test_closed_form_at_every_node(cp_lq1):
    ric = solve_riccati_deterministic(cp_lq1)
    ref = oracles.cplq1_p(ric.t)
    assert np.abs(ric.P[:, 0, 0] - ref).max() < 1e-12


def test_fourth_order_convergence():
    errs = []
    for N in (5, 10, 20):
        ric = solve_riccati_deterministic(load("cp_j1", n_steps=N))
        errs.append(abs(ric.P[0, 0, 0] - oracles.CPJ1_P0))
    assert errs[0] / errs[1] > 12 and errs[1] / errs[2] > 12


def test_gain_is_minus_B_P_over_R(cp_lq1):
    ric = solve_riccati_deterministic(cp_lq1)
    g = assemble_gains(cp_lq1, ric)
    np.testing.assert_allclose(g.K[:, 0, 0], -ric.P[:, 0, 0], rtol=0, atol=1e-14)


def test_residual_and_positivity(cp_j1):
    ric = solve_riccati_deterministic(cp_j1)
    assert riccati_residual(cp_j1, ric).max() < 1e-5
    assert ric.positivity >= 1.0 - 1e-12       # -Theta = R + nu beta^2 P >= R


def test_cost_to_go_parts_sum_to_P(cp_j1):
    p = cp_j1.with_grid(200)
    ric = solve_riccati_deterministic(p)
    parts = cost_to_go_split(p, assemble_gains(p, ric))
    total = sum(parts)
    assert np.abs(total - ric.P).max() < 1e-8


def test_theta_inverse_rejects_indefinite():
    with pytest.raises(PositivityLost):
        theta_inverse(np.array([[[0.5]]]))


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 3), st.integers(1, 2), st.integers(0, 2**16))
def test_random_problems_give_symmetric_psd_P(n, m, seed):
    rng = np.random.default_rng(seed)
    mat = lambda r, c, s=0.5: s * rng.standard_normal((r, c))
    Qh = mat(n, n)
    cs = CoefficientSet(A=mat(n, n), B=mat(n, m), C=mat(n, n), D=mat(n, m, 0.2), Q=Qh @ Qh.T,
                        R=np.eye(m), G=np.eye(n), alpha=[mat(n, n)], beta=[mat(n, m, 0.2)], delta=0.5)
    p = validate_problem(ProblemSpec(n, m, np.ones(n), TimeGrid(1.0, 50), cs, JumpModel(("z",), (1.0,))))
    ric = solve_riccati_deterministic(p)
    assert np.abs(ric.P - np.swapaxes(ric.P, 1, 2)).max() == 0.0
    assert ric.min_eig_P > -1e-10
