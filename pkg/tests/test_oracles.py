"""The frozen reference values agree with a fresh run of the independent oracles."""
import oracles


def test_cpj1_reference_is_reproducible():
    assert abs(oracles.cpj1_p0() - oracles.CPJ1_P0) < 1e-14


def test_cpj1_reference_is_converged():
    assert abs(oracles.cpj1_p0(n=20000) - oracles.CPJ1_P0) < 1e-12


def test_mf1_reference_is_converged():
    assert abs(oracles.mf1_cost(n=20000) - oracles.MF1_J) < 1e-14
    assert abs(oracles.mf1_cost(n=5000) - oracles.MF1_J) < 1e-11


def test_cplq1_closed_form_solves_the_ode():
    # -P' = -P^2, P(T) = 1
    assert abs(oracles.rk4_backward(lambda p: -p * p, 1.0, 1.0, 4000) - oracles.cplq1_p(0.0)) < 1e-12
