import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfslq.errors import DimensionMismatch, InputError, ModeUnsupported, NotPSD, RBelowDelta
from mfslq.model import Coefficient, CoefficientSet, JumpModel, ProblemSpec, TimeGrid, validate_problem


def scalar(N=10, **kw):
    base = dict(B=[[1.0]], R=[[1.0]], G=[[1.0]], delta=0.5)
    base.update(kw)
    jumps = base.pop("jumps", JumpModel())
    return ProblemSpec(1, 1, [1.0], TimeGrid(1.0, N), CoefficientSet(**base), jumps)


def test_grid_nodes_and_mids():
    g = TimeGrid(2.0, 4)
    assert g.dt == 0.5
    np.testing.assert_allclose(g.nodes, [0, 0.5, 1, 1.5, 2])
    np.testing.assert_allclose(g.mids, [0.25, 0.75, 1.25, 1.75])


@pytest.mark.parametrize("T,N", [(0.0, 4), (-1.0, 4), (1.0, 0), (1.0, 2.5)])
def test_bad_grid(T, N):
    with pytest.raises(InputError):
        TimeGrid(T, N)


def test_jump_model_checks():
    with pytest.raises(InputError):
        JumpModel(("a",), (1.0, 2.0))
    with pytest.raises(InputError):
        JumpModel(("a", "a"), (1.0, 2.0))
    with pytest.raises(InputError):
        JumpModel(("a",), (-1.0,))
    assert JumpModel(("a", "b"), (1.0, 2.5)).total == 3.5


def test_negative_Q_is_rejected_with_name_and_eigenvalue():
    with pytest.raises(NotPSD) as e:
        validate_problem(scalar(Q=[[-1.0]]))
    assert e.value.context["coefficient"] == "Q"
    assert e.value.context["eigenvalue"] == pytest.approx(-1.0)


def test_R_below_delta():
    with pytest.raises(RBelowDelta) as e:
        validate_problem(scalar(R=[[0.2]]))
    assert e.value.context["coefficient"] == "R"


def test_shape_mismatch_names_coefficient():
    with pytest.raises(DimensionMismatch) as e:
        validate_problem(scalar(A=np.eye(2)))
    assert e.value.context["coefficient"] == "A"


def test_asymmetric_weight_is_symmetrized_and_recorded():
    spec = ProblemSpec(2, 1, [1.0, 0.0], TimeGrid(1.0, 4),
                       CoefficientSet(B=[[1.0], [0.0]], R=[[1.0]], Q=[[1.0, 0.2], [0.0, 1.0]], delta=0.5))
    p = validate_problem(spec)
    np.testing.assert_allclose(p.nodes.Q[0], [[1.0, 0.1], [0.1, 1.0]])
    assert p.symmetrization["Q"] == pytest.approx(0.1)


def test_time_table_is_piecewise_constant():
    c = Coefficient.table([0.0, 0.5], [[[1.0]], [[3.0]]])
    v = c.sample(np.array([0.0, 0.25, 0.5, 0.75, 1.0]))[:, 0, 0]
    np.testing.assert_allclose(v, [1, 1, 3, 3, 3])


def test_w_slope_needs_path_dependent_mode():
    A = Coefficient.constant([[0.0]]).with_slope([[0.1]])
    with pytest.raises(ModeUnsupported):
        validate_problem(scalar(A=A))


def test_mean_field_flag():
    assert not validate_problem(scalar()).has_mean_field
    assert validate_problem(scalar(Q1=[[1.0]])).has_mean_field


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**16))
def test_random_psd_weights_validate(n, m, seed):
    rng = np.random.default_rng(seed)
    Qh, Rh = rng.standard_normal((n, n)), rng.standard_normal((m, m))
    cs = CoefficientSet(A=rng.standard_normal((n, n)), B=rng.standard_normal((n, m)), Q=Qh @ Qh.T,
                        R=Rh @ Rh.T + np.eye(m), G=np.eye(n), delta=0.5)
    p = validate_problem(ProblemSpec(n, m, np.ones(n), TimeGrid(1.0, 5), cs))
    assert p.nodes.Q.shape == (6, n, n)
    assert np.allclose(p.nodes.Q, np.swapaxes(p.nodes.Q, 1, 2))
