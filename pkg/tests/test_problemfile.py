import numpy as np
import pytest

from mfslq.errors import ProblemFileError
from mfslq.model import validate_problem
from mfslq.problemfile import SHIPPED, parse_problem, read_problem, shipped_problem

HEAD = "n = 1\nm = 1\nT = 1.0\nn_steps = 10\nx0 = [1.0]\n"


@pytest.mark.parametrize("name", sorted(SHIPPED))
def test_shipped_examples_validate(name):
    spec, sha = read_problem(shipped_problem(name))
    p = validate_problem(spec)
    assert len(sha) == 64
    assert p.N == 1000


def test_shipped_contents():
    j1 = validate_problem(read_problem(shipped_problem("cp_j1"))[0])
    assert j1.K == 1 and j1.nu[0] == 2.0
    assert j1.nodes.beta[0, 0, 0, 0] == 0.5
    mf = validate_problem(read_problem(shipped_problem("mf1"))[0])
    assert mf.has_mean_field and mf.nodes.C[0, 0, 0] == 0.5


def test_table_and_per_mark_coefficients():
    text = HEAD + """
[[marks]]
label = "z"
intensity = 1.5

[coefficients]
B = 1.0
R = [[2.0]]
beta = [[[0.3]]]

[coefficients.Q]
times = [0.0, 0.5]
values = [[[1.0]], [[2.0]]]
"""
    p = validate_problem(parse_problem(text))
    assert p.nodes.Q[0, 0, 0] == 1.0 and p.nodes.Q[-1, 0, 0] == 2.0
    assert p.nodes.R[0, 0, 0] == 2.0 and p.nodes.B[0, 0, 0] == 1.0
    assert p.spec.coeffs.delta == pytest.approx(1.0)


def test_syntax_error_has_position():
    with pytest.raises(ProblemFileError) as e:
        parse_problem("n = 1\nm = = 2\n")
    assert e.value.line == 2 and e.value.col is not None


def test_unknown_coefficient_is_located():
    with pytest.raises(ProblemFileError) as e:
        parse_problem(HEAD + "[coefficients]\nR = [[1.0]]\nZZ = [[1.0]]\n")
    assert "ZZ" in str(e.value) and e.value.line == 8


def test_vector_instead_of_matrix():
    with pytest.raises(ProblemFileError) as e:
        parse_problem(HEAD + "[coefficients]\nR = [1.0]\n")
    assert e.value.line == 7


def test_per_mark_count_must_match():
    with pytest.raises(ProblemFileError):
        parse_problem(HEAD + "[coefficients]\nR = [[1.0]]\nbeta = [[[0.1]]]\n")


def test_step_override():
    spec = parse_problem(HEAD + "[coefficients]\nR = [[1.0]]\n", n_steps=40)
    assert spec.grid.n_steps == 40
    np.testing.assert_allclose(spec.x0, [1.0])
