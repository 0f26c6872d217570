import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from mfslq import read_problem, shipped_problem, solve_mfslq, validate_problem  # noqa: E402

ACCEPTANCE = []


def load(name, n_steps=None):
    spec, _ = read_problem(shipped_problem(name), n_steps=n_steps)
    return validate_problem(spec)


@pytest.fixture(scope="session")
def cp_lq1():
    return load("cp_lq1")


@pytest.fixture(scope="session")
def cp_j1():
    return load("cp_j1")


@pytest.fixture(scope="session")
def mf1():
    return load("mf1")


@pytest.fixture(scope="session")
def lq_solution(cp_lq1):
    return solve_mfslq(cp_lq1)


@pytest.fixture(scope="session")
def mf_solution(mf1):
    return solve_mfslq(mf1)


@pytest.fixture(scope="session")
def mf_solution_1024():
    return solve_mfslq(load("mf1", n_steps=1024), keep_operators=False)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
        terminalreporter.write_line(line)
