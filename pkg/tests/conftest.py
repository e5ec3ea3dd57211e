import numpy as np
import pytest

from lowrank_iga.assembly import assemble_operators
from lowrank_iga.geometries import generate_builtin
from lowrank_iga.optctl import ControlProblem
from lowrank_iga.splines import refine_geometry
from lowrank_iga.tt import tt_rank1


def desk_problem(name="unit_cube", interior=3, num_steps=2, beta=1e-2, assembly_tol=1e-10):
    """Small control problem with ``interior`` dofs per dimension (p=2)."""
    geo = refine_geometry(generate_builtin(name, 2), interior - 1)
    ops = assemble_operators(geo, assembly_tol).interior()
    assert ops.dims == (interior,) * 3
    yhat = tt_rank1([np.sin(np.pi * np.linspace(0.15, 0.85, interior)) for _ in range(3)])
    return ControlProblem(1.0, num_steps, beta, yhat, ops)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES = []


def record_criterion(number, ok, detail):
    line = "criterion %d: %s  %s" % (number, "PASS" if ok else "FAIL", detail)
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
