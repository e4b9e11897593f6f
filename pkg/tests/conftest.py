import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hyblpv.lpv import (AffineMatrices, BasisSet, LpvPlant, ParameterDomain, Partition,  # noqa: E402
                        build_grids)
from hyblpv.synthesis import SynthesisProblem, design, reconstruct_controller  # noqa: E402


def toy_terms():
    """Lightly damped oscillator whose stiffness grows with rho; w = [d, noise]."""
    A0 = np.array([[0.0, 1.0], [-1.0, -0.4]])
    A1 = np.array([[0.0, 0.0], [-2.0, 0.0]])
    Z = np.zeros
    return {
        "A": [A0, A1],
        "B1": [np.array([[0.0, 0.0], [1.0, 0.0]]), Z((2, 2))],
        "B2": [np.array([[0.0], [1.0]]), Z((2, 1))],
        "C1": [np.array([[1.0, 0.0], [0.0, 0.0]]), Z((2, 2))],
        "D11": [Z((2, 2)), Z((2, 2))],
        "D12": [np.array([[0.0], [1.0]]), Z((2, 1))],
        "C2": [np.array([[1.0, 0.0]]), Z((1, 2))],
        "D21": [np.array([[0.0, 1.0]]), Z((1, 2))],
        "D22": [Z((1, 1)), Z((1, 1))],
    }


TOY_TWO = ((0.0, 0.6), (0.4, 1.0))


def toy_plant(intervals=TOY_TWO, points=5):
    part = build_grids(Partition.from_intervals(intervals), points)
    return LpvPlant(part, [AffineMatrices(toy_terms())], name="toy")


def toy_problem(intervals=TOY_TWO, rate=1.0, points=5, **kw):
    plant = toy_plant(intervals, points)
    hull = plant.partition.hull()
    bases = [BasisSet.paper_default(b) for b in plant.partition.boxes]
    dom = ParameterDomain.interval(hull.lo[0], hull.hi[0], rate)
    return SynthesisProblem(plant, dom, bases, **kw)


@pytest.fixture(scope="session")
def toy_design():
    sol = design(toy_problem(margin=1e-7))
    return sol, reconstruct_controller(sol)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one line per acceptance criterion, repeated at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
