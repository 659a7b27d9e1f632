import numpy as np
import pytest

from pnpflux import GeometryMoments, ProblemTemplate, SolverControls


@pytest.fixture(scope="session")
def moments():
    return GeometryMoments.from_geometry()


@pytest.fixture(scope="session")
def fast_template():
    """Small mesh / few outer rounds: cheap but converged enough for unit tests."""
    return ProblemTemplate(n_nodes=101, n_outer=3)


@pytest.fixture(scope="session")
def tiny_template():
    return ProblemTemplate(n_nodes=41, n_outer=2)
