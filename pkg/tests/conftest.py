import numpy as np
import pytest

from amrfem.mesh import KEEP, REFINE, create_forest_mesh, refine_and_coarsen


def refine_cells(mesh, cells):
    flags = np.full(mesh.num_cells, KEEP)
    flags[list(cells)] = REFINE
    return refine_and_coarsen(mesh, flags)[0]


@pytest.fixture
def hanging_mesh():
    """4 cells with the origin cell refined once: two hanging midpoints."""
    return refine_cells(create_forest_mesh(1), [0])


@pytest.fixture
def three_level_mesh():
    mesh = refine_cells(create_forest_mesh(2), [0, 5])
    return refine_cells(mesh, [mesh.find_leaf(3, (1, 1))])


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[key])
