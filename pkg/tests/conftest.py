import numpy as np
import pytest

from rdlung import rd, solver
from rdlung.tree import TreeConfig, build_tree


@pytest.fixture(scope="session")
def small_tree():
    """~250 airways, 20% collapsible."""
    return build_tree(TreeConfig(max_generation=7, collapsible_fraction=0.2, asymmetry_seed=2))


@pytest.fixture(scope="session")
def medium_tree():
    """~4k airways with about 1000 collapsible ones."""
    return build_tree(TreeConfig(max_generation=11, root_radius=0.006,
                                 collapsible_fraction=0.25, asymmetry_seed=5))


@pytest.fixture(scope="session")
def rd_tree():
    """Narrow variant of small_tree whose opening pressures straddle PEEP 10 mbar."""
    return build_tree(TreeConfig(max_generation=7, root_radius=0.0025,
                                 collapsible_fraction=0.2, asymmetry_seed=2))


@pytest.fixture
def small_model(rd_tree):
    return solver.build_model(rd_tree, rd_config=rd.RdConfig(gamma=100.0, seed=2))


def y_tree(length=0.05, radius=0.004):
    """Root with two identical daughters."""
    from rdlung.tree import AirwayTree

    return AirwayTree(
        parent=[-1, 0, 0], generation=[0, 1, 1],
        length=[length, length * 0.8, length * 0.8],
        radius=[radius, radius * 0.8, radius * 0.8],
        wall_thickness=[4e-4, 3e-4, 3e-4], wall_modulus=[2e5, 2e5, 2e5],
        supplied_area=[0.0, np.pi * (radius * 0.8) ** 2, np.pi * (radius * 0.8) ** 2],
        lobe=[0, 3, 4], collapsible=[False, False, False], height=[0.09, 0.09, 0.09],
    )


ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Callable recording one PASS/FAIL line per acceptance criterion."""

    def report(number, title, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number:2d}  {title}: {detail}"
        ACCEPTANCE_LINES.append((number, line))
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
