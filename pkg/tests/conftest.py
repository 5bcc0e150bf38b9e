import sys
from pathlib import Path

import numpy as np
import pytest

from couplopt.benchmarks import clamped_beam, resonator
from couplopt.coupling import ModalFields
from couplopt.eigen import solve_modes
from couplopt.fem import Material, assemble_system
from couplopt.mesh import detect_symmetry
from couplopt.shape_param import build_morph_operator

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
UM = 1e-6


class Modal:
    """Mesh, system, modes and fields bundled for tests."""

    def __init__(self, mesh, count, material=None):
        self.mesh = mesh
        self.material = material or Material()
        self.system = assemble_system(mesh, self.material)
        self.basis = solve_modes(self.system, count)
        self.fields = ModalFields(mesh, self.material, self.system, self.basis)


@pytest.fixture(scope="session")
def configs():
    return CONFIGS


@pytest.fixture(scope="session")
def small_beam():
    return Modal(clamped_beam(length=20.0, width=2.0, thickness=2.0, edge=1.0, layers=2), 8)


@pytest.fixture(scope="session")
def res_modal():
    return Modal(resonator(), 12)


@pytest.fixture(scope="session")
def res_morph(res_modal):
    mesh = res_modal.mesh
    return build_morph_operator(mesh, detect_symmetry(mesh), ("spring",), 3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    lines = [l for m in list(sys.modules.values()) for l in getattr(m, "ACCEPTANCE_LINES", [])]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
