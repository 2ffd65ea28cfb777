"""Shared models for the test suite.

The "well" model (cubic, kappa = 20, Gaussian well of depth 0.5 and width 1,
omega0 = 1.5) has one internal mode with N = 1 and is the small-grid version
of the decay scenario.  The "nf" model uses kappa = 1 on a coarser grid and is
cheap enough for the polynomial algebra checks.
"""
import numpy as np
import pytest

from soliton_lab.grid_model import Grid, make_model
from soliton_lab.ground_state import solve_ground_state
from soliton_lab.linearization import SpectralFamily, assemble, discrete_spectrum

WELL = {"type": "gaussian_well", "depth": 0.5, "width": 1.0}


class Setup:
    def __init__(self, n, L, kappa, omega, potential=WELL):
        self.grid = Grid("line1d", n, L)
        self.model = make_model(self.grid, kappa=kappa, q=1.0, potential=potential)
        self.omega = omega
        self.gs = solve_ground_state(self.model, self.grid, omega)
        self.Hop = assemble(self.gs, self.model)
        self.spec = discrete_spectrum(self.Hop, self.gs, self.model)


@pytest.fixture(scope="session")
def sech_setup():
    return Setup(1024, 40.0, 1.0, 1.0, potential={"type": "none"})


@pytest.fixture(scope="session")
def well_setup():
    return Setup(512, 30.0, 20.0, 1.5)


@pytest.fixture(scope="session")
def well_family(well_setup):
    return SpectralFamily(well_setup.model, 1.5)


@pytest.fixture(scope="session")
def nf_setup():
    return Setup(256, 40.0, 1.0, 1.5)


@pytest.fixture(scope="session")
def fgr_setup():
    """Grid large enough for the outgoing resolvent at r = 2 lambda."""
    return Setup(1024, 100.0, 20.0, 1.5)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
