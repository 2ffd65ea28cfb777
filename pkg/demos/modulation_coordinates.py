"""Modulation coordinates and the Poisson structure they carry.

Composes a state from (theta, omega, z, f), decomposes it back, and runs the
bracket identities that make (theta, omega, z, f) nearly canonical.
"""
import numpy as np

from soliton_lab.grid_model import Grid, make_model, mass
from soliton_lab.linearization import SpectralFamily
from soliton_lab.modulation import compose, decompose, random_state, symplectic_suite

grid = Grid("line1d", 512, 30.0)
model = make_model(grid, kappa=20.0, potential={"type": "gaussian_well", "depth": 0.5, "width": 1.0})
family = SpectralFamily(model, 1.5)
rng = np.random.default_rng(0)

coords = random_state(family, rng, 1e-2, omega_offset=0.2)
U = compose(coords, family)
back = decompose(U, family)
print(f"composed state with theta={coords.theta:.6f} omega={coords.omega:.6f} z={coords.z[0]:.5f}")
print(f"decomposed back to theta={back.theta:.6f} omega={back.omega:.6f} z={back.z[0]:.5f}")
print(f"charge Q(U) = {mass(U, grid):.8f}")

print("\nidentity                          max error   tolerance")
for c in symplectic_suite(family, n_states=6, seed=1, n_pairs=30):
    print(f"  {c.name:32s} {c.max_error:9.2e}   {c.tolerance:.0e}   {'ok' if c.passed else 'FAIL'}")
