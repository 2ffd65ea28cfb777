"""Internal modes of the linearized operator around a trapped soliton.

Builds the non-self-adjoint linearization at omega = 1.5 for the Gaussian
well model, lists its internal eigenvalues and the resonance order N, and
runs the arithmetic checks on them.
"""
import numpy as np

from soliton_lab.grid_model import Grid, l2_norm, make_model, pairing, s3
from soliton_lab.ground_state import solve_ground_state
from soliton_lab.linearization import assemble, check_H7_to_H10, discrete_spectrum

grid = Grid("line1d", 1024, 60.0)
model = make_model(grid, kappa=20.0, potential={"type": "gaussian_well", "depth": 0.5, "width": 1.0})
omega = 1.5
gs = solve_ground_state(model, grid, omega)
H = assemble(gs, model)
spec = discrete_spectrum(H, gs, model)

print(f"omega = {omega}, continuum starts at +-{omega}")
for j, lam in enumerate(spec.lambdas):
    xi = spec.xis[j]
    res = l2_norm(H(xi) - lam * xi, grid) / l2_norm(xi, grid)
    print(f"  lambda_{j} = {lam:.10f}   eigen residual {res:.1e}   <s3 xi, xi> = {pairing(s3(xi), xi, grid).real:.12f}")
print(f"resonance order N = {spec.N} (smallest N with N lambda > omega)")
print(f"generalized kernel check |H s3 Phi| = {l2_norm(H(s3(gs.Phi)), grid):.2e}")
print(f"Jordan chain check |H dPhi + s3 Phi| = {l2_norm(H(gs.dPhi) + s3(gs.Phi), grid):.2e}")

rep = check_H7_to_H10(spec, omega)
print(f"H7 {rep.h7}  H8 {rep.h8}  H9 {rep.h9}  H10 {rep.h10}")
print(f"two-mode resonance 2 lambda = {2 * spec.lambdas[0]:.6f} sits in the continuum: "
      f"{bool(2 * spec.lambdas[0] > omega)}")
