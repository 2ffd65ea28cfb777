"""Radiation damping rate of an internal mode.

Computes the outgoing resolvent pairing that drives energy from the internal
mode into the continuum. The free-space case is checked against its closed
form before the trapped soliton is treated.
"""
import numpy as np

from soliton_lab.fgr import (ResonantLevel, check_H11, decay_rate, direct_decay_rate, free_kernel_form,
                             gamma_from_forms, leading_order_inputs, level_form, level_forms)
from soliton_lab.grid_model import Grid, make_model
from soliton_lab.ground_state import solve_ground_state
from soliton_lab.linearization import assemble, discrete_spectrum, free_operator

fg = Grid("line1d", 1024, 100.0)
y = fg.nodes
G = np.exp(-y**2 / 4) * (1 + 0.3j * y)
lf = level_form(free_operator(fg, 1.0), ResonantLevel(1.6, [(2,)], np.stack([G, 0 * G])[None]))
print(f"free space: absorbing-layer value {lf.matrix[0, 0].imag:.8f}, "
      f"direct kernel quadrature {free_kernel_form(G, fg, np.sqrt(0.6)):.8f}")

grid = Grid("line1d", 1024, 100.0)
model = make_model(grid, kappa=20.0, potential={"type": "gaussian_well", "depth": 0.5, "width": 1.0})
gs = solve_ground_state(model, grid, 1.5)
H = assemble(gs, model)
spec = discrete_spectrum(H, gs, model)
inputs = leading_order_inputs(spec, model)
forms = level_forms(H, inputs)
res = gamma_from_forms(forms, [1.0])
print(f"\ntrapped soliton: lambda = {spec.lambdas[0]:.6f}, resonance at r = {res.r[0]:.6f}")
print(f"Gamma = {res.Gamma:.6f} (extrapolation error {res.extrapolation_error:.1e})")
print(f"predicted d|z|^2/dt = -Gamma_z |z|^4 with Gamma_z = {decay_rate(res, spec.lambdas):.6f}")
print(f"same constant from the cubic coefficient alone: {direct_decay_rate(H, spec, model)[0]:.6f}")
print(f"H11 holds: {check_H11(H, spec, inputs, forms=forms).verdict}")
