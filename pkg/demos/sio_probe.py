"""Operator-norm probes of the second-order singular integrals under grid refinement."""

import numpy as np

from vortexmf import forms_sio as fs
from vortexmf import harness as H

v = H.probe_field()
for order in (1, 2):
    for rep in fs.refinement_study(v, order, np.pi, sizes=(64, 128, 256), tests=8, iterations=4):
        ratio = "" if rep.refinement_ratio is None else f"  ratio {rep.refinement_ratio:.3f}"
        print(f"order {order} n={rep.grid_n:4d}  norm {rep.norm_estimate:.4f}  C {rep.fitted_C:.4f}{ratio}")
