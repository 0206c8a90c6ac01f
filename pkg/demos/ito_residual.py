"""Weak residual of the Ito equation for the regularized modulated energy.

A short version of the acceptance study (fewer realizations); the residual
rate should shrink roughly in proportion to the step.
"""

from vortexmf import harness as H

rep = H.ito_residual_check(N=32, R=400, progress=print)
print("drift terms at t = 0:")
for k, v in rep.drift.items():
    print(f"  {k:10s} {v:+.4e}")
print(f"observed order {rep.order:.2f}, rate residual order {rep.rate_order:.2f}")
