"""Moving between (p0, p1) and (theta, phi), and tabulating risk curves.

theta is the log relative risk (or arctanh risk difference) and phi the log
odds product. Any real pair maps to a valid pair of risks, so a regression
model on (theta, phi) can never predict probabilities outside (0, 1).
"""

import numpy as np

from relrisk import emit_curves, forward, inverse

p0, p1 = 0.2, 0.5
for measure in ("rr", "rd"):
    theta, phi = forward(p0, p1, measure)
    back = inverse(theta, phi, measure)
    print(f"{measure}: (p0, p1)=({p0}, {p1}) -> theta={float(theta):.4f}, phi={float(phi):.4f} -> {tuple(map(float, back))}")

# extreme inputs still give interior risks
print("inverse(25, -25, rr) =", tuple(float(x) for x in inverse(25.0, -25.0, "rr")))

# one curve per relative risk, sweeping the nuisance: treated vs control risk
curves = emit_curves("rr", np.log([0.5, 1.0, 2.0]), np.linspace(-6, 6, 7))
print(curves.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
