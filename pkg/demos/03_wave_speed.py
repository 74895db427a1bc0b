"""Measuring the undrained elastic wave speed on a 1-D bar.

With no inelastic flow, no damage and no water mobility, the linearised
system is a wave equation whose speed is sqrt((K + M_b beta^2) / rho).
For unit constants that is sqrt(2).  A small strain bump splits into two
fronts; tracking the right-going peak gives the measured speed.

Run with ``python demos/03_wave_speed.py``.
"""
import json

import numpy as np

from eulerporo import scenario as sc

n, tau, steps = 1024, 5e-4, 400
doc = {"name": "wave", "domain": {"d": 1, "n": [n], "L": [1.0]},
       "time": {"t_end": steps * tau, "tau": tau, "tau_min": tau / 16},
       "moduli": {"rho": 1.0, "k_v": 1e-6, "gamma": 1e-3},
       "material": {"K": 1.0, "M_b": 1.0, "beta": 1.0, "chi_eq": 0.0},
       "dissipation": {"sigma_y": "inf", "a_y": "inf"},
       "mobility": {"m0": 1e-12, "m1": 0.0, "m_min": 1e-12},
       "initial": {"Ee": {"preset": "gaussian-pulse", "amplitude": 1e-4, "width": 0.02,
                          "center": [0.3]}}}
cfg = sc.parse_config(json.dumps(doc))
g = cfg.grid()
res = sc.run_scenario(cfg, write=False, keep_states=True)

ahead = np.arange(n) > int(0.3 * n)
ts, xs = [], []
for st in res.states[40::40]:
    ts.append(st.t)
    xs.append((np.argmax(np.where(ahead, g.interior(st.Ee)[0], -np.inf)) + 0.5) / n)
    print(f"t={ts[-1]:.3f}  front at x={xs[-1]:.4f}")
speed = np.polyfit(ts, xs, 1)[0]
print(f"\nmeasured speed {speed:.4f}, predicted {np.sqrt(2.0):.4f}")
