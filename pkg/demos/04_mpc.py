"""Closed loop: measure angles, filter, plan five steps ahead, apply one torque.

    python demos/04_mpc.py path/to/model.json [variant]

Variants: nominal, changed-nonadaptive, changed-adaptive, track-nonadaptive,
track-adaptive. The adaptive ones re-estimate the network's last layer online.
"""
# %%
import sys

import numpy as np

from tustinmpc import config as C
from tustinmpc import experiments as X
from tustinmpc.network import load_model

model = load_model(sys.argv[1])
variant = sys.argv[2] if len(sys.argv) > 2 else "nominal"
cfg = C.load_config()

# %%
out = X.run_mpc(model, cfg, variant)
log = out.log
for k in range(0, len(log.t), 100):
    print(f"t={log.t[k]:5.2f}  x={log.states[k].round(3)}  x_hat={log.estimates[k].round(3)}  u={log.torques[k].round(2)}")

# %% the last two seconds
m = out.metrics
print("max |angle error|", np.round(m["max_angle_error"], 4), " max |velocity|", np.round(m["max_velocity"], 4))
print("mean one-step residual", f"{m['mean_residual']:.3g}", "rad")
if log.params is not None:
    drift = np.abs(log.params[-1] - log.params[0]).max()
    print("largest change of an adapted weight", f"{drift:.3g}")
# non-adaptive runs on the changed plant are expected to miss the bound
expected = "miss" if variant.endswith("-nonadaptive") else "meet"
print(f"verdict: {'PASS' if out.passed else 'FAIL'} (expected to {expected} the bound)")
