"""UKF against EKF on one noisy LQR episode, using a trained model.

    python demos/03_filters.py path/to/model.json
"""
# %%
import sys

import numpy as np

from tustinmpc import config as C
from tustinmpc import experiments as X
from tustinmpc.network import load_model

model = load_model(sys.argv[1])
cfg = C.load_config()

# %% same episode, same measurement noise, same initial belief
traces = X.filter_compare(model, cfg)
for row in X.filter_table(traces):
    print(f"{row[0]:<10}", *(f"{v:>12.5g}" if isinstance(v, float) else f"{v:>12}" for v in row[1:]))

# %% where the two filters differ most
ukf, ekf = traces["ukf"], traces["ekf"]
gap = np.abs(ukf.means - ekf.means).max(axis=1)
k = int(gap.argmax())
print(f"largest disagreement at t={ukf.t[k]:.2f} s:")
print("  truth", ukf.truth[k].round(4))
print("  ukf  ", ukf.means[k].round(4))
print("  ekf  ", ekf.means[k].round(4))
