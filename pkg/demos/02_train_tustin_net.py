"""Fit a small Tustin-Net on simulated data and check its open-loop predictions.

The full-size model comes from ``python -m tustinmpc train``; here a smaller
network, fewer episodes and a short schedule keep the run to a few minutes.
"""
# %%
from dataclasses import replace

import numpy as np

from tustinmpc import config as C
from tustinmpc import experiments as X
from tustinmpc.network import init_model, rollout, step_jacobians
from tustinmpc.training import DatasetSpec, collect_dataset, train

cfg = C.load_config()
p = C.plant(cfg)

# %% a handful of falls and LQR episodes
spec = replace(C.dataset_spec(cfg), n_open_loop=8, n_closed_loop=8)
episodes = collect_dataset(p, spec)
print(len(episodes), "episodes,", episodes[0].y.shape[0], "angle samples each")

# %% train on 100-step rollouts, loss on the angles only
model = init_model(hidden=(32, 32), seed=0)
tc = replace(C.train_config(cfg), epochs=80)


def progress(epoch, train_loss, val_loss):
    if epoch % 10 == 0:
        print(f"epoch {epoch:3d}  train {train_loss:.5f}  val {val_loss:.5f}")


res = train(model, episodes, tc, callback=progress)
model = res.model
print("best epoch", res.best_epoch)

# %% free fall from a start that is not in the data
pred = X.free_fall_prediction(model, cfg)
print("end of free fall: predicted", pred.pred[-1].round(3), "true", pred.true[-1].round(3))

# %% 50-step predictions under LQR
pred = X.lqr_prediction(model, cfg)
print("max error, first 50 steps:", pred.max_error(50).round(4), "rad")

# %% the model is differentiable in closed form: local linearisation at upright
J = step_jacobians(model, np.zeros(4), np.zeros(2))
print("model |eig| at upright", np.sort(np.abs(np.linalg.eigvals(J.dstate))).round(4))
S = rollout(model, np.zeros(4), np.zeros((10, 2)))
print("10 steps from rest at upright:", S[-1].round(5))
