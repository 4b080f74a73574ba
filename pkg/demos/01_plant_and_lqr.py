"""The true plant: free fall to the hanging pose, and an LQR holding it upright."""
# %%
import numpy as np

from tustinmpc.dynamics import PendulumParams, simulate, total_energy
from tustinmpc.lqr import linearize, lqr_control, upright_lqr

p = PendulumParams()
print(p)

# %% free fall from a small tilt, 6 s at Ts = 0.01
x0 = np.array([0.3, 0.0, 0.2, 0.0])
X = simulate(x0, np.zeros((600, 2)), p)
E = total_energy(X, p)
print("final state", X[-1].round(3))
print("energy: start %.4f J, end %.4f J, monotone: %s" % (E[0], E[-1], bool(np.all(np.diff(E) <= 1e-12))))

# %% the upright equilibrium is unstable, the LQR fixes that
lin = linearize(p, np.zeros(4), np.zeros(2))
K = upright_lqr(p)
print("open-loop |eig|  ", np.sort(np.abs(np.linalg.eigvals(lin.A))).round(4))
print("closed-loop |eig|", np.sort(np.abs(np.linalg.eigvals(lin.A - lin.B @ K))).round(4))

x = np.array([0.1, 0.0, -0.1, 0.0])
for k in range(300):
    u = lqr_control(K, x, np.zeros(4), np.zeros(2), 5.0)
    x = simulate(x, u[None], p)[1]
    if k % 50 == 0:
        print(f"t={k * 0.01:4.2f}  x={x.round(4)}  u={u.round(3)}")
print("after 3 s:", x.round(6))
