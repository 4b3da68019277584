"""Derivative weights along simulated paths.

Run with ``python3 demos/01_derivative_weights.py``.  Simulates Brownian and
Ornstein-Uhlenbeck paths, builds the weight ``Z = (1, Y / (s - t))`` and
checks that a plain Monte-Carlo average of ``g(X_T) Z_T`` recovers both the
heat-equation value and its gradient.
"""

# %%
import math

import numpy as np

from sfpe import sde
from sfpe.bel import accumulate_Y, z_at, z_moment_report

# %% [markdown]
# For Brownian motion Y is just the increment W_s - W_t, so E|Z_spatial|^2
# equals d / (s - t).  The weight blows up as s approaches t.

# %%
c = sde.brownian(2)
grid = sde.TimeGrid.uniform(0.0, 1.0, 20)
paths = sde.simulate_paths(c, 0.0, np.zeros(2), grid, 20_000, base_seed=1)
rep = z_moment_report(paths, c, 0.0)
for s, ez, se in zip(rep.s[::4], rep.columns["emp_EZ2"][::4], rep.columns["se_EZ2"][::4]):
    print(f"s = {s:.2f}   E|Z|^2 = {ez:8.3f} +- {se:.3f}   exact {2 / s:8.3f}")

# %% [markdown]
# Value and gradient of u(t, x) = E[(x + W_T - W_t)^2] from one set of paths.

# %%
c1 = sde.brownian(1)
x0 = 0.7
paths = accumulate_Y(sde.simulate_paths(c1, 0.0, [x0], grid, 50_000, base_seed=2), c1)
z = z_at(paths, 0.0, 1.0)
gT = paths.X[:, -1, 0] ** 2
terms = gT[:, None] * z.z
est = terms.mean(axis=0)
se = terms.std(axis=0, ddof=1) / math.sqrt(terms.shape[0])
print(f"value    {est[0]:.4f} +- {se[0]:.4f}   exact {x0 ** 2 + 1:.4f}")
print(f"gradient {est[1]:.4f} +- {se[1]:.4f}   exact {2 * x0:.4f}")

# %% [markdown]
# For OU the Jacobian is deterministic, J_s = (1 - h)^k on the Euler grid,
# close to exp(-s).

# %%
ou = sde.ornstein_uhlenbeck(1)
paths = sde.simulate_paths(ou, 0.0, [0.5], sde.TimeGrid.uniform(0.0, 1.0, 100), 4)
print("J_1 =", paths.J[0, -1, 0, 0], " exp(-1) =", math.exp(-1))
