# %% [markdown]
# # Three ways to break a symmetric world
#
# The particle worlds are O(2) symmetric until one of the asymmetries is
# switched on. Each one breaks the symmetry in a different place: the
# observations (bias), the reward (safety) or the identity of objects (decoy).

# %%
import numpy as np

from penguin import envs as E
from penguin.symmetry import random_orthogonal

rng = np.random.default_rng(3)
Q = random_orthogonal(2, rng).Q
print("rotation/reflection:\n", Q.round(3))

# %% [markdown]
# ## Symmetric world
# Rotating the state and the actions commutes with a step.

# %%
s = E.reset(E.ScenarioConfig("tag"), rng)
acts = rng.uniform(-0.7, 0.7, (3, 2))
a = E.step(s, acts)
b = E.step(E.rotate_world(s, Q), acts @ Q.T)
print("position defect", np.abs(b.state.pos - a.state.pos @ Q.T).max())
print("reward defect  ", np.abs(b.rewards - a.rewards).max())

# %% [markdown]
# ## Bias
# Landmarks and the evader are seen shifted by c = (0.3, 0). The observation
# defect on those nodes is exactly |Qc - c|.

# %%
s = E.reset(E.ScenarioConfig("tag", "bias"), rng)
seen = E.observe(E.rotate_world(s, Q), 0).u
expected = E.observe(s, 0).u @ Q.T
print("per-node defect", np.linalg.norm(seen - expected, axis=1).round(6))
print("|Qc - c|       ", round(float(np.linalg.norm(Q @ E.SENSOR_BIAS - E.SENSOR_BIAS)), 6))

# %% [markdown]
# ## Safety
# Agents pay a penalty inside the positive quadrant, so the reward changes
# only when a rotation carries an agent across the quadrant boundary.

# %%
s = E.reset(E.ScenarioConfig("tag", "safety"), rng)
s.pos[0] = [0.4, 0.3]
for angle in (0.0, np.pi / 8, np.pi / 2, np.pi):
    R = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    print(f"angle {angle:5.3f}: rewards {E.rewards(E.rotate_world(s, R))}")

# %% [markdown]
# ## Decoy
# The decoy shares the evader's features but pays nothing; the real evader
# sits still at (0.75, 0.75).

# %%
s = E.reset(E.ScenarioConfig("tag", "decoy"), rng)
s.pos[0] = s.pos[s.index(E.DECOY_ENTITY)[0]]
print("touching the decoy:", E.rewards(s))
s.pos[0] = [0.75, 0.75]
print("touching the evader:", E.rewards(s))
