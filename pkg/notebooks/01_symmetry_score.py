# %% [markdown]
# # The symmetry score as a dial between E2GN2 and a plain GNN
#
# A PEnGUiN layer blends an equivariant message with a non-equivariant one,
# per node, through a score alpha in (0, 1). This script walks the dial from
# one end to the other and measures how far the network drifts from exact
# rotation equivariance.

# %%
import numpy as np

from penguin.graph import GraphBatch, random_graph
from penguin.layers import PenguinLayer, PenguinNetwork, e2gn2_layer_forward, penguin_layer_forward
from penguin.symmetry import approximate_equivariance_check, random_orthogonal

rng = np.random.default_rng(0)

# %% [markdown]
# At alpha = 1 the layer is an E2GN2 layer on the same weights, to the last bit
# that float64 allows.

# %%
layer = PenguinLayer(3, 32, 2, rng, 32)
g = random_graph(5, 3, 2, rng)
a = penguin_layer_forward(layer, g, 1.0)
b = e2gn2_layer_forward(layer, g)
print("max |h diff|", np.abs(a.h - b.h).max(), " max |u diff|", np.abs(a.u - b.u).max())

# %% [markdown]
# Sweep a fixed alpha over the whole network and record the worst
# equivariance error over random rotations and reflections.

# %%
graphs = [random_graph(4, 5, 2, rng, velocity=True) for _ in range(10)]
group = [random_orthogonal(2, rng) for _ in range(30)]

for alpha in (1.0, 0.99, 0.9, 0.5, 0.0):
    net = PenguinNetwork(5, 2, "penguin", alpha, seed=1)

    def f(state, net=net):
        out = net.forward(GraphBatch.stack([state]))
        return out.policy_mean.data, out.value.data

    report = approximate_equivariance_check(f, group, graphs)
    print(f"alpha {alpha:4.2f}: max error {report.max:.3e}  ({report.verdict})")

# %% [markdown]
# The hand-designed score switches equivariance off inside the positive
# quadrant only. The printed map marks each cell of a coarse grid.

# %%
from penguin.cli import alpha_grid

xs, ys, vals = alpha_grid(PenguinNetwork(5, 2, "penguin", "hand", seed=0), resolution=8)
for row in vals.reshape(8, 8)[::-1]:
    print(" ".join("#" if v < 0.5 else "." for v in row))
