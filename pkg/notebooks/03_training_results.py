# %% [markdown]
# # Reading the acceptance runs
#
# `scripts/acceptance_runs.sh` trains every architecture on spread/none and
# tag/safety. This script loads the aggregated curves, the alpha statistics
# and the final alpha maps, and saves a summary figure next to the runs.

# %%
import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from penguin.cli import alpha_grid, quadrant_split, read_aggregate
from penguin.training import load_agent, smooth

root = Path(os.environ.get("PENGUIN_ACCEPTANCE_DIR", "runs/acceptance"))
archs = ["penguin", "egnn", "e2gn2", "gnn"]

# %% [markdown]
# Smoothed learning curves (mean over seeds, shaded standard error).

# %%
fig, axes = plt.subplots(1, 3, figsize=(15, 4))
for ax, (name, labels) in zip(axes[:2], [("spread-none", archs), ("tag-safety", archs)]):
    for label in labels:
        path = root / name / f"aggregate_{label}.csv"
        if not path.exists():
            continue
        c = read_aggregate(path)
        m, se = smooth(c["mean_reward_mean"]), smooth(c["mean_reward_stderr"])
        ax.plot(c["env_steps"], m, label=label)
        ax.fill_between(c["env_steps"], m - se, m + se, alpha=0.2)
    hand = root / "tag-safety-hand" / "aggregate_penguin-hand.csv"
    if name == "tag-safety" and hand.exists():
        c = read_aggregate(hand)
        ax.plot(c["env_steps"], smooth(c["mean_reward_mean"]), "--", label="penguin-hand")
    ax.set_title(name)
    ax.set_xlabel("agent steps")
    if ax.lines:
        ax.legend()

# %% [markdown]
# Alpha statistics of the learned score over training.

# %%
for name, style in (("spread-none", "-"), ("tag-safety", "--")):
    path = root / name / "aggregate_penguin.csv"
    if path.exists():
        c = read_aggregate(path)
        for key in ("alpha_min", "alpha_mean", "alpha_max"):
            axes[2].plot(c["env_steps"], smooth(c[f"{key}_mean"]), style, label=f"{name} {key}")
axes[2].set_title("symmetry score")
if axes[2].lines:
    axes[2].legend(fontsize=7)
fig.tight_layout()
if root.exists():
    fig.savefig(root / "summary.png", dpi=110)
    print("wrote", root / "summary.png")

# %% [markdown]
# Where does the trained tag/safety policy turn equivariance down?

# %%
for seed in range(3):
    ckpt = root / "tag-safety" / "penguin" / f"seed_{seed}" / "final.ckpt"
    if ckpt.exists():
        policy, _, _ = load_agent(ckpt)
        xs, ys, vals = alpha_grid(policy.net)
        inside, outside = quadrant_split(xs, ys, vals)
        print(f"seed {seed}: mean alpha in quadrant {inside:.4f}, elsewhere {outside:.4f}")
