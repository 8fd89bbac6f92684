"""Command line entry point: ``penguin {verify,train,heatmap,measure}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import envs as E
from . import symmetry as S
from .graph import SELF, TEAMMATE, GraphBatch, GraphState
from .layers import ARCHITECTURES, PenguinNetwork, format_alpha_mode, parse_alpha_mode
from .tensor import Tensor
from .training import PpoConfig, aggregate_curves, load_agent, read_curve, train
from .verify import EQUIVARIANCE_TOL, format_table, run_suite

OUT_ENV = "PENGUIN_OUT"
DEFAULT_OUT = "runs"
ROLE_BY_NAME = {"self": SELF, "teammate": TEAMMATE, "adversary": 2, "landmark": 3, "decoy": 4}

log = logging.getLogger("penguin")


@dataclass
class ExperimentSpec:
    scenario: str = "spread"
    asymmetry: str = "none"
    architecture: str = "penguin"
    alpha_mode: str = "learned"
    seeds: tuple[int, ...] = (0,)
    budget: int = 100_000
    output_dir: str = ""

    @property
    def architectures(self) -> list[str]:
        return list(ARCHITECTURES) if self.architecture == "all" else [self.architecture]


def output_root() -> Path:
    return Path(os.environ.get(OUT_ENV, DEFAULT_OUT))


def run_dir(name: str, out: str | None) -> Path:
    """``--out`` as given, else a fresh timestamped directory under the output root."""
    if out:
        path = Path(out)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        path = output_root() / f"{stamp}-{name}"
        k = 1
        while path.exists():
            path = output_root() / f"{stamp}-{name}-{k}"
            k += 1
    path.mkdir(parents=True, exist_ok=True)
    return path


def parse_seeds(text) -> tuple[int, ...]:
    """``"3"`` means seeds 0, 1, 2; ``"4,7"`` lists them."""
    text = str(text).strip()
    if "," in text:
        return tuple(int(s) for s in text.split(",") if s.strip())
    n = int(text)
    if n < 1:
        raise ValueError("need at least one seed")
    return tuple(range(n))


# verify -----------------------------------------------------------------------
def cmd_verify(args) -> int:
    inject = 1e-3 if args.inject_bug else 0.0
    results = run_suite(tuple(args.dims), inject=inject, gradient_entries=None if args.full_gradient else 24)
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


# train ------------------------------------------------------------------------
def spec_from_args(args) -> ExperimentSpec:
    """Defaults, then ``--config`` values, then explicit flags."""
    spec = ExperimentSpec()
    if args.config:
        kv = E.parse_key_values(Path(args.config).read_text())
        keys = {"scenario": "scenario", "asymmetry": "asymmetry", "asym": "asymmetry", "arch": "architecture",
                "architecture": "architecture", "alpha_mode": "alpha_mode", "seeds": "seeds", "budget": "budget",
                "out": "output_dir"}
        for k, v in kv.items():
            if k not in keys:
                raise ValueError(f"unknown config key {k!r}")
            setattr(spec, keys[k], v)
    for flag, attr in (("scenario", "scenario"), ("asym", "asymmetry"), ("arch", "architecture"),
                       ("alpha_mode", "alpha_mode"), ("seeds", "seeds"), ("budget", "budget"), ("out", "output_dir")):
        val = getattr(args, flag)
        if val is not None:
            setattr(spec, attr, val)
    spec.seeds = parse_seeds(spec.seeds) if not isinstance(spec.seeds, tuple) else spec.seeds
    spec.budget = int(spec.budget)
    spec.alpha_mode = format_alpha_mode(parse_alpha_mode(spec.alpha_mode))
    if spec.architecture not in ARCHITECTURES + ("all",):
        raise ValueError(f"unknown architecture {spec.architecture!r}")
    E.ScenarioConfig(spec.scenario, spec.asymmetry)  # validates
    return spec


def run_label(arch: str, alpha_mode: str) -> str:
    if arch != "penguin" or alpha_mode == "learned":
        return arch
    return f"{arch}-{alpha_mode.replace('=', '')}"


def write_aggregate(path: Path, curves: list[list[dict]]) -> None:
    cols = ["mean_reward", "alpha_min", "alpha_mean", "alpha_max"]
    agg = {c: aggregate_curves(curves, c) for c in cols}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "env_steps", "seeds"] + [f"{c}_{s}" for c in cols for s in ("mean", "stderr")])
        for i, base in enumerate(agg["mean_reward"]):
            row = [base["iteration"], base["env_steps"], base["seeds"]]
            for c in cols:
                row += [repr(float(agg[c][i]["mean"])), repr(float(agg[c][i]["stderr"]))]
            w.writerow(row)


def read_aggregate(path) -> dict[str, np.ndarray]:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in (rows[0].keys() if rows else [])}


def plot_curves(path: Path, curves: dict[str, dict[str, np.ndarray]], title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for label, c in curves.items():
        if not len(c.get("env_steps", [])):
            continue
        ax.plot(c["env_steps"], c["mean_reward_mean"], label=label)
        ax.fill_between(c["env_steps"], c["mean_reward_mean"] - c["mean_reward_stderr"],
                        c["mean_reward_mean"] + c["mean_reward_stderr"], alpha=0.25)
    ax.set_xlabel("env steps")
    ax.set_ylabel("mean episode reward")
    ax.set_title(title)
    if ax.lines:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_train(args) -> int:
    spec = spec_from_args(args)
    out = run_dir(f"{spec.scenario}-{spec.asymmetry}", spec.output_dir or None)
    spec.output_dir = str(out)
    (out / "experiment.json").write_text(json.dumps(asdict(spec), indent=2) + "\n")
    scenario = E.ScenarioConfig(spec.scenario, spec.asymmetry)
    E.write_scenario_config(out / "scenario.cfg", scenario)
    cfg = PpoConfig(total_steps=spec.budget)
    plots = {}
    for arch in spec.architectures:
        label = run_label(arch, spec.alpha_mode)
        curves = []
        for seed in spec.seeds:
            run = out / label / f"seed_{seed}"
            result = train(scenario, arch, spec.alpha_mode, cfg, seed, run)
            curves.append(result.rows)
            last = result.rows[-1]["mean_reward"] if result.rows else float("nan")
            print(f"{label} seed {seed}: {len(result.rows)} iterations, final mean reward {last:.3f}")
        write_aggregate(out / f"aggregate_{label}.csv", curves)
        plots[label] = read_aggregate(out / f"aggregate_{label}.csv")
    plot_curves(out / "curves.png", plots, f"{spec.scenario} / {spec.asymmetry}")
    print(f"wrote {out}")
    return 0


# heatmap ----------------------------------------------------------------------
def probe_features() -> np.ndarray:
    """Layer-0 features of an agent's own node at rest."""
    h = np.zeros(E.NUM_FEATURES)
    h[0] = 1.0
    return h


def alpha_grid(net: PenguinNetwork, lo: float = -1.5, hi: float = 1.5, resolution: int = 50):
    """Symmetry score of the probe node at every grid position."""
    if net.arch != "penguin":
        raise ValueError(f"a {net.arch} network has no symmetry score")
    xs, ys = S.grid_points(lo, hi, resolution)
    u = np.stack([xs, ys], axis=1)[:, None]
    h = np.broadcast_to(probe_features(), (len(xs), 1, E.NUM_FEATURES))
    a = net.alpha(h, u)
    a = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    return xs, ys, a.reshape(-1)


def quadrant_split(xs, ys, values) -> tuple[float, float]:
    """Mean over cells with both coordinates > 0, and over the rest."""
    q = (xs > 0) & (ys > 0)
    return float(np.mean(values[q])), float(np.mean(values[~q]))


def plot_grid(path: Path, xs, ys, values, resolution: int, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4.2))
    img = ax.imshow(values.reshape(resolution, resolution), origin="lower",
                    extent=(xs.min(), xs.max(), ys.min(), ys.max()), vmin=0.0, vmax=1.0, cmap="viridis")
    fig.colorbar(img, ax=ax, label="alpha")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_heatmap(args) -> int:
    policy, _, _ = load_agent(args.checkpoint)
    try:
        xs, ys, vals = alpha_grid(policy.net, args.lo, args.hi, args.resolution)
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    out = run_dir("heatmap", args.out)
    S.write_grid_csv(out / "alpha_grid.csv", xs, ys, vals)
    plot_grid(out / "alpha_grid.png", xs, ys, vals, args.resolution, Path(args.checkpoint).name)
    inside, outside = quadrant_split(xs, ys, vals)
    print(f"mean alpha: positive quadrant {inside:.4f}, elsewhere {outside:.4f}")
    print(f"wrote {out}")
    return 0


# measure ----------------------------------------------------------------------
def graph_function(policy_net: PenguinNetwork, value_net: PenguinNetwork):
    """Policy mean (rotates with the input) and value (should not move)."""

    def f(g: GraphState):
        batch = GraphBatch.stack([g])
        return policy_net.forward(batch).policy_mean.data, value_net.forward(batch).value.data

    return f


def sample_states(scenario: E.ScenarioConfig, count: int, seed: int) -> list[GraphState]:
    """Observation graphs from random resets, one per sample, agent 0's view."""
    rng = np.random.default_rng(seed)
    states = []
    for _ in range(count):
        world = E.reset(scenario, rng)
        world.vel = rng.uniform(-0.5, 0.5, world.vel.shape)
        states.append(E.observe(world, 0))
    return states


def subgroup_elements(name: str, count: int, rng) -> list[S.GroupElement]:
    if name == "swap":
        # reflection across y = x, which maps the positive quadrant onto itself
        swap = S.GroupElement(np.array([[0.0, 1.0], [1.0, 0.0]]))
        return [swap if k % 2 else S.GroupElement.identity(2) for k in range(count)]
    if name == "so2":
        return [S.random_orthogonal(2, rng, reflections=False) for _ in range(count)]
    raise ValueError(f"unknown subgroup {name!r}")


def measure(policy_net, value_net, category: str, scenario: E.ScenarioConfig, groups: int = 100,
            states: int = 50, seed: int = 0, subgroup: str = "swap", mask_roles=("self", "teammate")):
    f = graph_function(policy_net, value_net)
    xs = sample_states(scenario, states, seed)
    rng = np.random.default_rng(seed + 1)
    if category == "subgroup":
        return S.subgroup_equivariance_check(f, subgroup_elements(subgroup, groups, rng), xs, EQUIVARIANCE_TOL)
    group = [S.random_orthogonal(2, rng) for _ in range(groups)]
    if category == "approx":
        return S.approximate_equivariance_check(f, group, xs, EQUIVARIANCE_TOL)
    if category == "featurewise":
        roles = [ROLE_BY_NAME[r] for r in mask_roles]
        return S.featurewise_equivariance_check(f, lambda g: np.isin(g.node_type, roles), group, xs, EQUIVARIANCE_TOL)
    if category == "regional":
        eps = S.regional_equivariance_map(f, xs, group)
        selfpos = np.array([x.u[x.self_index] for x in xs])
        inside = (selfpos[:, 0] > 0) & (selfpos[:, 1] > 0)
        extras = {
            "region_states": int(inside.sum()),
            "region_mean_error": float(eps[inside].mean()) if inside.any() else float("nan"),
            "complement_mean_error": float(eps[~inside].mean()) if (~inside).any() else float("nan"),
        }
        return S.EquivarianceReport("regional", eps, EQUIVARIANCE_TOL, np.zeros(len(eps), dtype=int),
                                    np.arange(len(eps)), extras)
    raise ValueError(f"unknown category {category!r}")


def cmd_measure(args) -> int:
    if args.checkpoint:
        policy, value_net, meta = load_agent(args.checkpoint)
        policy_net = policy.net
        sc = meta.get("scenario", {})
        scenario = E.ScenarioConfig(**sc) if sc else E.ScenarioConfig()
    else:
        policy_net = PenguinNetwork(E.NUM_FEATURES, 2, args.arch, args.alpha_mode, seed=args.seed)
        value_net = PenguinNetwork(E.NUM_FEATURES, 2, args.arch, args.alpha_mode, seed=args.seed + 10_000)
        scenario = E.ScenarioConfig(args.scenario, args.asym)
    report = measure(policy_net, value_net, args.category, scenario, args.groups, args.states, args.seed,
                     args.subgroup, tuple(args.mask_roles.split(",")))
    out = run_dir(f"measure-{args.category}", args.out)
    report.write_csv(out / "errors.csv")
    summary = report.summary()
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["key", "value"])
        for k, v in summary.items():
            w.writerow([k, v])
    for k, v in summary.items():
        print(f"{k}: {v}")
    print(f"wrote {out}")
    return 0


# ------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="penguin", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log every training iteration")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", help="theorem, equivariance, gradient and environment checks")
    v.add_argument("--dims", type=int, nargs="+", default=[2], help="coordinate dimensions to test")
    v.add_argument("--inject-bug", action="store_true", help="perturb the coordinate update by 1e-3")
    v.add_argument("--full-gradient", action="store_true", help="difference every parameter entry")
    v.set_defaults(func=cmd_verify)

    t = sub.add_parser("train", help="PPO runs, one per seed and architecture")
    t.add_argument("--scenario", choices=E.SCENARIOS)
    t.add_argument("--asym", choices=E.ASYMMETRIES)
    t.add_argument("--arch", choices=ARCHITECTURES + ("all",))
    t.add_argument("--alpha-mode", help="learned, hand or fixed=<v>")
    t.add_argument("--seeds", help="seed count, or a comma separated list")
    t.add_argument("--budget", type=int, help="agent steps per run")
    t.add_argument("--out", help="output directory (default: timestamped under $PENGUIN_OUT)")
    t.add_argument("--config", help="key = value file with any of the options above")
    t.set_defaults(func=cmd_train)

    h = sub.add_parser("heatmap", help="symmetry score over a grid of agent positions")
    h.add_argument("checkpoint")
    h.add_argument("--resolution", type=int, default=50)
    h.add_argument("--lo", type=float, default=-1.5)
    h.add_argument("--hi", type=float, default=1.5)
    h.add_argument("--out")
    h.set_defaults(func=cmd_heatmap)

    m = sub.add_parser("measure", help="partial-equivariance measurements")
    m.add_argument("checkpoint", nargs="?", help="agent checkpoint; omit to measure a freshly initialised network")
    m.add_argument("--category", choices=("approx", "subgroup", "featurewise", "regional"), required=True)
    m.add_argument("--arch", choices=ARCHITECTURES, default="penguin")
    m.add_argument("--alpha-mode", default="learned")
    m.add_argument("--scenario", choices=E.SCENARIOS, default="spread")
    m.add_argument("--asym", choices=E.ASYMMETRIES, default="none")
    m.add_argument("--groups", type=int, default=100)
    m.add_argument("--states", type=int, default=50)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--subgroup", choices=("swap", "so2"), default="swap")
    m.add_argument("--mask-roles", default="self,teammate", help="roles moved by the featurewise action")
    m.add_argument("--out")
    m.set_defaults(func=cmd_measure)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
