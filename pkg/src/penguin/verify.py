"""Self-contained numerical checks behind ``penguin verify``.

Each check returns a :class:`CheckResult` holding the worst error it saw and
the tolerance it is held to. Nothing here trains a network.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import envs as E
from .graph import GraphBatch, GraphState, random_graph
from .layers import (
    PenguinLayer,
    PenguinNetwork,
    e2gn2_layer_forward,
    gnn_layer_forward,
    gnn_layer_from_penguin,
    penguin_layer_forward,
)
from .symmetry import GroupElement, random_orthogonal
from .tensor import Tape, Tensor, backward, finite_diff_gradient
from .training import GaussianPolicy

IDENTITY_TOL = 1e-12
EQUIVARIANCE_TOL = 1e-8
GRADIENT_TOL = 1e-4
ENV_TOL = 1e-10
FD_STEP = 1e-5
# central differences at step 1e-5 carry roundoff near eps * |f| / step ~ 1e-10,
# so gradients below this floor are compared on an absolute scale
GRADIENT_FLOOR = 1e-5


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error)) and self.error < self.tolerance


def _stack_pair(dim: int, rng, features: int, hidden: int, inject: float):
    layers = [
        PenguinLayer(features, hidden, dim, rng, hidden, name="l0"),
        PenguinLayer(hidden, hidden, dim, rng, hidden, name="l1"),
    ]
    for layer in layers:
        layer.coord_perturbation = inject
    return layers


def check_theorem1(draws: int = 20, graphs: int = 20, dim: int = 2, hidden: int = 32, seed: int = 0) -> CheckResult:
    """Penguin layer at alpha = 1 against the E2GN2 update on the same weights."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(draws):
        features = int(rng.integers(1, 6))
        layer = PenguinLayer(features, hidden, dim, rng, hidden)
        for _ in range(graphs):
            g = random_graph(int(rng.integers(2, 7)), features, dim, rng)
            a = penguin_layer_forward(layer, g, 1.0)
            b = e2gn2_layer_forward(layer, g)
            worst = max(worst, float(np.max(np.abs(a.h - b.h))), float(np.max(np.abs(a.u - b.u))))
    return CheckResult(f"theorem1 alpha=1 == e2gn2 (n={dim})", worst, IDENTITY_TOL)


def check_theorem2(draws: int = 20, graphs: int = 20, dim: int = 2, hidden: int = 32, seed: int = 1) -> CheckResult:
    """Two penguin layers at alpha = 0 against the matched-weight GNN stack (h outputs)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(draws):
        features = int(rng.integers(1, 6))
        stack = _stack_pair(dim, rng, features, hidden, 0.0)
        gnns = [gnn_layer_from_penguin(layer) for layer in stack]
        for _ in range(graphs):
            g = random_graph(int(rng.integers(2, 7)), features, dim, rng)
            p = g
            for layer in stack:
                p = penguin_layer_forward(layer, p, 0.0)
            q = g
            for layer in gnns:
                q = gnn_layer_forward(layer, q, hidden)
            worst = max(worst, float(np.max(np.abs(p.h - q.h))))
    return CheckResult(f"theorem2 alpha=0 == gnn (n={dim})", worst, IDENTITY_TOL)


def equivariance_errors(
    net: PenguinNetwork, group: list[GroupElement], graphs: list[GraphState]
) -> tuple[float, float]:
    """Worst relative coordinate error and worst absolute h error of ``net.embed``."""
    base = GraphBatch.stack(graphs)
    h0, u0, _ = net.embed(base)
    coord, inv = 0.0, 0.0
    for g in group:
        moved = GraphBatch(base.h, g.act_points(base.u), g.act_points(base.v, translate=False), base.node_type)
        h1, u1, _ = net.embed(moved)
        expect = g.act_points(u0.data)
        num = np.linalg.norm(u1.data - expect, axis=(1, 2))
        den = np.linalg.norm(expect, axis=(1, 2)) + 1e-12
        coord = max(coord, float(np.max(num / den)))
        inv = max(inv, float(np.max(np.abs(h1.data - h0.data))))
    return coord, inv


def check_equivariance(
    dim: int = 2, rotations: int = 100, graphs: int = 8, inject: float = 0.0, seed: int = 2
) -> list[CheckResult]:
    """Full alpha = 1 network under random O(n) elements, reflections included."""
    net = PenguinNetwork(E.NUM_FEATURES, dim, "penguin", "fixed=1", seed=seed)
    for layer in net.layers:
        layer.coord_perturbation = inject
    rng = np.random.default_rng(seed)
    gs = [random_graph(int(n), E.NUM_FEATURES, dim, rng, velocity=True) for n in rng.integers(2, 7, graphs)]
    by_size: dict[int, list] = {}
    for g in gs:
        by_size.setdefault(g.num_nodes, []).append(g)
    group = [random_orthogonal(dim, rng) for _ in range(rotations)]
    coord, inv = 0.0, 0.0
    for same in by_size.values():
        c, i = equivariance_errors(net, group, same)
        coord, inv = max(coord, c), max(inv, i)
    return [
        CheckResult(f"O({dim}) coordinate equivariance", coord, EQUIVARIANCE_TOL),
        CheckResult(f"O({dim}) feature invariance", inv, EQUIVARIANCE_TOL),
    ]


def policy_loss_closure(seed: int = 3, nodes: int = 4, batch: int = 2):
    """A scalar loss over a learned-alpha penguin policy and value head.

    Returns ``(loss_fn, params)``; ``loss_fn()`` builds a fresh Tensor.
    """
    rng = np.random.default_rng(seed)
    net = PenguinNetwork(E.NUM_FEATURES, 2, "penguin", "learned", seed=seed)
    policy = GaussianPolicy(net)
    policy.log_std.data += rng.normal(scale=0.1, size=2)
    obs = GraphBatch.stack([random_graph(nodes, E.NUM_FEATURES, 2, rng, velocity=True) for _ in range(batch)])
    actions = rng.normal(size=(batch, 2))
    target = rng.normal(size=batch)

    def loss_fn() -> Tensor:
        out = net.forward(obs)
        log_std = policy.clamped_log_std()
        logp = policy.log_prob(actions, out.policy_mean, log_std)
        err = out.value - Tensor(target)
        return (logp * -1.0).mean() + (err * err).mean() * 0.5 + out.alpha_tensor.mean()

    return loss_fn, policy.parameters()


def relative_gradient_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRADIENT_FLOOR) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)`` entrywise, ignoring NaN (unsampled) entries."""
    mask = np.isfinite(numeric)
    a, n = analytic[mask], numeric[mask]
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check_gradients(per_tensor: int | None = 24, seed: int = 3) -> CheckResult:
    """Backward pass against central differences on every parameter tensor.

    ``per_tensor`` caps how many entries of each tensor are differenced (the
    ones with the largest analytic gradient plus a random draw); ``None``
    differences every entry.
    """
    loss_fn, params = policy_loss_closure(seed)
    with Tape() as tape:
        loss = loss_fn()
    grads = backward(loss, params, tape)
    rng = np.random.default_rng(seed)
    entries = None
    if per_tensor is not None:
        entries = {}
        for p in params:
            flat = np.abs(grads[p]).reshape(-1)
            if flat.size <= per_tensor:
                entries[p] = np.arange(flat.size)
                continue
            top = np.argsort(flat)[-per_tensor // 2 :]
            rest = rng.choice(flat.size, per_tensor - len(top), replace=False)
            entries[p] = np.unique(np.concatenate([top, rest]))
    numeric = finite_diff_gradient(lambda: loss_fn().item(), params, FD_STEP, entries)
    worst, where = 0.0, ""
    for p in params:
        err = relative_gradient_error(grads[p], numeric[p])
        if err.size and err.max() > worst:
            worst, where = float(err.max()), p.name
    return CheckResult("gradient vs central differences", worst, GRADIENT_TOL, where)


def check_env_symmetry(rotations: int = 100, seed: int = 4) -> list[CheckResult]:
    """Rotating a symmetric world commutes with ``step``; bias mode breaks it by ``|Qc - c|``."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for scenario in E.SCENARIOS:
        cfg = E.ScenarioConfig(scenario, "none", seed=seed)
        for _ in range(rotations):
            state = E.reset(cfg, rng)
            state.vel = rng.uniform(-0.5, 0.5, state.vel.shape)
            Q = random_orthogonal(2, rng).Q
            # the action box is not rotation invariant, so draw inside the unit disk
            actions = rng.uniform(-1, 1, (state.num_agents, 2))
            actions /= np.maximum(1.0, np.linalg.norm(actions, axis=1, keepdims=True))
            a = E.step(state, actions)
            b = E.step(E.rotate_world(state, Q), actions @ Q.T)
            worst = max(
                worst,
                float(np.max(np.abs(b.state.pos - a.state.pos @ Q.T))),
                float(np.max(np.abs(b.state.vel - a.state.vel @ Q.T))),
                float(np.max(np.abs(b.rewards - a.rewards))),
            )
    bias = 0.0
    cfg = E.ScenarioConfig("tag", "bias", seed=seed)
    for _ in range(rotations):
        state = E.reset(cfg, rng)
        Q = random_orthogonal(2, rng).Q
        seen = E.observe_all(E.rotate_world(state, Q)).u
        rotated = E.observe_all(state).u @ Q.T
        defect = np.linalg.norm(seen - rotated, axis=-1)
        _, _, biased = E._node_layout(state)
        expect = np.where(biased, np.linalg.norm(Q @ E.SENSOR_BIAS - E.SENSOR_BIAS), 0.0)
        bias = max(bias, float(np.max(np.abs(defect - expect[None]))))
    return [
        CheckResult("env step commutes with O(2) (none)", worst, ENV_TOL),
        CheckResult("bias defect == |Qc - c| on biased nodes", bias, ENV_TOL),
    ]


def run_suite(dims: tuple[int, ...] = (2,), inject: float = 0.0, gradient_entries: int | None = 24) -> list[CheckResult]:
    results = []
    for n in dims:
        results.append(check_theorem1(dim=n))
        results.append(check_theorem2(dim=n))
        results.extend(check_equivariance(n, inject=inject))
    results.append(check_gradients(gradient_entries))
    results.extend(check_env_symmetry())
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  {'max error':>11}  {'tolerance':>9}  result"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.error:11.3e}  {r.tolerance:9.0e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
