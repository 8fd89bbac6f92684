"""PEnGUiN message passing and the EGNN / E2GN2 / GNN baselines.

All layer code works on batched tensors shaped ``(B, N, ...)`` over complete
graphs; the public ``*_layer_forward`` functions also accept a single
:class:`GraphState` and hand one back.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import SELF, GraphBatch, GraphState, complete_edges
from .nn import HIDDEN_WIDTH, Mlp, load_checkpoint, save_checkpoint
from .tensor import Tensor, as_tensor, concat, sigmoid, take, take_rows

ARCHITECTURES = ("penguin", "egnn", "e2gn2", "gnn")


class PenguinLayer:
    """Weights of one message-passing layer.

    ``kind`` picks which MLPs exist: ``"penguin"`` builds all of them,
    ``"e2gn2"`` and ``"egnn"`` omit the non-equivariant message MLP and the
    ``u^p`` half of the feature update. ``velocity=True`` adds the gate used
    on the first layer.
    """

    def __init__(
        self,
        in_features: int,
        out_features: int,
        dim: int,
        rng: np.random.Generator,
        message: int = HIDDEN_WIDTH,
        kind: str = "penguin",
        velocity: bool = False,
        name: str = "layer",
    ):
        if kind not in ("penguin", "e2gn2", "egnn"):
            raise ValueError(f"unknown layer kind {kind!r}")
        self.kind = kind
        self.in_features = in_features
        self.out_features = out_features
        self.dim = dim
        self.message = message
        self.velocity = velocity
        # test hook: constant offset on the relative-position term, breaks equivariance
        self.coord_perturbation = 0.0
        self.phi_m = Mlp(2 * in_features + 1, message, rng, name=f"{name}.phi_m")
        self.phi_n = (
            Mlp(2 * in_features + 2 * dim, message, rng, name=f"{name}.phi_n") if kind == "penguin" else None
        )
        self.phi_e = Mlp(message, 1, rng, name=f"{name}.phi_e") if kind != "egnn" else None
        self.phi_u = Mlp(message, 1, rng, out_scale=0.01, name=f"{name}.phi_u")
        h_out = out_features + dim if kind == "penguin" else out_features
        self.phi_h = Mlp(in_features + message, h_out, rng, name=f"{name}.phi_h")
        self.phi_v = Mlp(message, 1, rng, name=f"{name}.phi_v") if velocity else None

    def mlps(self) -> list[Mlp]:
        return [m for m in (self.phi_m, self.phi_n, self.phi_e, self.phi_u, self.phi_h, self.phi_v) if m]

    def parameters(self):
        return [p for m in self.mlps() for p in m.parameters()]


class GnnLayer:
    """Plain message passing on node vectors ``z`` (no coordinate pathway)."""

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        rng: np.random.Generator,
        message: int = HIDDEN_WIDTH,
        name: str = "layer",
    ):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.message = message
        self.phi_n = Mlp(2 * in_dim, message, rng, name=f"{name}.phi_n")
        self.phi_h = Mlp(in_dim + message, out_dim, rng, name=f"{name}.phi_h")

    def mlps(self) -> list[Mlp]:
        return [self.phi_n, self.phi_h]

    def parameters(self):
        return [p for m in self.mlps() for p in m.parameters()]


# ----------------------------------------------------------------------------
def _node_sum(edge_values: Tensor, num_nodes: int) -> Tensor:
    b, _, d = edge_values.shape
    return edge_values.reshape(b, num_nodes, max(num_nodes - 1, 0), d).sum(axis=2)


def _edge_inputs(h: Tensor, u: Tensor):
    recv, send = complete_edges(h.shape[1])
    hi, hj = take(h, recv, axis=1), take(h, send, axis=1)
    ui, uj = take(u, recv, axis=1), take(u, send, axis=1)
    return hi, hj, ui, uj


def _equivariant_messages(layer: PenguinLayer, hi, hj, ui, uj):
    diff = ui - uj
    dist2 = (diff * diff).sum(axis=-1, keepdims=True)
    return diff, layer.phi_m(concat([hi, hj, dist2], axis=-1))


def _relative_term(layer: PenguinLayer, diff: Tensor, m_ij: Tensor, num_nodes: int) -> Tensor:
    rel = _node_sum(diff * layer.phi_u(m_ij), num_nodes)
    if layer.coord_perturbation:
        offset = np.zeros(rel.shape[-1])
        offset[0] = layer.coord_perturbation
        rel = rel + offset
    return rel


def penguin_parts(layer: PenguinLayer, h, u, v, alpha) -> dict:
    """Every intermediate of one PEnGUiN update, keyed by name.

    ``alpha`` broadcasts against ``(B, N, 1)``. Keys: ``m_sum`` and
    ``n_sum`` (the two aggregated branches), ``m`` (blended message),
    ``u_eq``, ``u_p``, ``h`` and ``u`` (layer outputs).
    """
    h, u, alpha = as_tensor(h), as_tensor(u), as_tensor(alpha)
    n = h.shape[1]
    hi, hj, ui, uj = _edge_inputs(h, u)
    diff, m_ij = _equivariant_messages(layer, hi, hj, ui, uj)
    n_ij = layer.phi_n(concat([hi, hj, ui, uj], axis=-1))
    m_sum = _node_sum(m_ij, n)
    n_sum = _node_sum(n_ij, n)
    m = alpha * m_sum + (1.0 - alpha) * n_sum
    u_eq = u * layer.phi_e(m) + _relative_term(layer, diff, m_ij, n)
    if layer.velocity and v is not None:
        u_eq = u_eq + as_tensor(v) * layer.phi_v(m)
    out = layer.phi_h(concat([h, m], axis=-1))
    h_new = out[..., : layer.out_features]
    u_p = out[..., layer.out_features :]
    u_new = alpha * u_eq + (1.0 - alpha) * u_p
    return {"m_sum": m_sum, "n_sum": n_sum, "m": m, "u_eq": u_eq, "u_p": u_p, "h": h_new, "u": u_new}


def penguin_update(layer: PenguinLayer, h, u, v, alpha) -> tuple[Tensor, Tensor]:
    parts = penguin_parts(layer, h, u, v, alpha)
    return parts["h"], parts["u"]


def e2gn2_update(layer: PenguinLayer, h, u, v=None) -> tuple[Tensor, Tensor]:
    h, u = as_tensor(h), as_tensor(u)
    n = h.shape[1]
    hi, hj, ui, uj = _edge_inputs(h, u)
    diff, m_ij = _equivariant_messages(layer, hi, hj, ui, uj)
    m = _node_sum(m_ij, n)
    u_new = u * layer.phi_e(m) + _relative_term(layer, diff, m_ij, n)
    if layer.velocity and v is not None:
        u_new = u_new + as_tensor(v) * layer.phi_v(m)
    h_new = layer.phi_h(concat([h, m], axis=-1))[..., : layer.out_features]
    return h_new, u_new


def egnn_update(layer: PenguinLayer, h, u, v=None) -> tuple[Tensor, Tensor]:
    h, u = as_tensor(h), as_tensor(u)
    n = h.shape[1]
    hi, hj, ui, uj = _edge_inputs(h, u)
    diff, m_ij = _equivariant_messages(layer, hi, hj, ui, uj)
    m = _node_sum(m_ij, n)
    u_new = u + _relative_term(layer, diff, m_ij, n)
    if layer.velocity and v is not None:
        u_new = u_new + as_tensor(v) * layer.phi_v(m)
    h_new = layer.phi_h(concat([h, m], axis=-1))[..., : layer.out_features]
    return h_new, u_new


def gnn_update(layer: GnnLayer, z) -> Tensor:
    z = as_tensor(z)
    n = z.shape[1]
    recv, send = complete_edges(n)
    n_ij = layer.phi_n(concat([take(z, recv, axis=1), take(z, send, axis=1)], axis=-1))
    return layer.phi_h(concat([z, _node_sum(n_ij, n)], axis=-1))


# single-graph / batch wrappers --------------------------------------------------
def _batched(g):
    if isinstance(g, GraphState):
        return g.h[None], g.u[None], None if g.v is None else g.v[None], True
    return g.h, g.u, g.v, False


def _wrap(g, h: Tensor, u: Tensor):
    if isinstance(g, GraphState):
        return GraphState(h.data[0], u.data[0], None, g.node_type.copy())
    return GraphBatch(h.data, u.data, None, g.node_type.copy())


def _alpha_array(alpha, g) -> np.ndarray:
    a = np.asarray(alpha, dtype=np.float64)
    if isinstance(g, GraphState):
        a = np.broadcast_to(a, (g.num_nodes,))[None]
    else:
        a = np.broadcast_to(a, g.h.shape[:2])
    return a[..., None]


def penguin_layer_forward(layer: PenguinLayer, g, alpha):
    """Apply one PEnGUiN layer with per-node symmetry scores ``alpha``."""
    h, u, v, _ = _batched(g)
    h2, u2 = penguin_update(layer, h, u, v, _alpha_array(alpha, g))
    return _wrap(g, h2, u2)


def e2gn2_layer_forward(layer: PenguinLayer, g):
    h, u, v, _ = _batched(g)
    return _wrap(g, *e2gn2_update(layer, h, u, v))


def egnn_layer_forward(layer: PenguinLayer, g):
    h, u, v, _ = _batched(g)
    return _wrap(g, *egnn_update(layer, h, u, v))


def gnn_layer_forward(layer: GnnLayer, g, out_features: int | None = None):
    """GNN update on the concatenated node vector ``(h_i, u_i)``.

    The output vector is split back into ``h`` (first ``out_features``
    entries) and ``u`` (the rest); by default ``out_features`` keeps the
    coordinate width unchanged.
    """
    h, u, _, _ = _batched(g)
    z = gnn_update(layer, concat([as_tensor(h), as_tensor(u)], axis=-1))
    split = layer.out_dim - u.shape[-1] if out_features is None else out_features
    return _wrap(g, z[..., :split], z[..., split:])


def gnn_layer_from_penguin(layer: PenguinLayer) -> GnnLayer:
    """A GnnLayer whose output equals ``layer`` at alpha = 0.

    The node vector is ``z = (h, u)``. The message MLP is the non-equivariant
    message MLP with its first-layer rows reordered from ``(h_i, h_j, u_i,
    u_j)`` to ``(h_i, u_i, h_j, u_j)``; the update MLP gets zero rows for the
    coordinate part of ``z``.
    """
    if layer.kind != "penguin":
        raise ValueError("only a penguin layer carries the non-equivariant branch")
    f, n, m = layer.in_features, layer.dim, layer.message
    g = GnnLayer.__new__(GnnLayer)
    g.in_dim, g.out_dim, g.message = f + n, layer.out_features + n, m
    g.phi_n = _clone_mlp(layer.phi_n, "gnn.phi_n")
    w0 = layer.phi_n.weights[0].data
    hi, hj, ui, uj = w0[:f], w0[f : 2 * f], w0[2 * f : 2 * f + n], w0[2 * f + n :]
    g.phi_n.weights[0].data = np.concatenate([hi, ui, hj, uj])
    g.phi_h = _clone_mlp(layer.phi_h, "gnn.phi_h")
    w0 = layer.phi_h.weights[0].data
    g.phi_h.weights[0].data = np.concatenate([w0[:f], np.zeros((n, w0.shape[1])), w0[f:]])
    g.phi_h.in_dim = f + n + m
    g.phi_n.in_dim = 2 * (f + n)
    return g


def _clone_mlp(net: Mlp, name: str) -> Mlp:
    c = Mlp.__new__(Mlp)
    c.name, c.in_dim, c.out_dim, c.activation = name, net.in_dim, net.out_dim, net.activation
    c.weights = [type(w)(w.data.copy(), requires_grad=True, name=w.name) for w in net.weights]
    c.biases = [type(b)(b.data.copy(), requires_grad=True, name=b.name) for b in net.biases]
    return c


# symmetry score ---------------------------------------------------------------
class EquivarianceEstimator:
    """Per-node symmetry score from layer-0 features and coordinates."""

    def __init__(self, in_features: int, dim: int, rng: np.random.Generator, name: str = "estimator"):
        self.phi_alpha = Mlp(in_features + dim, 1, rng, name=f"{name}.phi_alpha")

    def parameters(self):
        return self.phi_alpha.parameters()

    def __call__(self, h, u) -> Tensor:
        return sigmoid(self.phi_alpha(concat([as_tensor(h), as_tensor(u)], axis=-1)))


def estimate_alpha(ee: EquivarianceEstimator, g) -> np.ndarray:
    """Symmetry score in (0, 1) for every node of ``g``."""
    return ee(g.h, g.u).data[..., 0]


def hand_designed_alpha(g) -> np.ndarray:
    """0 where both coordinates are strictly positive, 1 elsewhere."""
    u = g.u if hasattr(g, "u") else np.asarray(g)
    if u.shape[-1] != 2:
        raise ValueError("hand-designed alpha is defined for planar coordinates")
    return np.where((u[..., 0] > 0) & (u[..., 1] > 0), 0.0, 1.0)


def parse_alpha_mode(mode) -> str | float:
    """``"learned"``, ``"hand"``, ``"fixed=<v>"`` or a number -> normalised mode."""
    if isinstance(mode, (int, float)):
        return float(mode)
    if mode in ("learned", "hand"):
        return mode
    if isinstance(mode, str) and mode.startswith("fixed="):
        return float(mode.split("=", 1)[1])
    raise ValueError(f"bad alpha mode {mode!r}")


def format_alpha_mode(mode) -> str:
    return f"fixed={mode:g}" if isinstance(mode, float) else mode


# networks ---------------------------------------------------------------------
@dataclass
class NetworkOutput:
    policy_mean: Tensor  # (B, n)
    value: Tensor  # (B,)
    alpha: np.ndarray | None  # (B, N)
    alpha_tensor: Tensor | None = None


class PenguinNetwork:
    """Stack of graph layers with policy-mean and value heads.

    ``arch`` is one of ``penguin``, ``egnn``, ``e2gn2``, ``gnn``. Only the
    penguin architecture uses ``alpha_mode`` (``"learned"``, ``"hand"`` or a
    fixed float); one score per node is shared by every layer.
    """

    def __init__(
        self,
        in_features: int,
        dim: int = 2,
        arch: str = "penguin",
        alpha_mode="learned",
        hidden: int = HIDDEN_WIDTH,
        message: int = HIDDEN_WIDTH,
        num_layers: int = 2,
        velocity: bool = True,
        seed: int = 0,
    ):
        if arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {arch!r}")
        rng = np.random.default_rng(seed)
        self.arch = arch
        self.alpha_mode = parse_alpha_mode(alpha_mode)
        self.in_features, self.dim = in_features, dim
        self.hidden, self.message, self.num_layers = hidden, message, num_layers
        self.velocity = velocity
        self.seed = seed
        self.layers: list = []
        if arch == "gnn":
            d_in = in_features + dim + (dim if velocity else 0)
            for l in range(num_layers):
                self.layers.append(GnnLayer(d_in, hidden + dim, rng, message, name=f"layers.{l}"))
                d_in = hidden + dim
        else:
            f = in_features
            for l in range(num_layers):
                self.layers.append(
                    PenguinLayer(f, hidden, dim, rng, message, kind=arch, velocity=velocity and l == 0, name=f"layers.{l}")
                )
                f = hidden
        self.estimator = (
            EquivarianceEstimator(in_features, dim, rng)
            if arch == "penguin" and self.alpha_mode == "learned"
            else None
        )
        self.value_head = Mlp(hidden, 1, rng, name="value_head")

    # parameters -----------------------------------------------------------
    def parameters(self):
        ps = [p for layer in self.layers for p in layer.parameters()]
        if self.estimator is not None:
            ps += self.estimator.parameters()
        return ps + self.value_head.parameters()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in state:
                raise KeyError(f"missing parameter {p.name}")
            if state[p.name].shape != p.shape:
                raise ValueError(f"shape mismatch for {p.name}")
            p.data = np.array(state[p.name], dtype=np.float64)

    def descriptor(self) -> dict:
        return {
            "arch": self.arch,
            "alpha_mode": format_alpha_mode(self.alpha_mode),
            "in_features": self.in_features,
            "dim": self.dim,
            "hidden": self.hidden,
            "message": self.message,
            "num_layers": self.num_layers,
            "velocity": self.velocity,
            "seed": self.seed,
        }

    @classmethod
    def from_descriptor(cls, desc: dict) -> "PenguinNetwork":
        return cls(
            desc["in_features"],
            desc["dim"],
            desc["arch"],
            desc["alpha_mode"],
            desc["hidden"],
            desc["message"],
            desc["num_layers"],
            desc["velocity"],
            desc.get("seed", 0),
        )

    # forward ----------------------------------------------------------------
    def alpha(self, h0, u0) -> Tensor | np.ndarray | None:
        """Per-node scores shaped ``(B, N, 1)``; None for the baselines."""
        if self.arch != "penguin":
            return None
        mode = self.alpha_mode
        if mode == "learned":
            return self.estimator(h0, u0)
        u = u0.data if isinstance(u0, Tensor) else np.asarray(u0)
        if mode == "hand":
            return hand_designed_alpha(u)[..., None]
        return np.full(u.shape[:-1] + (1,), mode)

    def embed(self, batch: GraphBatch) -> tuple[Tensor, Tensor, Tensor | np.ndarray | None]:
        """Final-layer ``(h, u)`` for every node, plus the alpha used."""
        h, u, v = Tensor(batch.h), Tensor(batch.u), batch.v
        if not self.velocity:
            v = None
        alpha = self.alpha(h, u)
        if self.arch == "gnn":
            parts = [h, u] + ([Tensor(v)] if v is not None else [])
            z = concat(parts, axis=-1)
            for layer in self.layers:
                z = gnn_update(layer, z)
            return z[..., : self.hidden], z[..., self.hidden :], None
        update = {"egnn": egnn_update, "e2gn2": e2gn2_update}.get(self.arch)
        for l, layer in enumerate(self.layers):
            vl = v if l == 0 else None
            if update is None:
                h, u = penguin_update(layer, h, u, vl, alpha)
            else:
                h, u = update(layer, h, u, vl)
        return h, u, alpha

    def forward(self, batch: GraphBatch) -> NetworkOutput:
        h, u, alpha = self.embed(batch)
        idx = batch.self_index
        mean = take_rows(u, idx)
        value = self.value_head(take_rows(h, idx))[..., 0]
        if alpha is None:
            a, at = None, None
        elif isinstance(alpha, Tensor):
            a, at = alpha.data[..., 0], alpha
        else:
            a, at = alpha[..., 0], None
        return NetworkOutput(mean, value, a, at)

    __call__ = forward


def alpha_stats(alpha: np.ndarray | None) -> tuple[float, float, float]:
    if alpha is None or np.size(alpha) == 0:
        return (float("nan"),) * 3
    lo = float(np.min(alpha))
    # mean taken about the minimum so a constant score reports exactly itself
    return lo, lo + float(np.mean(alpha - lo)), float(np.max(alpha))


def network_forward(net: PenguinNetwork, g: GraphState):
    """Policy mean and value for the self node of a single graph.

    Returns ``(policy_mean, value, (alpha_min, alpha_mean, alpha_max))``.
    """
    if not isinstance(g, GraphState):
        raise TypeError("network_forward takes a single GraphState")
    g.self_index  # validates the self flag
    out = net.forward(GraphBatch.stack([g]))
    return out.policy_mean.data[0].copy(), float(out.value.data[0]), alpha_stats(out.alpha)


# persistence ------------------------------------------------------------------
def save_networks(path, networks: dict[str, PenguinNetwork], meta: dict | None = None, tensors: dict | None = None) -> None:
    """Store several networks (e.g. policy and value) plus their descriptors.

    Extra top-level ``tensors`` (names without ``/``) ride along.
    """
    out = {k: np.asarray(v) for k, v in (tensors or {}).items()}
    header = {"networks": {}, **(meta or {})}
    for key, net in networks.items():
        header["networks"][key] = net.descriptor()
        for name, arr in net.state_dict().items():
            out[f"{key}/{name}"] = arr
    save_checkpoint(path, out, header)


def load_networks(path) -> tuple[dict[str, PenguinNetwork], dict, dict[str, np.ndarray]]:
    """Inverse of :func:`save_networks`; also returns metadata and extra tensors."""
    tensors, meta = load_checkpoint(path)
    nets = {}
    for key, desc in meta.get("networks", {}).items():
        net = PenguinNetwork.from_descriptor(desc)
        prefix = key + "/"
        net.load_state_dict({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
        nets[key] = net
    extra = {k: v for k, v in tensors.items() if "/" not in k}
    return nets, meta, extra
