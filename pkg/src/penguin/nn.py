"""Small MLPs, the Adam optimizer and the parameter checkpoint format."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import NonFiniteError, Tensor, _record, as_tensor, parameter

HIDDEN_WIDTH = 32
HIDDEN_LAYERS = 2


class Mlp:
    """Fully connected net with two hidden layers of width 32.

    Weights use uniform fan-in initialisation, biases start at zero and the
    output layer can be shrunk with ``out_scale``. Inputs may carry any number
    of leading batch axes.
    """

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        rng: np.random.Generator,
        hidden: int = HIDDEN_WIDTH,
        activation: str = "tanh",
        out_scale: float = 1.0,
        name: str = "mlp",
    ):
        if activation not in ("tanh", "identity"):
            raise ValueError(f"unknown activation {activation!r}")
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation
        dims = [in_dim] + [hidden] * HIDDEN_LAYERS + [out_dim]
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for k, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            bound = 1.0 / np.sqrt(max(a, 1))
            w = rng.uniform(-bound, bound, size=(a, b))
            if k == len(dims) - 2:
                w = w * out_scale
            self.weights.append(parameter(w, f"{name}.W{k}"))
            self.biases.append(parameter(np.zeros(b), f"{name}.b{k}"))

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def __call__(self, x) -> Tensor:
        return mlp_forward(self, x)


def mlp_forward(net: Mlp, x) -> Tensor:
    """Affine / activation chain of ``net`` applied along the last axis of ``x``.

    The whole chain is one tape primitive with a hand-written backward pass.
    """
    x = as_tensor(x)
    if x.shape[-1] != net.in_dim:
        raise ValueError(f"{net.name}: expected input dim {net.in_dim}, got {x.shape[-1]}")
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError(f"{net.name}: non-finite input")
    params = net.parameters()
    squash = net.activation == "tanh"
    lead = x.shape[:-1]
    hidden: list[np.ndarray] = []

    def fwd(xd, *wb):
        a = xd.reshape(-1, xd.shape[-1])
        acts = [a]
        last = len(wb) // 2 - 1
        for k in range(last + 1):
            z = a @ wb[2 * k]
            z += wb[2 * k + 1]
            if k == 0 and not np.all(np.isfinite(z)):
                # later layers see bounded activations, so overflow can only start here
                raise NonFiniteError(f"{net.name}: non-finite pre-activation")
            if k < last:
                if squash:
                    np.tanh(z, out=z)
                acts.append(z)
            a = z
        return a.reshape(lead + (a.shape[-1],)), acts

    out, acts = fwd(x.data, *(p.data for p in params))
    hidden.extend(acts)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{net.name}: non-finite output")

    def vjp(g):
        g = g.reshape(-1, g.shape[-1])
        grads_wb = []
        for k in range(len(params) // 2 - 1, -1, -1):
            w = params[2 * k].data
            a = hidden[k]
            grads_wb.append(g.sum(axis=0))
            grads_wb.append(a.T @ g)
            g = g @ w.T
            if k > 0 and squash:
                g *= 1.0 - a * a
        grads_wb.reverse()
        return (g.reshape(x.shape),) + tuple(grads_wb)

    return _record(out, (x, *params), vjp, lambda *vs: fwd(*vs)[0], f"mlp:{net.name}")


# optimizer --------------------------------------------------------------------
@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads: dict, lr: float, state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params``.

    Any non-finite gradient aborts the whole step before a parameter is
    touched.
    """
    params = list(params)
    for p in params:
        g = grads.get(p)
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {p.name}; step aborted")
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for p in params:
        g = grads.get(p)
        if g is None:
            g = np.zeros_like(p.data)
        key = id(p)
        m = state.m.get(key)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[key], state.v[key] = m, v
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    """Rescale ``grads`` in place so their joint L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


# checkpoints ------------------------------------------------------------------
MAGIC = "PENGUIN-CHECKPOINT 1"


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays as a text header followed by a little-endian f64 payload.

    Layout::

        PENGUIN-CHECKPOINT 1
        meta <single-line JSON>
        tensor <name> <d0,d1,...>      (one line per tensor, payload order)
        end
        <payload: each tensor's entries, row-major, '<f8'>

    A scalar has the empty shape, written as ``-``.
    """
    lines = [MAGIC, "meta " + json.dumps(meta or {}, sort_keys=True)]
    for name, arr in tensors.items():
        if any(c.isspace() for c in name):
            raise ValueError(f"tensor name contains whitespace: {name!r}")
        arr = np.asarray(arr)
        dims = ",".join(str(d) for d in arr.shape) or "-"
        lines.append(f"tensor {name} {dims}")
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    tensors: dict[str, np.ndarray] = {}
    meta: dict = {}
    shapes: list[tuple[str, tuple[int, ...]]] = []
    pos = 0
    first = True
    while True:
        nl = raw.index(b"\n", pos)
        line = raw[pos:nl].decode("ascii")
        pos = nl + 1
        if first:
            if line != MAGIC:
                raise ValueError(f"{path}: not a checkpoint file")
            first = False
            continue
        if line == "end":
            break
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            meta = json.loads(rest)
        elif kind == "tensor":
            name, dims = rest.rsplit(" ", 1)
            shape = () if dims == "-" else tuple(int(d) for d in dims.split(","))
            shapes.append((name, shape))
        else:
            raise ValueError(f"{path}: bad header line {line!r}")
    for name, shape in shapes:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * struct.calcsize("<d")
        tensors[name] = np.frombuffer(raw[pos : pos + nbytes], dtype="<f8").reshape(shape).astype(np.float64)
        pos += nbytes
    if pos != len(raw):
        raise ValueError(f"{path}: trailing bytes after payload")
    return tensors, meta
