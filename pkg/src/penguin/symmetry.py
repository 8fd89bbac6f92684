"""Group actions on graphs and measurements of partial equivariance.

A "graph function" here is any callable taking a :class:`GraphState` and
returning either a GraphState (coordinates transform, features stay fixed)
or a pair ``(coords, invariants)`` of arrays. Coordinate outputs are acted
on by the same orthogonal map (and translation) as the input; invariant
outputs are expected to stay put.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .graph import GraphState


@dataclass(frozen=True)
class GroupElement:
    """Orthogonal matrix ``Q`` with an optional translation ``t``."""

    Q: np.ndarray
    t: np.ndarray | None = None

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=np.float64))
        if Q.shape[0] != Q.shape[1]:
            raise ValueError("Q must be square")
        if np.max(np.abs(Q.T @ Q - np.eye(len(Q)))) >= 1e-10:
            raise ValueError("Q is not orthogonal")
        object.__setattr__(self, "Q", Q)
        if self.t is not None:
            object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(len(Q)))

    @property
    def dim(self) -> int:
        return self.Q.shape[0]

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.Q))

    def inverse(self) -> "GroupElement":
        Qi = self.Q.T
        return GroupElement(Qi, None if self.t is None else -Qi @ self.t)

    def act_points(self, x: np.ndarray, translate: bool = True) -> np.ndarray:
        y = np.asarray(x) @ self.Q.T
        if translate and self.t is not None:
            y = y + self.t
        return y

    @classmethod
    def identity(cls, n: int) -> "GroupElement":
        return cls(np.eye(n))

    @classmethod
    def rotation(cls, angle: float) -> "GroupElement":
        c, s = np.cos(angle), np.sin(angle)
        return cls(np.array([[c, -s], [s, c]]))

    @classmethod
    def reflection(cls, angle: float) -> "GroupElement":
        """Planar reflection across the line at ``angle / 2``."""
        c, s = np.cos(angle), np.sin(angle)
        return cls(np.array([[c, s], [s, -c]]))


def random_orthogonal(n: int, seed=None, reflections: bool = True) -> GroupElement:
    """Haar-distributed element of O(n) (or SO(n) when ``reflections=False``).

    QR of a Gaussian matrix with the sign of R's diagonal folded into Q gives
    a Haar sample of O(n); ``reflections=False`` flips one row when needed so
    the determinant is +1.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    q = q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))
    if not reflections and np.linalg.det(q) < 0:
        q[0] = -q[0]
    return GroupElement(q)


def apply_action(g: GroupElement, state: GraphState) -> GraphState:
    """``u -> Q u + t``, ``v -> Q v``; features and roles untouched."""
    if state.dim != g.dim:
        raise ValueError(f"group acts in {g.dim} dims, graph has {state.dim}")
    return GraphState(
        state.h.copy(),
        g.act_points(state.u),
        None if state.v is None else g.act_points(state.v, translate=False),
        state.node_type.copy(),
    )


def _split_outputs(out) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(out, GraphState):
        return out.u, out.h
    coords, inv = out[0], out[1]
    return np.atleast_1d(np.asarray(coords, dtype=np.float64)), np.atleast_1d(np.asarray(inv, dtype=np.float64))


def equivariance_defect(f: Callable, g: GroupElement, x: GraphState, transformed: GraphState | None = None):
    """Coordinate and invariant parts of ``f(T_g x) - L_g f(x)``."""
    gx = apply_action(g, x) if transformed is None else transformed
    c0, i0 = _split_outputs(f(x))
    c1, i1 = _split_outputs(f(gx))
    return c1 - g.act_points(c0), i1 - i0, c0, i0


def equivariance_error(f: Callable, g: GroupElement, x: GraphState) -> float:
    """Euclidean norm of ``f(T_g x) - L_g f(x)`` over all outputs."""
    dc, di, _, _ = equivariance_defect(f, g, x)
    return float(np.sqrt(np.sum(dc * dc) + np.sum(di * di)))


def relative_errors(f: Callable, g: GroupElement, x: GraphState) -> tuple[float, float]:
    """(relative coordinate error, absolute invariant error)."""
    dc, di, c0, _ = equivariance_defect(f, g, x)
    return float(np.linalg.norm(dc) / (np.linalg.norm(c0) + 1e-12)), float(np.linalg.norm(di))


@dataclass
class EquivarianceReport:
    category: str
    errors: np.ndarray
    tolerance: float
    group_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    sample_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    extras: dict = field(default_factory=dict)

    @property
    def max(self) -> float:
        return float(np.max(self.errors)) if len(self.errors) else 0.0

    @property
    def mean(self) -> float:
        return float(np.mean(self.errors)) if len(self.errors) else 0.0

    @property
    def equivariant(self) -> bool:
        return self.max < self.tolerance

    @property
    def verdict(self) -> str:
        return "equivariant" if self.equivariant else "non-equivariant"

    def summary(self) -> dict:
        return {
            "category": self.category,
            "samples": int(len(self.errors)),
            "max_error": self.max,
            "mean_error": self.mean,
            "tolerance": self.tolerance,
            "verdict": self.verdict,
            **self.extras,
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["group_index", "sample_index", "error"])
            for gi, si, e in zip(self.group_index, self.sample_index, self.errors):
                w.writerow([int(gi), int(si), repr(float(e))])


def _sweep(f, group, samples, category, tolerance, transform=None) -> EquivarianceReport:
    errs, gis, sis = [], [], []
    for gi, g in enumerate(group):
        for si, x in enumerate(samples):
            gx = transform(g, x) if transform else None
            dc, di, _, _ = equivariance_defect(f, g, x, gx)
            errs.append(float(np.sqrt(np.sum(dc * dc) + np.sum(di * di))))
            gis.append(gi)
            sis.append(si)
    return EquivarianceReport(category, np.array(errs), tolerance, np.array(gis, dtype=int), np.array(sis, dtype=int))


def approximate_equivariance_check(f, group: Sequence[GroupElement], samples, tolerance: float = 1e-8):
    """Max defect over the whole group sample; compare against an epsilon."""
    return _sweep(f, group, samples, "approx", tolerance)


def subgroup_equivariance_check(f, subgroup: Sequence[GroupElement], samples, tolerance: float = 1e-8):
    """Defect restricted to the elements of ``subgroup``."""
    return _sweep(f, subgroup, samples, "subgroup", tolerance)


def featurewise_equivariance_check(
    f, transform_mask, group: Sequence[GroupElement], samples, tolerance: float = 1e-8
) -> EquivarianceReport:
    """Act only on the coordinates of the masked nodes; other nodes stay fixed.

    ``transform_mask`` is a boolean node mask or a callable returning one for
    each sample. The output action still transforms every coordinate output.
    """

    def partial(g: GroupElement, x: GraphState) -> GraphState:
        mask = transform_mask(x) if callable(transform_mask) else np.asarray(transform_mask, dtype=bool)
        if not mask.any():
            raise ValueError("transform mask selects no nodes")
        moved = apply_action(g, x)
        u = np.where(mask[:, None], moved.u, x.u)
        v = None if x.v is None else np.where(mask[:, None], moved.v, x.v)
        return GraphState(x.h.copy(), u, v, x.node_type.copy())

    return _sweep(f, group, samples, "featurewise", tolerance, transform=partial)


def regional_equivariance_map(f, grid_states: Sequence[GraphState], group: Sequence[GroupElement]) -> np.ndarray:
    """Mean defect over ``group`` for each anchored state, i.e. epsilon(x) per cell."""
    out = np.empty(len(grid_states))
    for k, x in enumerate(grid_states):
        out[k] = np.mean([equivariance_error(f, g, x) for g in group])
    return out


def grid_points(lo: float = -1.5, hi: float = 1.5, resolution: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Row-major cell centres of a square grid: y varies slowest, x fastest."""
    axis = np.linspace(lo, hi, resolution)
    yy, xx = np.meshgrid(axis, axis, indexing="ij")
    return xx.reshape(-1), yy.reshape(-1)


def probe_graph(point, features: np.ndarray, offsets: np.ndarray | None = None, node_type=None) -> GraphState:
    """Small graph whose first node sits at ``point``; the others at fixed offsets from it."""
    point = np.asarray(point, dtype=np.float64)
    if offsets is None:
        offsets = np.array([[0.0, 0.0], [0.15, 0.05], [-0.1, 0.12]])
    features = np.atleast_2d(features)
    if len(features) == 1:
        features = np.repeat(features, len(offsets), axis=0)
    return GraphState(features, point + offsets, np.zeros_like(offsets), node_type)


def write_grid_csv(path, xs, ys, values) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "value"])
        for x, y, v in zip(xs, ys, values):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(v))])


def read_grid_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1], data[:, 2]
