"""Graph containers shared by the layers, the symmetry tools and the environments."""
from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

# node roles
SELF, TEAMMATE, ADVERSARY, LANDMARK, DECOY = range(5)
ROLE_NAMES = ("agent-self", "teammate", "adversary", "landmark", "decoy")


@dataclass
class GraphState:
    """One complete graph.

    Attributes
    ----------
    h : (N, F) invariant node features
    u : (N, n) coordinate embeddings
    v : (N, n) velocities, or None
    node_type : (N,) integer roles, see ``ROLE_NAMES``
    """

    h: np.ndarray
    u: np.ndarray
    v: np.ndarray | None = None
    node_type: np.ndarray | None = None

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=np.float64)
        self.u = np.asarray(self.u, dtype=np.float64)
        if self.v is not None:
            self.v = np.asarray(self.v, dtype=np.float64)
        if self.h.ndim != 2 or self.u.ndim != 2 or self.h.shape[0] != self.u.shape[0]:
            raise ValueError(f"inconsistent node arrays: h {self.h.shape}, u {self.u.shape}")
        if self.v is not None and self.v.shape != self.u.shape:
            raise ValueError("velocity must match coordinate shape")
        if self.node_type is None:
            self.node_type = np.full(self.num_nodes, TEAMMATE, dtype=int)
        self.node_type = np.asarray(self.node_type, dtype=int)

    @property
    def num_nodes(self) -> int:
        return self.h.shape[0]

    @property
    def dim(self) -> int:
        return self.u.shape[1]

    @property
    def self_index(self) -> int:
        idx = np.flatnonzero(self.node_type == SELF)
        if len(idx) != 1:
            raise ValueError(f"expected exactly one self node, found {len(idx)}")
        return int(idx[0])

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        return complete_edges(self.num_nodes)

    def copy(self) -> "GraphState":
        return replace(
            self,
            h=self.h.copy(),
            u=self.u.copy(),
            v=None if self.v is None else self.v.copy(),
            node_type=self.node_type.copy(),
        )


@dataclass
class GraphBatch:
    """B graphs with the same node count, stacked on a leading axis."""

    h: np.ndarray  # (B, N, F)
    u: np.ndarray  # (B, N, n)
    v: np.ndarray | None
    node_type: np.ndarray  # (B, N)

    @property
    def size(self) -> int:
        return self.h.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.h.shape[1]

    @property
    def self_index(self) -> np.ndarray:
        is_self = self.node_type == SELF
        if not np.all(is_self.sum(axis=1) == 1):
            raise ValueError("every graph needs exactly one self node")
        return np.argmax(is_self, axis=1)

    def __getitem__(self, idx) -> "GraphBatch":
        return GraphBatch(
            self.h[idx], self.u[idx], None if self.v is None else self.v[idx], self.node_type[idx]
        )

    def graph(self, b: int) -> GraphState:
        return GraphState(self.h[b], self.u[b], None if self.v is None else self.v[b], self.node_type[b])

    @classmethod
    def stack(cls, graphs) -> "GraphBatch":
        graphs = list(graphs)
        has_v = graphs[0].v is not None
        return cls(
            np.stack([g.h for g in graphs]),
            np.stack([g.u for g in graphs]),
            np.stack([g.v for g in graphs]) if has_v else None,
            np.stack([g.node_type for g in graphs]),
        )


@lru_cache(maxsize=None)
def complete_edges(num_nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """Ordered pairs (i, j), i != j, grouped by receiver i.

    The N-1 senders of node i occupy positions ``i*(N-1) .. (i+1)*(N-1)-1``,
    which lets per-node sums be taken with a reshape.
    """
    recv = np.repeat(np.arange(num_nodes), max(num_nodes - 1, 0))
    send = np.array([j for i in range(num_nodes) for j in range(num_nodes) if j != i], dtype=int)
    recv.setflags(write=False)
    send.setflags(write=False)
    return recv, send


def random_graph(
    num_nodes: int,
    features: int,
    dim: int = 2,
    rng: np.random.Generator | None = None,
    velocity: bool = False,
) -> GraphState:
    """Gaussian features and coordinates; node 0 is flagged as self."""
    rng = rng or np.random.default_rng()
    node_type = np.full(num_nodes, TEAMMATE)
    node_type[0] = SELF
    return GraphState(
        h=rng.normal(size=(num_nodes, features)),
        u=rng.normal(size=(num_nodes, dim)),
        v=rng.normal(size=(num_nodes, dim)) if velocity else None,
        node_type=node_type,
    )
