"""Skeleton graphs, partitioned adjacency stacks and graph augmentation."""

from __future__ import annotations

import json
import logging
import os
from collections import deque
from dataclasses import dataclass
from importlib import resources
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, UsageError

logger = logging.getLogger(__name__)

NUM_SUBSETS = 3


@dataclass(frozen=True)
class SkeletonGraph:
    """Undirected graph of ``n_nodes`` joints with a designated center node.

    Self-connections are not part of ``edges``; they enter through the
    identity partition of the adjacency stack.
    """

    n_nodes: int
    edges: Tuple[Tuple[int, int], ...]
    center: int
    node_labels: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        edges = tuple(tuple(int(v) for v in e) for e in self.edges)
        object.__setattr__(self, "edges", edges)
        if self.n_nodes < 1:
            raise ConfigError(f"graph needs at least one node, got {self.n_nodes}")
        for a, b in edges:
            if not (0 <= a < self.n_nodes and 0 <= b < self.n_nodes):
                raise ConfigError(f"edge ({a}, {b}) outside [0, {self.n_nodes})")
            if a == b:
                raise ConfigError(f"self-loop ({a}, {b}) in edge list")
        if not 0 <= self.center < self.n_nodes:
            raise ConfigError(f"center {self.center} outside [0, {self.n_nodes})")
        if self.node_labels is not None:
            labels = tuple(self.node_labels)
            if len(labels) != self.n_nodes:
                raise ConfigError(f"{len(labels)} node labels for {self.n_nodes} nodes")
            object.__setattr__(self, "node_labels", labels)

    def edge_set(self) -> set:
        return {frozenset(e) for e in self.edges}

    def is_connected(self) -> bool:
        return bool(np.all(np.isfinite(hop_distances(self))))

    def to_dict(self) -> dict:
        d = {"num_nodes": self.n_nodes, "edges": [list(e) for e in self.edges], "center": self.center}
        if self.node_labels is not None:
            d["names"] = list(self.node_labels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SkeletonGraph":
        try:
            return cls(
                n_nodes=int(d["num_nodes"]),
                edges=tuple(tuple(e) for e in d["edges"]),
                center=int(d["center"]),
                node_labels=tuple(d["names"]) if d.get("names") is not None else None,
            )
        except KeyError as exc:
            raise ConfigError(f"topology is missing key {exc}") from None


@dataclass(frozen=True)
class AttachmentSpec:
    """Where ``count`` new nodes hook into an existing graph.

    New node ``i`` connects to ``attach_to[i % len(attach_to)]``; with
    ``interconnect`` the new nodes are also pairwise connected.
    """

    count: int
    attach_to: Tuple[int, ...] = ()
    interconnect: bool = False

    def __post_init__(self):
        object.__setattr__(self, "attach_to", tuple(int(a) for a in self.attach_to))
        if self.count < 0:
            raise ConfigError(f"attachment count must be >= 0, got {self.count}")
        if self.count > 0 and len(self.attach_to) not in (1, self.count):
            raise ConfigError(
                f"attach_to must list 1 or {self.count} nodes, got {len(self.attach_to)}"
            )

    def validate(self, g: SkeletonGraph) -> None:
        for a in self.attach_to:
            if not 0 <= a < g.n_nodes:
                raise ConfigError(f"attachment index {a} outside [0, {g.n_nodes})")

    def to_dict(self) -> dict:
        return {"count": self.count, "attach_to": list(self.attach_to), "interconnect": self.interconnect}

    @classmethod
    def from_dict(cls, d: dict) -> "AttachmentSpec":
        unknown = set(d) - {"count", "attach_to", "interconnect"}
        if unknown:
            raise ConfigError(f"unknown attachment keys {sorted(unknown)}")
        return cls(int(d.get("count", 0)), tuple(d.get("attach_to", ())), bool(d.get("interconnect", False)))


@dataclass(frozen=True)
class AdjacencyStack:
    """``subsets`` has shape (K_s, N, N); entry [k, v, w] weights source v -> target w."""

    subsets: np.ndarray
    normalization: str = "symmetric"

    @property
    def num_nodes(self) -> int:
        return self.subsets.shape[-1]

    def full(self) -> np.ndarray:
        return self.subsets.sum(axis=0)


def adjacency_matrix(g: SkeletonGraph) -> np.ndarray:
    """Binary symmetric adjacency without self-loops."""
    a = np.zeros((g.n_nodes, g.n_nodes))
    for i, j in g.edges:
        a[i, j] = a[j, i] = 1.0
    return a


def hop_distances(g: SkeletonGraph) -> np.ndarray:
    """BFS hop count from the center; unreachable nodes get ``inf``."""
    dist = np.full(g.n_nodes, np.inf)
    nbrs: List[List[int]] = [[] for _ in range(g.n_nodes)]
    for i, j in g.edges:
        nbrs[i].append(j)
        nbrs[j].append(i)
    dist[g.center] = 0
    queue = deque([g.center])
    while queue:
        v = queue.popleft()
        for w in nbrs[v]:
            if dist[w] == np.inf:
                dist[w] = dist[v] + 1
                queue.append(w)
    return dist


def normalized_adjacency(g: SkeletonGraph) -> np.ndarray:
    """Symmetric normalization of the adjacency with self-loops: D^-1/2 (A + I) D^-1/2."""
    a_hat = adjacency_matrix(g) + np.eye(g.n_nodes)
    d = 1.0 / np.sqrt(a_hat.sum(axis=1))
    return a_hat * d[:, None] * d[None, :]


def build_adjacency(g: SkeletonGraph) -> AdjacencyStack:
    """Split the normalized adjacency into self / centripetal / centrifugal subsets.

    An off-diagonal entry (v, w) goes to the centripetal subset when source v
    is no farther from the center than target w (ties included), otherwise
    to the centrifugal subset.
    """
    full = normalized_adjacency(g)
    hops = hop_distances(g)
    n = g.n_nodes
    stack = np.zeros((NUM_SUBSETS, n, n))
    stack[0] = np.diag(np.diag(full))
    off = full - stack[0]
    closer = hops[:, None] <= hops[None, :]
    stack[1] = np.where(closer, off, 0.0)
    stack[2] = np.where(~closer, off, 0.0)
    return AdjacencyStack(stack)


def append_nodes(g: SkeletonGraph, spec: AttachmentSpec) -> SkeletonGraph:
    """Return a graph with ``spec.count`` new nodes appended after the existing ones.

    The caller rebuilds the adjacency stack for the enlarged graph.
    """
    spec.validate(g)
    if spec.count == 0:
        return g
    n = g.n_nodes
    new = [(n + i, spec.attach_to[i % len(spec.attach_to)]) for i in range(spec.count)]
    if spec.interconnect:
        new += [(n + i, n + j) for i in range(spec.count) for j in range(i + 1, spec.count)]
    labels = None
    if g.node_labels is not None:
        labels = g.node_labels + tuple(f"extra_{i}" for i in range(spec.count))
    out = SkeletonGraph(n + spec.count, g.edges + tuple(new), g.center, labels)
    if not out.is_connected():
        logger.warning("augmented graph with %d nodes is not connected", out.n_nodes)
    return out


def permute_nodes(g: SkeletonGraph, perm: Sequence[int]) -> SkeletonGraph:
    """Relabel node ``i`` as ``perm[i]``."""
    perm = [int(p) for p in perm]
    if sorted(perm) != list(range(g.n_nodes)):
        raise UsageError(f"{perm} is not a permutation of range({g.n_nodes})")
    labels = None
    if g.node_labels is not None:
        relabeled = [""] * g.n_nodes
        for i, name in enumerate(g.node_labels):
            relabeled[perm[i]] = name
        labels = tuple(relabeled)
    edges = tuple((perm[a], perm[b]) for a, b in g.edges)
    return SkeletonGraph(g.n_nodes, edges, perm[g.center], labels)


def permutation_matrix(perm: Sequence[int]) -> np.ndarray:
    """P with P[perm[i], i] = 1, so that (P A P^T)[perm[i], perm[j]] = A[i, j]."""
    n = len(perm)
    p = np.zeros((n, n))
    p[list(perm), list(range(n))] = 1.0
    return p


def load_topology(source) -> SkeletonGraph:
    """Load a topology from a JSON path, or a bundled name such as ``"utd_mhad"``."""
    if isinstance(source, dict):
        return SkeletonGraph.from_dict(source)
    path = os.fspath(source)
    if not os.path.exists(path):
        name = path if path.endswith(".json") else f"{path}.json"
        bundled = resources.files("graphfuse").joinpath("topologies", name)
        if not bundled.is_file():
            raise ConfigError(f"topology {source!r} not found")
        return SkeletonGraph.from_dict(json.loads(bundled.read_text()))
    with open(path) as fh:
        return SkeletonGraph.from_dict(json.load(fh))


def save_topology(g: SkeletonGraph, path) -> None:
    with open(path, "w") as fh:
        json.dump(g.to_dict(), fh, indent=2)


def chain_graph(n: int, center: int = 0) -> SkeletonGraph:
    """Path graph 0-1-...-(n-1), handy for tests and synthetic data."""
    return SkeletonGraph(n, tuple((i, i + 1) for i in range(n - 1)), center)


__all__ = [
    "AdjacencyStack",
    "AttachmentSpec",
    "NUM_SUBSETS",
    "SkeletonGraph",
    "adjacency_matrix",
    "append_nodes",
    "build_adjacency",
    "chain_graph",
    "hop_distances",
    "load_topology",
    "normalized_adjacency",
    "permutation_matrix",
    "permute_nodes",
    "save_topology",
]
