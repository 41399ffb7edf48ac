"""Canonical BFS node ordering and the stepwise sequence encoding of a graph.

The ordering is purely geometric: traversal restarts at the top-left
unvisited node (minimum y, then x; y grows downward), and neighbors are
expanded clockwise relative to the incoming edge direction. Because no tie
is ever broken by node index, the emitted order is invariant under any
permutation of the storage order.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .graph import RoadGraph

UP = (0.0, -1.0)  # reference direction for component start nodes


class FrontierOverflow(ValueError):
    """An edge spans more canonical-order positions than the frontier allows."""


def _clockwise_key(d: tuple[float, float], v: np.ndarray):
    """Sort key sweeping clockwise (screen orientation, y down) from direction d."""
    ang = math.atan2(v[1], v[0]) - math.atan2(d[1], d[0])
    ang %= 2.0 * math.pi
    return (ang, math.hypot(v[0], v[1]))


def canonical_order(g: RoadGraph) -> list[int]:
    """BFS node permutation: top-left starts, clockwise neighbor expansion."""
    n = g.n_nodes
    adj = g.adjacency_lists()
    visited = [False] * n
    order: list[int] = []
    remaining = list(range(n))
    while len(order) < n:
        start = min(
            (i for i in remaining if not visited[i]),
            key=lambda i: (g.nodes[i][1], g.nodes[i][0]),
        )
        visited[start] = True
        order.append(start)
        queue: deque[tuple[int, tuple[float, float]]] = deque([(start, UP)])
        while queue:
            u, incoming = queue.popleft()
            fresh = [v for v in adj[u] if not visited[v]]
            fresh.sort(key=lambda v: _clockwise_key(incoming, g.nodes[v] - g.nodes[u]))
            for v in fresh:
                visited[v] = True
                order.append(v)
                d = g.nodes[v] - g.nodes[u]
                queue.append((v, (float(d[0]), float(d[1]))))
    return order


def canonicalize(g: RoadGraph) -> RoadGraph:
    """Relabel nodes into canonical order."""
    return g.reordered(canonical_order(g))


def max_edge_span(g: RoadGraph) -> int:
    """Largest index distance j - i over edges of a canonically ordered graph."""
    if g.n_edges == 0:
        return 0
    return int((g.edges[:, 1] - g.edges[:, 0]).max())


@dataclass
class CanonicalSequence:
    """Stepwise encoding of a canonically ordered graph.

    Row t of ``adjacency`` holds connection values to the frontier_size most
    recent predecessors (column j = the node emitted 1+j steps earlier).
    The last row is the termination step: zero adjacency, zero coords,
    stop = 1. Exact sequences hold 0/1 values; model output holds softs.
    """

    adjacency: np.ndarray  # (T, M)
    coords: np.ndarray  # (T, 2)
    stop: np.ndarray  # (T,)
    frontier_size: int

    def __post_init__(self) -> None:
        self.adjacency = np.asarray(self.adjacency, dtype=np.float64).reshape(
            -1, self.frontier_size
        )
        T = len(self.adjacency)
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(T, 2)
        self.stop = np.asarray(self.stop, dtype=np.float64).reshape(T)

    def __len__(self) -> int:
        return len(self.stop)

    def adjacency_with_stop(self) -> np.ndarray:
        """(T, M+1) array with the stop flag appended as an extra channel."""
        return np.concatenate([self.adjacency, self.stop[:, None]], axis=1)


def to_sequence(g: RoadGraph, frontier_size: int) -> CanonicalSequence:
    """Encode a canonically ordered graph as one step per node plus a stop step."""
    M = int(frontier_size)
    if M < 1:
        raise ValueError("frontier_size must be >= 1")
    span = max_edge_span(g)
    if span > M:
        raise FrontierOverflow(f"edge span {span} exceeds frontier size {M}")
    n = g.n_nodes
    adjacency = np.zeros((n + 1, M))
    coords = np.zeros((n + 1, 2))
    stop = np.zeros(n + 1)
    coords[:n] = g.nodes
    for i, j in g.edges:
        adjacency[int(j), int(j) - int(i) - 1] = 1.0
    stop[n] = 1.0
    return CanonicalSequence(adjacency, coords, stop, M)


def from_sequence(seq: CanonicalSequence, threshold: float = 0.5) -> RoadGraph:
    """Decode a (possibly soft) sequence back into a graph.

    Generation stops at the first step whose stop value exceeds the
    threshold; an edge exists iff its soft value strictly exceeds the
    threshold. Exact round trip: from_sequence(to_sequence(g, M)) == g.
    """
    over = np.nonzero(seq.stop > threshold)[0]
    n = int(over[0]) if len(over) else len(seq)
    edges = []
    for t in range(n):
        for j in np.nonzero(seq.adjacency[t] > threshold)[0]:
            src = t - 1 - int(j)
            if src >= 0:
                edges.append((src, t))
    return RoadGraph(seq.coords[:n].copy(), edges)


def write_seq(seq: CanonicalSequence, path) -> None:
    """Write the .seq text format (exact 0/1 sequences only)."""
    lines = [f"SEQ1 {len(seq)} {seq.frontier_size}"]
    for t in range(len(seq)):
        bits = "".join("1" if b > 0.5 else "0" for b in seq.adjacency[t])
        lines.append(f"{bits} {seq.coords[t, 0]:.9f} {seq.coords[t, 1]:.9f} {int(seq.stop[t] > 0.5)}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_seq(path) -> CanonicalSequence:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("SEQ1"):
        raise ValueError(f"{path}: not a SEQ1 file")
    _, T, M = lines[0].split()
    T, M = int(T), int(M)
    if len(lines) != 1 + T:
        raise ValueError(f"{path}: expected {1 + T} lines, found {len(lines)}")
    adjacency = np.zeros((T, M))
    coords = np.zeros((T, 2))
    stop = np.zeros(T)
    for t in range(T):
        bits, x, y, s = lines[1 + t].split()
        if len(bits) != M:
            raise ValueError(f"{path}: bad adjacency width at step {t}")
        adjacency[t] = [1.0 if c == "1" else 0.0 for c in bits]
        coords[t] = (float(x), float(y))
        stop[t] = float(int(s))
    return CanonicalSequence(adjacency, coords, stop, M)
