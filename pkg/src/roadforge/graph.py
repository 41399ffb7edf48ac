"""Planar road graph container and the .rgf text format.

Coordinates live in normalized tile space [-1, +1], y growing downward so
that node positions line up with image rows. Edges are undirected index
pairs stored with i < j.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Point2 = tuple[float, float]


@dataclass(frozen=True)
class GeoSegment:
    """A road segment given by its two (longitude, latitude) endpoints in degrees."""

    lon1: float
    lat1: float
    lon2: float
    lat2: float

    def __post_init__(self) -> None:
        vals = (self.lon1, self.lat1, self.lon2, self.lat2)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"non-finite segment coordinates: {vals}")
        if (self.lon1, self.lat1) == (self.lon2, self.lat2):
            raise ValueError("degenerate segment: endpoints coincide")


class RoadGraph:
    """Embedded undirected graph: an (N, 2) coordinate array plus an (E, 2) edge index array.

    The constructor normalizes edges: each pair is stored with i < j, the
    list is sorted and deduplicated. Self-loops and out-of-range indices are
    rejected.
    """

    __slots__ = ("nodes", "edges")

    def __init__(self, nodes=(), edges=()) -> None:
        nodes = np.asarray(nodes, dtype=np.float64)
        if nodes.size == 0:
            nodes = np.zeros((0, 2))
        self.nodes = nodes.reshape(-1, 2)
        edges = np.asarray(edges, dtype=np.int64)
        if edges.size == 0:
            self.edges = np.zeros((0, 2), dtype=np.int64)
            return
        edges = np.sort(edges.reshape(-1, 2), axis=1)
        if (edges[:, 0] == edges[:, 1]).any():
            raise ValueError("self-loop edge")
        if edges.min() < 0 or edges.max() >= len(self.nodes):
            raise ValueError("edge index out of range")
        self.edges = np.unique(edges, axis=0)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n_nodes, dtype=np.int64)
        np.add.at(deg, self.edges.ravel(), 1)
        return deg

    def neighbors(self, i: int) -> list[int]:
        out = [int(j) for a, j in self.edges if a == i]
        out += [int(a) for a, j in self.edges if j == i]
        return out

    def adjacency_lists(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.n_nodes)]
        for i, j in self.edges:
            adj[int(i)].append(int(j))
            adj[int(j)].append(int(i))
        return adj

    def edge_lengths(self) -> np.ndarray:
        if self.n_edges == 0:
            return np.zeros(0)
        d = self.nodes[self.edges[:, 0]] - self.nodes[self.edges[:, 1]]
        return np.hypot(d[:, 0], d[:, 1])

    def reordered(self, order) -> "RoadGraph":
        """Relabel nodes so that new node k is old node order[k]."""
        order = np.asarray(order, dtype=np.int64)
        if sorted(order.tolist()) != list(range(self.n_nodes)):
            raise ValueError("order is not a permutation of the node indices")
        inverse = np.empty_like(order)
        inverse[order] = np.arange(self.n_nodes)
        edges = inverse[self.edges] if self.n_edges else self.edges
        return RoadGraph(self.nodes[order], edges)

    def translated(self, dx: float, dy: float) -> "RoadGraph":
        return RoadGraph(self.nodes + np.array([dx, dy]), self.edges)

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(i), int(j)) for i, j in self.edges}

    def __eq__(self, other) -> bool:
        if not isinstance(other, RoadGraph):
            return NotImplemented
        return (
            self.nodes.shape == other.nodes.shape
            and np.array_equal(self.nodes, other.nodes)
            and np.array_equal(self.edges, other.edges)
        )

    def __repr__(self) -> str:
        return f"RoadGraph(n_nodes={self.n_nodes}, n_edges={self.n_edges})"


def graphs_close(a: RoadGraph, b: RoadGraph, tol: float = 1e-12) -> bool:
    """Equality up to node reindexing: same coordinate multiset (within tol) and same edges.

    Matches nodes greedily by nearest coordinates, which is unambiguous when
    node spacing exceeds tol by a wide margin (true for merged graphs).
    """
    if a.n_nodes != b.n_nodes or a.n_edges != b.n_edges:
        return False
    if a.n_nodes == 0:
        return True
    used = np.zeros(b.n_nodes, dtype=bool)
    mapping = np.full(a.n_nodes, -1, dtype=np.int64)
    for i in range(a.n_nodes):
        d = np.hypot(*(b.nodes - a.nodes[i]).T)
        d[used] = np.inf
        j = int(np.argmin(d))
        if d[j] > tol:
            return False
        mapping[i] = j
        used[j] = True
    remapped = {tuple(sorted((int(mapping[i]), int(mapping[j])))) for i, j in a.edges}
    return remapped == b.edge_set()


def write_rgf(g: RoadGraph, path) -> None:
    """Write the .rgf text format: header line, then v/e lines (9 fractional digits)."""
    lines = [f"RGF1 {g.n_nodes} {g.n_edges}"]
    for x, y in g.nodes:
        lines.append(f"v {x:.9f} {y:.9f}")
    for i, j in g.edges:
        lines.append(f"e {i} {j}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_rgf(path) -> RoadGraph:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("RGF1"):
        raise ValueError(f"{path}: not an RGF1 file")
    _, n_v, n_e = lines[0].split()
    n_v, n_e = int(n_v), int(n_e)
    if len(lines) != 1 + n_v + n_e:
        raise ValueError(f"{path}: expected {1 + n_v + n_e} lines, found {len(lines)}")
    nodes = np.zeros((n_v, 2))
    for k in range(n_v):
        tag, x, y = lines[1 + k].split()
        if tag != "v":
            raise ValueError(f"{path}: bad node line {lines[1 + k]!r}")
        nodes[k] = (float(x), float(y))
    edges = []
    for k in range(n_e):
        tag, i, j = lines[1 + n_v + k].split()
        if tag != "e":
            raise ValueError(f"{path}: bad edge line {lines[1 + n_v + k]!r}")
        edges.append((int(i), int(j)))
    return RoadGraph(nodes, edges)
