"""Geometric preprocessing of road graphs.

The cleanup chain applied to every extracted tile is
planarize -> merge_close_nodes -> straighten, followed by the size filter.
All functions are pure and deterministic.
"""

from __future__ import annotations

import math

import numpy as np

from .graph import Point2, RoadGraph


def intersect_segments(a1: Point2, a2: Point2, b1: Point2, b2: Point2):
    """Proper interior intersection of two open segments, or None.

    Parallel, collinear, disjoint, and endpoint-touching pairs all return
    None; collinear overlaps are left for node merging to resolve.
    """
    ax, ay = a1
    rx, ry = a2[0] - ax, a2[1] - ay
    bx, by = b1
    sx, sy = b2[0] - bx, b2[1] - by
    denom = rx * sy - ry * sx
    if denom == 0.0:
        return None
    qpx, qpy = bx - ax, by - ay
    t = (qpx * sy - qpy * sx) / denom
    u = (qpx * ry - qpy * rx) / denom
    if 0.0 < t < 1.0 and 0.0 < u < 1.0:
        return (ax + t * rx, ay + t * ry)
    return None


def _segment_param(p1, p2, q) -> float:
    """Parameter t of the projection of q onto the line p1 + t*(p2 - p1)."""
    dx, dy = p2[0] - p1[0], p2[1] - p1[1]
    den = dx * dx + dy * dy
    return ((q[0] - p1[0]) * dx + (q[1] - p1[1]) * dy) / den


PLANARIZE_SNAP = 1e-9


def proper_crossing(p1, p2, q1, q2, snap: float = PLANARIZE_SNAP):
    """intersect_segments hardened for splitting: rejects near-parallel pairs
    (relative cross-product threshold) and crossings within snap of an
    endpoint, both of which otherwise cascade into spurious re-splits of
    freshly cut sub-edges. Sub-snap structure is left to node merging."""
    rx, ry = p2[0] - p1[0], p2[1] - p1[1]
    sx, sy = q2[0] - q1[0], q2[1] - q1[1]
    denom = rx * sy - ry * sx
    len_r = math.hypot(rx, ry)
    len_s = math.hypot(sx, sy)
    if abs(denom) <= 1e-12 * len_r * len_s:
        return None
    pt = intersect_segments(p1, p2, q1, q2)
    if pt is None:
        return None
    for end in (p1, p2, q1, q2):
        if math.hypot(pt[0] - end[0], pt[1] - end[1]) <= snap:
            return None
    return pt


def planarize(g: RoadGraph) -> RoadGraph:
    """Split every pair of properly crossing edges at their intersection point.

    Each crossing becomes a shared node of the four resulting sub-edges, so
    the output contains no proper crossings; re-applying is a no-op.
    """
    for _ in range(8):  # one pass suffices; extra passes absorb float corner cases
        nodes = [tuple(p) for p in g.nodes]
        cuts: dict[int, list[tuple[float, int]]] = {}
        point_ids: dict[tuple[float, float], int] = {}
        found = False
        E = g.edges
        for e1 in range(len(E)):
            p1, p2 = nodes[E[e1, 0]], nodes[E[e1, 1]]
            for e2 in range(e1 + 1, len(E)):
                q1, q2 = nodes[E[e2, 0]], nodes[E[e2, 1]]
                pt = proper_crossing(p1, p2, q1, q2)
                if pt is None:
                    continue
                found = True
                key = (round(pt[0], 12), round(pt[1], 12))
                if key not in point_ids:
                    point_ids[key] = len(nodes)
                    nodes.append(pt)
                idx = point_ids[key]
                cuts.setdefault(e1, []).append((_segment_param(p1, p2, pt), idx))
                cuts.setdefault(e2, []).append((_segment_param(q1, q2, pt), idx))
        if not found:
            return g
        new_edges: list[tuple[int, int]] = []
        for e in range(len(E)):
            i, j = int(E[e, 0]), int(E[e, 1])
            if e not in cuts:
                new_edges.append((i, j))
                continue
            chain = [i]
            seen = set()
            for _, idx in sorted(cuts[e]):
                if idx not in seen and idx != i and idx != j:
                    chain.append(idx)
                    seen.add(idx)
            chain.append(j)
            new_edges.extend(zip(chain[:-1], chain[1:]))
        g = RoadGraph(nodes, new_edges)
    return g


def merge_close_nodes(g: RoadGraph, eps: float) -> RoadGraph:
    """Contract every cluster of nodes linked by distances < eps to its centroid.

    The "closer than eps" relation is closed transitively (union-find), and
    the pass repeats until no pair is closer than eps, so the result is a
    fixpoint. Edges inside a cluster vanish; duplicates collapse.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    while True:
        n = g.n_nodes
        if n <= 1:
            return g
        parent = list(range(n))

        def find(i: int) -> int:
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        diff = g.nodes[:, None, :] - g.nodes[None, :, :]
        close = np.hypot(diff[..., 0], diff[..., 1]) < eps
        ii, jj = np.nonzero(np.triu(close, k=1))
        if len(ii) == 0:
            return g
        for i, j in zip(ii.tolist(), jj.tolist()):
            ri, rj = find(i), find(j)
            if ri != rj:
                parent[max(ri, rj)] = min(ri, rj)
        roots = [find(i) for i in range(n)]
        order = sorted(set(roots))
        relabel = {r: k for k, r in enumerate(order)}
        new_nodes = np.zeros((len(order), 2))
        counts = np.zeros(len(order))
        for i, r in enumerate(roots):
            new_nodes[relabel[r]] += g.nodes[i]
            counts[relabel[r]] += 1
        new_nodes /= counts[:, None]
        edges = [
            (relabel[roots[int(i)]], relabel[roots[int(j)]])
            for i, j in g.edges
            if roots[int(i)] != roots[int(j)]
        ]
        g = RoadGraph(new_nodes, edges)


def _deviation_deg(u: np.ndarray, v: np.ndarray, w: np.ndarray) -> float:
    """Deviation from straight at node v on the path u-v-w, in degrees (0 = collinear)."""
    a = u - v
    b = w - v
    na = math.hypot(a[0], a[1])
    nb = math.hypot(b[0], b[1])
    if na == 0.0 or nb == 0.0:
        return 0.0
    c = (a[0] * b[0] + a[1] * b[1]) / (na * nb)
    angle = math.degrees(math.acos(min(1.0, max(-1.0, c))))
    return 180.0 - angle


def straighten(g: RoadGraph, max_deviation_deg: float = 15.0) -> RoadGraph:
    """Fuse nearly collinear edge pairs at degree-2 nodes, repeatedly, until stable.

    A degree-2 node whose two incident edges deviate from a straight line by
    less than max_deviation_deg is removed and its edges joined. Candidates
    are scanned in (y, x) order so the result does not depend on storage
    order.
    """
    if not 0 < max_deviation_deg < 90:
        raise ValueError("max_deviation_deg must be in (0, 90)")
    while True:
        deg = g.degrees()
        adj = g.adjacency_lists()
        candidates = [i for i in range(g.n_nodes) if deg[i] == 2]
        candidates.sort(key=lambda i: (g.nodes[i][1], g.nodes[i][0]))
        fuse_at = -1
        for v in candidates:
            u, w = adj[v]
            if u == w:
                continue
            if _deviation_deg(g.nodes[u], g.nodes[v], g.nodes[w]) < max_deviation_deg:
                fuse_at = v
                break
        if fuse_at < 0:
            return g
        u, w = adj[fuse_at]
        keep = [i for i in range(g.n_nodes) if i != fuse_at]
        relabel = {old: new for new, old in enumerate(keep)}
        edges = [
            (relabel[int(i)], relabel[int(j)])
            for i, j in g.edges
            if fuse_at not in (int(i), int(j))
        ]
        edges.append((relabel[u], relabel[w]))
        g = RoadGraph(g.nodes[keep], edges)


MIN_NODES = 4
MAX_NODES = 9
MAX_EDGES = 15


def filter_graph(g: RoadGraph):
    """Accept (None) or reject (reason string) a preprocessed tile graph.

    Trivial graphs (|V| <= 3) and cluttered ones (|V| >= 10 or |E| >= 16)
    are rejected.
    """
    if g.n_nodes < MIN_NODES:
        return "trivial"
    if g.n_nodes > MAX_NODES or g.n_edges > MAX_EDGES:
        return "cluttered"
    return None


def dihedral_transform(g: RoadGraph, k: int, flip: bool) -> RoadGraph:
    """Apply k quarter-turns clockwise (screen orientation, y down) and an optional x-mirror.

    Quarter turn: (x, y) -> (-y, x). Mirror: (x, y) -> (-x, y), applied
    before the rotation.
    """
    pts = g.nodes.copy()
    if flip:
        pts[:, 0] = -pts[:, 0]
    for _ in range(k % 4):
        pts = np.stack([-pts[:, 1], pts[:, 0]], axis=1)
    return RoadGraph(pts, g.edges)


def dihedral_augment(g: RoadGraph) -> list[RoadGraph]:
    """The 8 symmetry images of a tile graph: 4 rotations, each plain and mirrored."""
    return [dihedral_transform(g, k, flip) for flip in (False, True) for k in range(4)]
