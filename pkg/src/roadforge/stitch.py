"""Merging per-tile graphs into one larger network, and the inverse tile split.

Cell (r, c) of an R x C grid is translated so it occupies
[2c-1, 2c+1] x [2r-1, 2r+1]; nodes from different cells that land within
boundary_tol of each other are contracted to their centroid, and the union
is rescaled back into [-1, 1] per axis.
"""

from __future__ import annotations

import numpy as np

from .graph import RoadGraph

DEFAULT_BOUNDARY_TOL = 0.1  # matches the node-merge radius in tile units


class EmptyGrid(ValueError):
    """The tile grid has no cells."""


def stitch(grid: list[list[RoadGraph]], boundary_tol: float = DEFAULT_BOUNDARY_TOL) -> RoadGraph:
    """Union the translated cell graphs, contract cross-cell border nodes, rescale."""
    if boundary_tol <= 0:
        raise ValueError("boundary_tol must be positive")
    if not grid or not grid[0]:
        raise EmptyGrid("grid must have at least one cell")
    rows = len(grid)
    cols = len(grid[0])
    if any(len(row) != cols for row in grid):
        raise ValueError("ragged grid")

    pts = []
    cell_of = []
    edges = []
    offset = 0
    for r in range(rows):
        for c in range(cols):
            g = grid[r][c]
            if g.n_nodes:
                pts.append(g.nodes + np.array([2.0 * c, 2.0 * r]))
                cell_of.extend([r * cols + c] * g.n_nodes)
                edges.extend((int(i) + offset, int(j) + offset) for i, j in g.edges)
                offset += g.n_nodes
    if not pts:
        return RoadGraph()
    nodes = np.concatenate(pts, axis=0)
    cell_of = np.asarray(cell_of)

    # contract only pairs from different cells: border duplicates, not interiors
    n = len(nodes)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    diff = nodes[:, None, :] - nodes[None, :, :]
    close = np.hypot(diff[..., 0], diff[..., 1]) < boundary_tol
    close &= cell_of[:, None] != cell_of[None, :]
    for i, j in zip(*np.nonzero(np.triu(close, k=1))):
        ri, rj = find(int(i)), find(int(j))
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    roots = [find(i) for i in range(n)]
    order = sorted(set(roots))
    relabel = {root: k for k, root in enumerate(order)}
    merged = np.zeros((len(order), 2))
    counts = np.zeros(len(order))
    for i, root in enumerate(roots):
        merged[relabel[root]] += nodes[i]
        counts[relabel[root]] += 1
    merged /= counts[:, None]
    new_edges = [
        (relabel[roots[i]], relabel[roots[j]]) for i, j in edges if roots[i] != roots[j]
    ]
    merged[:, 0] = (merged[:, 0] - (cols - 1)) / cols
    merged[:, 1] = (merged[:, 1] - (rows - 1)) / rows
    return RoadGraph(merged, new_edges)


def _cut_edges_at(g: RoadGraph, axis: int, position: float) -> RoadGraph:
    """Insert a node wherever an edge properly crosses the axis-aligned line."""
    nodes = [tuple(p) for p in g.nodes]
    edges = []
    for i, j in g.edges:
        a = nodes[int(i)]
        b = nodes[int(j)]
        lo, hi = sorted((a[axis], b[axis]))
        if lo < position < hi:
            t = (position - a[axis]) / (b[axis] - a[axis])
            pt = (
                (position, a[1] + t * (b[1] - a[1]))
                if axis == 0
                else (a[0] + t * (b[0] - a[0]), position)
            )
            k = len(nodes)
            nodes.append(pt)
            edges.append((int(i), k))
            edges.append((k, int(j)))
        else:
            edges.append((int(i), int(j)))
    return RoadGraph(nodes, edges)


def split_into_tiles(g: RoadGraph, rows: int, cols: int) -> list[list[RoadGraph]]:
    """Cut a [-1, 1] graph into an R x C grid of per-tile graphs in local coords.

    Edges are cut at interior tile boundaries first, then each edge is
    assigned to the tile containing its midpoint; shared boundary nodes are
    duplicated into every adjacent tile. Inverse of stitch up to float
    rounding.
    """
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    cut = g
    for c in range(1, cols):
        cut = _cut_edges_at(cut, 0, -1.0 + 2.0 * c / cols)
    for r in range(1, rows):
        cut = _cut_edges_at(cut, 1, -1.0 + 2.0 * r / rows)
    w_x = 2.0 / cols
    w_y = 2.0 / rows
    grid = []
    for r in range(rows):
        row_cells = []
        for c in range(cols):
            x0 = -1.0 + c * w_x
            y0 = -1.0 + r * w_y
            picked = {}
            local_nodes = []
            local_edges = []
            for i, j in cut.edges:
                mid = (cut.nodes[int(i)] + cut.nodes[int(j)]) / 2.0
                col_idx = min(cols - 1, int((mid[0] + 1.0) / w_x))
                row_idx = min(rows - 1, int((mid[1] + 1.0) / w_y))
                if (row_idx, col_idx) != (r, c):
                    continue
                pair = []
                for v in (int(i), int(j)):
                    if v not in picked:
                        picked[v] = len(local_nodes)
                        x, y = cut.nodes[v]
                        local_nodes.append(
                            ((x - x0) / w_x * 2.0 - 1.0, (y - y0) / w_y * 2.0 - 1.0)
                        )
                    pair.append(picked[v])
                local_edges.append(tuple(pair))
            row_cells.append(RoadGraph(local_nodes, local_edges))
        grid.append(row_cells)
    return grid
