"""Point-cloud transport distance between road graphs.

Graphs are turned into uniform point clouds by equidistant sampling along
their edges; the distance is the entropic-regularized optimal transport
cost between the clouds (log-domain Sinkhorn iterations, squared Euclidean
ground cost). A Hungarian-based exact solver is kept alongside as an
independent check for small instances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .graph import RoadGraph

DEFAULT_POINTS = 100
DEFAULT_EPS = 1e-3
DEFAULT_MAX_ITER = 10000
DEFAULT_TOL = 1e-9


class NoEdges(ValueError):
    """The graph has no edges to sample points from."""


class SizeMismatch(ValueError):
    """The exact solver requires equal-size clouds."""


@dataclass
class PointCloud:
    points: np.ndarray  # (n, 2)

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if len(self.points) < 1:
            raise ValueError("point cloud must contain at least one point")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def weights(self) -> np.ndarray:
        return np.full(len(self.points), 1.0 / len(self.points))


@dataclass
class TransportResult:
    cost: float
    coupling: np.ndarray  # (n, m)
    iterations: int
    converged: bool


def sample_point_cloud(g: RoadGraph, n: int = DEFAULT_POINTS) -> PointCloud:
    """Sample approximately n points spread equidistantly over the edges.

    Each edge receives max(1, round(n * len_e / total_len)) points placed at
    arc-length midpoints (k + 0.5) * len_e / n_e. Edges are stored in a
    canonical order, so the point multiset does not depend on how the edge
    list was originally arranged.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if g.n_edges == 0:
        raise NoEdges("cannot sample points from an edgeless graph")
    lengths = g.edge_lengths()
    total = float(lengths.sum())
    chunks = []
    for e, (i, j) in enumerate(g.edges):
        if total > 0.0:
            n_e = max(1, int(np.floor(n * lengths[e] / total + 0.5)))
        else:
            n_e = 1
        frac = (np.arange(n_e) + 0.5) / n_e
        a = g.nodes[int(i)]
        b = g.nodes[int(j)]
        chunks.append(a + frac[:, None] * (b - a))
    return PointCloud(np.concatenate(chunks, axis=0))


def _cost_matrix(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    diff = p[:, None, :] - q[None, :, :]
    return diff[..., 0] ** 2 + diff[..., 1] ** 2


_ABSORB_LIMIT = 1e12  # scaling factors above this are folded into the potentials


def _scaling_loop(cost_m, wa, wb, eps, max_iter, tol):
    """Stabilized scaling iterations with an annealed regularization schedule.

    Runs matrix-scaling updates u = wa/(K v), v = wb/(K.T u) on the Gibbs
    kernel of a geometrically decreasing regularization (quartered per stage
    down to eps), absorbing large scalings into the dual potentials so the
    kernel never over/underflows. Marginal violation is measured in L1.
    """
    n, m = len(wa), len(wb)
    f = np.zeros(n)  # dual potentials
    g = np.zeros(m)

    schedule = []
    e = max(eps, float(cost_m.max()) / 8.0)
    while e > eps:
        schedule.append(e)
        e /= 4.0
    schedule.append(eps)

    total_it = 0
    converged = False
    for stage, e in enumerate(schedule):
        last = stage == len(schedule) - 1
        kern = np.exp((f[:, None] + g[None, :] - cost_m) / e)
        u = np.ones(n)
        v = np.ones(m)
        budget = max_iter - total_it if last else min(50, max_iter - total_it)
        stage_tol = tol if last else max(tol, 1e-6)
        tiny = np.finfo(np.float64).tiny
        for k in range(budget):
            total_it += 1
            u = wa / np.maximum(kern @ v, tiny)
            v = wb / np.maximum(kern.T @ u, tiny)
            if max(u.max(), v.max()) > _ABSORB_LIMIT:
                f = f + e * np.log(u)
                g = g + e * np.log(v)
                kern = np.exp((f[:, None] + g[None, :] - cost_m) / e)
                u = np.ones(n)
                v = np.ones(m)
            if (k + 1) % 10 == 0 or k == budget - 1:
                gap = float(
                    np.abs(u * (kern @ v) - wa).sum()
                    + np.abs(v * (kern.T @ u) - wb).sum()
                )
                if gap < stage_tol:
                    converged = last
                    break
        f = f + e * np.log(np.clip(u, tiny, None))
        g = g + e * np.log(np.clip(v, tiny, None))
    coupling = _round_to_feasible(
        np.exp((f[:, None] + g[None, :] - cost_m) / eps), wa, wb
    )
    cost = float((coupling * cost_m).sum())
    return cost, coupling, total_it, converged


def _round_to_feasible(coupling: np.ndarray, wa: np.ndarray, wb: np.ndarray) -> np.ndarray:
    """Project a near-feasible coupling onto the transport polytope.

    Rows are scaled down to their targets, then columns, and the missing
    mass is restored as a rank-1 term; marginals become exact even when the
    scaling loop stopped at its iteration budget.
    """
    r = coupling.sum(axis=1)
    coupling = coupling * np.minimum(1.0, np.divide(wa, r, out=np.ones_like(r), where=r > 0))[:, None]
    c = coupling.sum(axis=0)
    coupling = coupling * np.minimum(1.0, np.divide(wb, c, out=np.ones_like(c), where=c > 0))[None, :]
    err_a = np.clip(wa - coupling.sum(axis=1), 0.0, None)
    err_b = np.clip(wb - coupling.sum(axis=0), 0.0, None)
    total = err_a.sum()
    if total > 0:
        coupling = coupling + np.outer(err_a, err_b) / total
    return coupling


def sinkhorn(
    p: PointCloud,
    q: PointCloud,
    eps: float = DEFAULT_EPS,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
) -> TransportResult:
    """Entropic OT between uniform clouds via log-stabilized scaling iterations.

    The scaling loop runs once in each orientation (cost matrix and its
    transpose) and the two results are averaged, which makes the cost
    exactly symmetric in the argument order even when an instance stops at
    the iteration budget before reaching tol. Each orientation gets
    max_iter iterations; converged means both reached tol.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    wa = np.full(len(p), 1.0 / len(p))
    wb = np.full(len(q), 1.0 / len(q))
    cost_m = _cost_matrix(p.points, q.points)
    c1, pl1, it1, conv1 = _scaling_loop(cost_m, wa, wb, eps, max_iter, tol)
    c2, pl2, it2, conv2 = _scaling_loop(cost_m.T, wb, wa, eps, max_iter, tol)
    coupling = 0.5 * (pl1 + pl2.T)
    return TransportResult(0.5 * (c1 + c2), coupling, it1 + it2, conv1 and conv2)


def exact_ot(p: PointCloud, q: PointCloud) -> float:
    """Exact uniform-weight transport cost via minimum-cost assignment."""
    if len(p) != len(q):
        raise SizeMismatch(f"clouds differ in size: {len(p)} vs {len(q)}")
    c = _cost_matrix(p.points, q.points)
    rows, cols = linear_sum_assignment(c)
    return float(c[rows, cols].sum() / len(p))


def streetmover(
    g1: RoadGraph,
    g2: RoadGraph,
    n: int = DEFAULT_POINTS,
    eps: float = DEFAULT_EPS,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
) -> float:
    """Transport cost between the sampled point clouds of two graphs."""
    r = sinkhorn(sample_point_cloud(g1, n), sample_point_cloud(g2, n), eps, max_iter, tol)
    return r.cost


def streetmover_or_proxy(
    pred: RoadGraph,
    target: RoadGraph,
    n: int = DEFAULT_POINTS,
    eps: float = DEFAULT_EPS,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
) -> tuple[float, bool]:
    """Like streetmover, but an edgeless prediction is scored against a
    single-point proxy cloud at the tile center and flagged."""
    target_cloud = sample_point_cloud(target, n)
    if pred.n_edges == 0:
        pred_cloud = PointCloud(np.zeros((1, 2)))
        flagged = True
    else:
        pred_cloud = sample_point_cloud(pred, n)
        flagged = False
    r = sinkhorn(pred_cloud, target_cloud, eps, max_iter, tol)
    return r.cost, flagged
