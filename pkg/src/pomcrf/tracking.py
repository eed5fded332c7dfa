"""Temporal linking of POM sequences by min-cost flow.

Every (frame, location) pair becomes a unit-capacity node whose traversal
costs ``-log(q / (1 - q))``.  Trajectories are node-disjoint source-to-sink
paths; successive shortest paths extract them while the marginal path cost
stays negative, which yields the least-cost flow over all flow values up to K.
"""

from __future__ import annotations

import csv
import heapq
import io
from dataclasses import dataclass, field

import numpy as np

from .evaluation import DetectionSet
from .geometry import GroundGrid

Q_CLAMP = 1e-6


@dataclass
class FlowGraph:
    T: int
    grid: GroundGrid
    radius: int
    node_cost: np.ndarray                 # (T, N)
    entry_cost: float
    exit_cost: float
    neighbors: list                       # per location, reachable locations next frame
    entries: list                         # per frame, locations with a source edge
    exits: list                           # per frame, locations with a sink edge

    @property
    def n_nodes(self) -> int:
        return 2 * self.T * self.grid.N + 2

    @property
    def n_edges(self) -> int:
        N = self.grid.N
        trans = (self.T - 1) * sum(len(nb) for nb in self.neighbors)
        return self.T * N + trans + sum(map(len, self.entries)) + sum(map(len, self.exits))


@dataclass
class Trajectory:
    frames: list = field(default_factory=list)
    cells: list = field(default_factory=list)

    def __len__(self):
        return len(self.frames)


def boundary_cells(grid: GroundGrid) -> np.ndarray:
    xy = grid.cell_coords()
    edge = (xy[:, 0] == 0) | (xy[:, 1] == 0) | (xy[:, 0] == grid.cols - 1) | (xy[:, 1] == grid.rows - 1)
    return np.flatnonzero(edge)


def neighborhood(grid: GroundGrid, radius: int) -> list:
    """Locations within Chebyshev distance ``radius`` of each location, itself included."""
    xy = grid.cell_coords()
    out = []
    for i in range(grid.N):
        d = np.abs(xy - xy[i]).max(axis=1)
        out.append(np.flatnonzero(d <= radius))
    return out


def node_costs(poms) -> np.ndarray:
    q = np.clip(np.asarray(poms, dtype=float), Q_CLAMP, 1.0 - Q_CLAMP)
    return -(np.log(q) - np.log1p(-q))


def build_flow_graph(poms, grid: GroundGrid, radius: int = 1, entry_cost: float = 2.0,
                     exit_cost: float = 2.0) -> FlowGraph:
    poms = np.asarray(poms, dtype=float)
    if poms.ndim != 2 or poms.shape[1] != grid.N:
        raise ValueError(f"POM sequence must be (T, {grid.N}), got {poms.shape}")
    T = poms.shape[0]
    if T < 2:
        raise ValueError("flow linking needs at least 2 frames")
    if radius < 0:
        raise ValueError("radius must be non-negative")
    edge = boundary_cells(grid)
    every = np.arange(grid.N)
    entries = [every] + [edge] * (T - 1)
    exits = [edge] * (T - 1) + [every]
    return FlowGraph(T, grid, radius, node_costs(poms), float(entry_cost), float(exit_cost),
                     neighborhood(grid, radius), entries, exits)


class _Residual:
    """Residual network with integer capacities and float costs."""

    def __init__(self, n):
        self.n = n
        self.to, self.cap, self.cost, self.head, self.nxt = [], [], [], [-1] * n, []

    def add(self, u, v, cost, cap=1):
        for a, b, c, k in ((u, v, cost, cap), (v, u, -cost, 0)):
            self.to.append(b)
            self.cap.append(k)
            self.cost.append(c)
            self.nxt.append(self.head[a])
            self.head[a] = len(self.to) - 1

    def arcs(self, u):
        e = self.head[u]
        while e != -1:
            yield e
            e = self.nxt[e]


def _graph_ids(g: FlowGraph):
    N = g.grid.N
    src, snk = 2 * g.T * N, 2 * g.T * N + 1

    def node_in(t, i):
        return 2 * (t * N + i)

    return src, snk, node_in


def _residual(g: FlowGraph) -> _Residual:
    src, snk, node_in = _graph_ids(g)
    R = _Residual(g.n_nodes)
    N = g.grid.N
    for t in range(g.T):
        for i in g.entries[t]:
            R.add(src, node_in(t, i), g.entry_cost)
    for t in range(g.T):
        for i in range(N):
            u = node_in(t, i)
            R.add(u, u + 1, float(g.node_cost[t, i]))
            if t + 1 < g.T:
                for j in g.neighbors[i]:
                    R.add(u + 1, node_in(t + 1, j), 0.0)
    for t in range(g.T):
        for i in g.exits[t]:
            R.add(node_in(t, i) + 1, snk, g.exit_cost)
    return R


def _dag_distances(R: _Residual, src: int, order) -> list:
    """Shortest distances from ``src`` over arcs with capacity, in topological ``order``."""
    inf = float("inf")
    dist = [inf] * R.n
    dist[src] = 0.0
    for u in order:
        du = dist[u]
        if du == inf:
            continue
        for e in R.arcs(u):
            if R.cap[e] > 0:
                v = R.to[e]
                nd = du + R.cost[e]
                if nd < dist[v]:
                    dist[v] = nd
    return dist


def _dijkstra(R: _Residual, src: int, pot):
    inf = float("inf")
    dist = [inf] * R.n
    prev = [-1] * R.n
    dist[src] = 0.0
    heap = [(0.0, src)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        pu = pot[u]
        for e in R.arcs(u):
            if R.cap[e] <= 0:
                continue
            v = R.to[e]
            # reduced costs are non-negative up to rounding
            nd = d + max(R.cost[e] + pu - pot[v], 0.0)
            if nd < dist[v]:
                dist[v] = nd
                prev[v] = e
                heapq.heappush(heap, (nd, v))
    return dist, prev


@dataclass
class FlowSolution:
    trajectories: list
    total_cost: float
    path_costs: list


def solve_flow(g: FlowGraph, max_tracks: int | None = None) -> FlowSolution:
    """Least-cost set of at most ``max_tracks`` node-disjoint trajectories."""
    K = g.grid.N if max_tracks is None else int(max_tracks)
    if K < 1:
        raise ValueError("max_tracks must be >= 1")
    R = _residual(g)
    src, snk, node_in = _graph_ids(g)
    order = [src] + [node_in(t, i) + s for t in range(g.T) for i in range(g.grid.N) for s in (0, 1)] + [snk]
    pot = _dag_distances(R, src, order)
    inf = float("inf")
    pot = [p if p < inf else 0.0 for p in pot]
    total, costs = 0.0, []
    for _ in range(K):
        dist, prev = _dijkstra(R, src, pot)
        if dist[snk] == inf:
            break
        # true path cost, summed along the path
        path, v = [], snk
        while v != src:
            e = prev[v]
            path.append(e)
            v = R.to[e ^ 1]
        cost = sum(R.cost[e] for e in path)
        if cost >= 0:
            break
        for e in path:
            R.cap[e] -= 1
            R.cap[e ^ 1] += 1
        total += cost
        costs.append(cost)
        pot = [p + d if d < inf else p for p, d in zip(pot, dist)]
    return FlowSolution(_decompose(R, g), total, costs)


def _decompose(R: _Residual, g: FlowGraph) -> list:
    """Follow saturated arcs from the source; unit node capacities make paths unique."""
    src, snk, node_in = _graph_ids(g)
    N = g.grid.N

    def used(u):
        # forward arcs are even-numbered; flow 1 means the reverse arc has capacity
        return [R.to[e] for e in R.arcs(u) if e % 2 == 0 and R.cap[e ^ 1] > 0]

    tracks = []
    for start in sorted(used(src)):
        traj, u = Trajectory(), start
        while u != snk:
            t, i = divmod(u // 2, N)
            traj.frames.append(int(t))
            traj.cells.append(int(i))
            (out,) = used(u + 1)
            u = out
        tracks.append(traj)
    return tracks


def smooth_pom(poms, trajectories, grid: GroundGrid):
    """Per-frame detections located on the trajectories only."""
    poms = np.clip(np.asarray(poms, dtype=float), Q_CLAMP, 1.0)
    T = poms.shape[0]
    cells = [[] for _ in range(T)]
    for tr in trajectories:
        for t, i in zip(tr.frames, tr.cells):
            cells[t].append(i)
    out = []
    for t in range(T):
        c = np.array(sorted(cells[t]), dtype=np.int64)
        out.append(DetectionSet(grid.centers()[c].reshape(-1, 2), poms[t, c], c, t))
    return out


def trajectories_csv(trajectories, grid: GroundGrid) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("track", "frame", "row", "col"))
    for k, tr in enumerate(trajectories):
        for t, i in zip(tr.frames, tr.cells):
            r, c = grid.cell(i)
            w.writerow((k, t, r, c))
    return buf.getvalue()
