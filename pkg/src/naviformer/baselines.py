"""Classical two-step comparators: grid A*, a greedy route heuristic, and the
pipeline that chains them under a slackened budget.
"""

from __future__ import annotations

import heapq
import itertools
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import NopInstance, Obstacle, VerificationReport, path_length, segment_hits_obstacle, verify_solution
from .env import COLLISION, SUCCESS, TIMEOUT, EpisodeTrace

SQRT2 = math.sqrt(2.0)
ALGO_TWO_STEP = "two-step-greedy-astar"

Point = tuple[float, float]
Cell = tuple[int, int]

# (dx, dy, is_diagonal), straight moves first
MOVES = ((1, 0, False), (0, 1, False), (-1, 0, False), (0, -1, False),
         (1, 1, True), (-1, 1, True), (-1, -1, True), (1, -1, True))


class InfeasibleError(RuntimeError):
    pass


class BlockedEndpointError(ValueError):
    pass


@dataclass
class GridSpec:
    """Occupancy grid over the unit square, ``blocked[ix, iy]``.

    A cell is blocked when its centre lies within ``r + resolution * sqrt(2) / 2``
    of an obstacle centre, i.e. whenever the closed cell touches the closed
    disc. Free cells are therefore disjoint from every disc, and so is any
    segment between the centres of two 8-adjacent free cells.
    """
    resolution: float
    blocked: np.ndarray
    obstacles: tuple[Obstacle, ...] = ()

    @property
    def size(self) -> int:
        return self.blocked.shape[0]

    @classmethod
    def from_obstacles(cls, obstacles: Sequence[Obstacle], resolution: float = 0.02) -> "GridSpec":
        size = int(math.ceil(1.0 / resolution - 1e-9))
        c = (np.arange(size) + 0.5) * resolution
        cx, cy = np.meshgrid(c, c, indexing="ij")
        blocked = np.zeros((size, size), dtype=bool)
        inflate = resolution * SQRT2 / 2
        for o in obstacles:
            blocked |= np.hypot(cx - o.cx, cy - o.cy) <= o.radius + inflate
        return cls(resolution, blocked, tuple(obstacles))

    @classmethod
    def for_instance(cls, inst: NopInstance, resolution: float | None = None) -> "GridSpec":
        return cls.from_obstacles(inst.obstacles, inst.step_len if resolution is None else resolution)

    def cell_of(self, p: Sequence[float]) -> Cell:
        hi = self.size - 1
        ix = min(max(int(math.floor(p[0] / self.resolution)), 0), hi)
        iy = min(max(int(math.floor(p[1] / self.resolution)), 0), hi)
        return ix, iy

    def center(self, cell: Cell) -> Point:
        return ((cell[0] + 0.5) * self.resolution, (cell[1] + 0.5) * self.resolution)

    def is_free(self, cell: Cell) -> bool:
        ix, iy = cell
        return 0 <= ix < self.size and 0 <= iy < self.size and not self.blocked[ix, iy]


@dataclass
class GridPath:
    cells: list[Cell]
    n_straight: int
    n_diagonal: int
    polyline: list[Point]
    expanded: int = 0
    resolution: float = 0.02

    @property
    def cost(self) -> float:
        """Octile path cost in length units."""
        return self.resolution * (self.n_straight + self.n_diagonal * SQRT2)


def octile(a: Cell, b: Cell) -> float:
    dx = abs(a[0] - b[0])
    dy = abs(a[1] - b[1])
    return (max(dx, dy) - min(dx, dy)) + min(dx, dy) * SQRT2


def astar_cells(grid: GridSpec, start: Cell, goal: Cell) -> tuple[list[Cell], int, int, int] | None:
    """8-connected A* between free cells.

    Costs are tracked exactly as (straight, diagonal) move counts; the float
    value ``straight + diagonal * sqrt(2)`` orders them. Returns
    ``(cells, n_straight, n_diagonal, expanded)`` or None when unreachable.
    """
    if not grid.is_free(start) or not grid.is_free(goal):
        raise BlockedEndpointError(f"start {start} or goal {goal} is blocked")
    size = grid.size
    blocked = grid.blocked
    best: dict[Cell, tuple[int, int]] = {start: (0, 0)}
    parent: dict[Cell, Cell] = {}
    closed: set[Cell] = set()
    tie = itertools.count()
    heap = [(octile(start, goal), next(tie), start)]
    expanded = 0
    while heap:
        _, _, cur = heapq.heappop(heap)
        if cur in closed:
            continue
        closed.add(cur)
        expanded += 1
        if cur == goal:
            cells = [cur]
            while cells[-1] in parent:
                cells.append(parent[cells[-1]])
            cells.reverse()
            s, d = best[goal]
            return cells, s, d, expanded
        s, d = best[cur]
        x, y = cur
        for dx, dy, diag in MOVES:
            nx, ny = x + dx, y + dy
            if not (0 <= nx < size and 0 <= ny < size) or blocked[nx, ny]:
                continue
            nxt = (nx, ny)
            if nxt in closed:
                continue
            cand = (s, d + 1) if diag else (s + 1, d)
            old = best.get(nxt)
            g = cand[0] + cand[1] * SQRT2
            if old is None or g < old[0] + old[1] * SQRT2:
                best[nxt] = cand
                parent[nxt] = cur
                heapq.heappush(heap, (g + octile(nxt, goal), next(tie), nxt))
    return None


def astar(grid: GridSpec, start: Sequence[float], goal: Sequence[float]) -> GridPath | None:
    """Shortest 8-connected grid path between two points in free cells.

    The polyline runs from ``start`` through the centres of the path cells
    to ``goal``. Returns None when no path exists.
    """
    s_cell, g_cell = grid.cell_of(start), grid.cell_of(goal)
    found = astar_cells(grid, s_cell, g_cell)
    if found is None:
        return None
    cells, ns, nd, expanded = found
    poly = [(float(start[0]), float(start[1]))] + [grid.center(c) for c in cells]
    poly.append((float(goal[0]), float(goal[1])))
    return GridPath(cells, ns, nd, poly, expanded, grid.resolution)


# ---------------------------------------------------------------------------
# Route heuristic
# ---------------------------------------------------------------------------

def greedy_route(inst: NopInstance, dist: np.ndarray, budget: float, tol: float = 1e-9) -> list[int]:
    """Repeatedly add the unvisited node with the best reward per unit distance
    that still leaves enough budget to reach the end depot."""
    end = inst.end
    if not dist[0, end] <= budget + tol:
        raise InfeasibleError(f"budget {budget:.6f} below depot-to-depot distance {dist[0, end]:.6f}")
    route = [0]
    cur = 0
    left = budget
    unvisited = set(range(1, end))
    while True:
        best, best_ratio = None, -1.0
        for j in sorted(unvisited):
            r = inst.rewards[j]
            d = dist[cur, j]
            if r <= 0 or not math.isfinite(d) or d + dist[j, end] > left + tol:
                continue
            ratio = math.inf if d == 0 else r / d
            if ratio > best_ratio:
                best, best_ratio = j, ratio
        if best is None:
            break
        route.append(best)
        left -= dist[cur, best]
        unvisited.discard(best)
        cur = best
    route.append(end)
    return route


# ---------------------------------------------------------------------------
# Two-step pipeline
# ---------------------------------------------------------------------------

def _segment_free(a: Point, b: Point, obstacles: Sequence[Obstacle]) -> bool:
    return not any(segment_hits_obstacle(a, b, o) for o in obstacles)


def anchor_cell(grid: GridSpec, p: Point, reach: int = 3) -> Cell | None:
    """Grid cell a point enters the grid through.

    That is the point's own cell when free; otherwise the nearest free cell
    within ``reach`` rings whose centre is visible from the point.
    """
    own = grid.cell_of(p)
    if grid.is_free(own):
        return own
    options = []
    for ix in range(own[0] - reach, own[0] + reach + 1):
        for iy in range(own[1] - reach, own[1] + reach + 1):
            c = (ix, iy)
            if grid.is_free(c):
                cc = grid.center(c)
                options.append((math.dist(p, cc), ix, iy))
    for _, ix, iy in sorted(options):
        if _segment_free(p, grid.center((ix, iy)), grid.obstacles):
            return (ix, iy)
    return None


def shortcut(poly: Sequence[Point], obstacles: Sequence[Obstacle]) -> list[Point]:
    """Line-of-sight smoothing: from each kept vertex jump to the furthest
    later vertex reachable by a collision-free segment."""
    out = [poly[0]]
    i = 0
    while i < len(poly) - 1:
        j = len(poly) - 1
        while j > i + 1 and not _segment_free(poly[i], poly[j], obstacles):
            j -= 1
        out.append(poly[j])
        i = j
    return out


def grid_leg(grid: GridSpec, a: Point, b: Point, smooth: bool = True) -> list[Point] | None:
    """Collision-free polyline from ``a`` to ``b`` via grid A*.

    Without smoothing the polyline visits every path-cell centre; the
    segment from a point to the centre of its own free cell, and between
    adjacent free centres, cannot meet a disc. With smoothing, vertices are
    only removed where the replacing segment is checked collision-free.
    """
    ca, cb = anchor_cell(grid, a), anchor_cell(grid, b)
    if ca is None or cb is None:
        return None
    found = astar_cells(grid, ca, cb)
    if found is None:
        return None
    poly = [a] + [grid.center(c) for c in found[0]] + [b]
    return shortcut(poly, grid.obstacles) if smooth else poly


def astar_distance_matrix(inst: NopInstance, grid: GridSpec) -> np.ndarray:
    m = inst.n + 2
    d = np.full((m, m), math.inf)
    np.fill_diagonal(d, 0.0)
    for i in range(m):
        for j in range(i + 1, m):
            leg = grid_leg(grid, inst.nodes[i], inst.nodes[j])
            if leg is not None:
                d[i, j] = d[j, i] = path_length(leg)
    return d


def euclidean_distances(inst: NopInstance, grid: GridSpec) -> np.ndarray:
    """Straight-line distances; nodes the grid cannot reach are at infinity."""
    d = inst.euclidean_matrix().copy()
    for i, p in enumerate(inst.nodes):
        if anchor_cell(grid, p) is None:
            d[i, :] = math.inf
            d[:, i] = math.inf
            d[i, i] = 0.0
    return d


DISTANCE_MODELS = {"euclidean": euclidean_distances, "astar": astar_distance_matrix}


@dataclass
class TwoStepResult:
    route: list[int]
    path: list[Point]
    outcome: str
    report: VerificationReport | None = None
    dropped: list[int] = field(default_factory=list)


def stitch(inst: NopInstance, grid: GridSpec, route: Sequence[int],
           smooth: bool = True) -> list[Point] | None:
    path: list[Point] = [inst.nodes[route[0]]]
    for a, b in zip(route[:-1], route[1:]):
        leg = grid_leg(grid, inst.nodes[a], inst.nodes[b], smooth)
        if leg is None:
            return None
        path.extend(leg[1:])
    return path


def two_step_plan(inst: NopInstance,
                  route_planner: Callable[[NopInstance, np.ndarray, float], list[int]] = greedy_route,
                  eps: float = 0.3, distance: str = "euclidean",
                  grid: GridSpec | None = None, smooth: bool = True) -> TwoStepResult:
    """Plan a route with budget ``T - eps``, then connect it with grid A*.

    If the stitched path is longer than the step budget allows, trailing
    nodes are dropped until it fits or only the depots remain.
    """
    grid = grid or GridSpec.for_instance(inst)
    dist = DISTANCE_MODELS[distance](inst, grid)
    budget_len = inst.max_steps * inst.step_len
    start = inst.nodes[0]
    try:
        route = route_planner(inst, dist, inst.budget_T - eps)
    except InfeasibleError:
        route = [0, inst.end]
    dropped: list[int] = []
    while True:
        path = stitch(inst, grid, route, smooth)
        if path is None:
            if len(route) > 2:
                dropped.append(route.pop(-2))
                continue
            return TwoStepResult([0], [start], TIMEOUT, None, dropped)
        if path_length(path) <= budget_len or len(route) == 2:
            break
        dropped.append(route.pop(-2))
    report = verify_solution(inst, route, path)
    if report.ok:
        outcome = SUCCESS
    elif not report.checks["collision_free"]:
        outcome = COLLISION
    else:
        outcome = TIMEOUT
    return TwoStepResult(route, path, outcome, report, dropped)


def two_step_trace(inst: NopInstance, instance_index: int = -1, eps: float = 0.3,
                   distance: str = "euclidean") -> EpisodeTrace:
    t0 = time.perf_counter()
    res = two_step_plan(inst, eps=eps, distance=distance)
    wall = time.perf_counter() - t0
    return EpisodeTrace(n=inst.n, positions=list(res.path), visited=list(res.route[1:]),
                        outcome=res.outcome, algorithm=ALGO_TWO_STEP,
                        instance_index=instance_index, num_obstacles=len(inst.obstacles),
                        wall_time_s=wall)
