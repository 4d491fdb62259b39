"""Instance model, planar geometry and the solution verifier.

An instance holds ``n + 2`` nodes: index 0 is the start depot, index ``n + 1``
the end depot and everything in between is a prize-carrying region.
Obstacles are closed discs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

Point = tuple[float, float]
Route = list[int]
Polyline = list[Point]

# Direction table shared by every simulator. Axis directions are exact so a
# step along k=0,2,4,6 does not pick up cos/sin rounding noise.
_H = math.sqrt(0.5)
DIRECTIONS: tuple[Point, ...] = (
    (1.0, 0.0), (_H, _H), (0.0, 1.0), (-_H, _H),
    (-1.0, 0.0), (-_H, -_H), (0.0, -1.0), (_H, -_H),
)
DIRECTION_ARRAY = np.array(DIRECTIONS, dtype=np.float64)


class InstanceError(ValueError):
    """Raised when an instance violates its structural invariants."""


class RouteStructureError(ValueError):
    """Raised for malformed routes (indices out of range, empty route)."""


def steps_for_budget(budget_T: float, step_len: float) -> int:
    # round() guards against T/t_s landing a hair under an integer
    return int(math.floor(round(budget_T / step_len, 9)))


@dataclass(frozen=True)
class Obstacle:
    cx: float
    cy: float
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise InstanceError(f"obstacle radius must be positive, got {self.radius}")

    def contains(self, x: float, y: float, strict: bool = False) -> bool:
        dx = x - self.cx
        dy = y - self.cy
        d2 = dx * dx + dy * dy
        r2 = self.radius * self.radius
        return d2 < r2 if strict else d2 <= r2


@dataclass(frozen=True)
class NopInstance:
    nodes: tuple[Point, ...]
    rewards: tuple[float, ...]
    obstacles: tuple[Obstacle, ...]
    budget_T: float
    step_len: float

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple((float(x), float(y)) for x, y in self.nodes))
        object.__setattr__(self, "rewards", tuple(float(r) for r in self.rewards))
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        if len(self.nodes) < 2:
            raise InstanceError("an instance needs at least the two depots")
        if len(self.rewards) != len(self.nodes):
            raise InstanceError(
                f"rewards ({len(self.rewards)}) not aligned with nodes ({len(self.nodes)})")
        if self.rewards[0] != 0 or self.rewards[-1] != 0:
            raise InstanceError("depots must carry zero reward")
        if any(r < 0 for r in self.rewards):
            raise InstanceError("rewards must be non-negative")
        if not (self.budget_T > 0 and self.step_len > 0):
            raise InstanceError("budget_T and step_len must be positive")
        for i, (x, y) in enumerate(self.nodes):
            if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
                raise InstanceError(f"node {i} at ({x}, {y}) lies outside the unit square")
            for o in self.obstacles:
                if o.contains(x, y, strict=True):
                    raise InstanceError(f"node {i} lies strictly inside obstacle {o}")

    @property
    def n(self) -> int:
        """Number of interior (prize) nodes."""
        return len(self.nodes) - 2

    @property
    def end(self) -> int:
        return len(self.nodes) - 1

    @property
    def max_steps(self) -> int:
        return steps_for_budget(self.budget_T, self.step_len)

    @cached_property
    def node_array(self) -> np.ndarray:
        return np.array(self.nodes, dtype=np.float64)

    @cached_property
    def obstacle_array(self) -> np.ndarray:
        if not self.obstacles:
            return np.zeros((0, 3), dtype=np.float64)
        return np.array([(o.cx, o.cy, o.radius) for o in self.obstacles], dtype=np.float64)

    def euclidean_matrix(self) -> np.ndarray:
        p = self.node_array
        diff = p[:, None, :] - p[None, :, :]
        return np.sqrt((diff ** 2).sum(-1))


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

def segment_hits_obstacle(p: Sequence[float], q: Sequence[float], obs: Obstacle) -> bool:
    """True iff the closed segment ``pq`` meets the closed disc of ``obs``."""
    px, py = p
    qx, qy = q
    ux = qx - px
    uy = qy - py
    wx = obs.cx - px
    wy = obs.cy - py
    uu = ux * ux + uy * uy
    if uu > 0.0:
        t = (wx * ux + wy * uy) / uu
        t = 0.0 if t < 0.0 else (1.0 if t > 1.0 else t)
    else:
        t = 0.0
    dx = wx - t * ux
    dy = wy - t * uy
    return dx * dx + dy * dy <= obs.radius * obs.radius


def segments_hit_obstacles(p: np.ndarray, q: np.ndarray, obstacles: np.ndarray) -> np.ndarray:
    """Vectorised :func:`segment_hits_obstacle`.

    ``p`` and ``q`` are ``(B, 2)``; ``obstacles`` is ``(B, K, 3)`` with padded
    rows carrying radius ``-1``. Returns a ``(B,)`` boolean array. Operation
    order matches the scalar routine so both agree bit for bit.
    """
    ux = (q[:, 0] - p[:, 0])[:, None]
    uy = (q[:, 1] - p[:, 1])[:, None]
    wx = obstacles[..., 0] - p[:, 0:1]
    wy = obstacles[..., 1] - p[:, 1:2]
    uu = ux * ux + uy * uy
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(uu > 0.0, (wx * ux + wy * uy) / np.where(uu > 0.0, uu, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    dx = wx - t * ux
    dy = wy - t * uy
    r = obstacles[..., 2]
    hit = (dx * dx + dy * dy <= r * r) & (r > 0)
    return hit.any(axis=1)


def path_length(path: Sequence[Sequence[float]]) -> float:
    total = 0.0
    for (x0, y0), (x1, y1) in zip(path[:-1], path[1:]):
        total += math.hypot(x1 - x0, y1 - y0)
    return total


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------

CONSTRAINTS = (
    "starts_at_depot",
    "ends_at_depot",
    "no_revisit_continuity",
    "no_immediate_revisit",
    "within_budget",
    "collision_free",
    "no_subtour",
)


@dataclass
class VerificationReport:
    checks: dict[str, bool]
    prize: float
    path_length: float
    budget_length: float
    lower_bound: float
    lower_bound_ok: bool
    messages: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(self.checks.values())

    def failed(self) -> list[str]:
        return [k for k, v in self.checks.items() if not v]


def _close(a: Point, b: Point, radius: float) -> bool:
    dx = a[0] - b[0]
    dy = a[1] - b[1]
    return dx * dx + dy * dy <= radius * radius


def verify_solution(inst: NopInstance, route: Sequence[int], path: Sequence[Point],
                    visit_radius: float | None = None, tol: float = 1e-9) -> VerificationReport:
    """Check a route/path pair against every NOP constraint.

    ``visit_radius`` (default ``step_len``) is how close the path must come to
    a node for it to count as reached.
    """
    route = [int(i) for i in route]
    path = [(float(x), float(y)) for x, y in path]
    if not route:
        raise RouteStructureError("route is empty")
    if not path:
        raise RouteStructureError("path is empty")
    for i in route:
        if not 0 <= i <= inst.end:
            raise RouteStructureError(f"node index {i} out of range [0, {inst.end}]")
    rho = inst.step_len if visit_radius is None else visit_radius
    end = inst.end
    n = inst.n
    msgs: list[str] = []
    checks: dict[str, bool] = {}

    starts = route[0] == 0 and route.count(0) == 1 and _close(path[0], inst.nodes[0], tol)
    checks["starts_at_depot"] = starts
    if not starts:
        msgs.append("route/path does not leave from the start depot exactly once")

    ends = route[-1] == end and route.count(end) == 1 and _close(path[-1], inst.nodes[end], rho)
    checks["ends_at_depot"] = ends
    if not ends:
        msgs.append("route/path does not finish at the end depot")

    # each node entered/left at most once, and the path must actually reach
    # the route's nodes in order
    unique = len(set(route)) == len(route)
    cursor = 0
    reached = True
    for idx in route:
        target = inst.nodes[idx]
        while cursor < len(path) and not _close(path[cursor], target, rho):
            cursor += 1
        if cursor == len(path):
            reached = False
            break
    checks["no_revisit_continuity"] = unique and reached
    if not unique:
        msgs.append("route revisits a node")
    if not reached:
        msgs.append("path does not reach the route's nodes in order")

    checks["no_immediate_revisit"] = all(a != b for a, b in zip(route[:-1], route[1:]))

    length = path_length(path)
    budget_len = inst.max_steps * inst.step_len
    checks["within_budget"] = length <= budget_len + tol
    if not checks["within_budget"]:
        msgs.append(f"path length {length:.6f} exceeds budget {budget_len:.6f}")
    lower = math.dist(inst.nodes[0], inst.nodes[end])

    free = True
    for x, y in path:
        if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
            free = False
            msgs.append(f"path leaves the unit square at ({x:.4f}, {y:.4f})")
            break
    if free:
        for a, b in zip(path[:-1], path[1:]):
            if any(segment_hits_obstacle(a, b, o) for o in inst.obstacles):
                free = False
                msgs.append(f"segment {a} -> {b} collides")
                break
    checks["collision_free"] = free

    # MTZ form: u_i - u_j + n*phi_ij <= n - 1 for consecutive interior pairs
    order: dict[int, int] = {}
    for pos, idx in enumerate(route):
        order.setdefault(idx, pos)
    subtour_ok = True
    for a, b in zip(route[:-1], route[1:]):
        if 1 <= a <= n and 1 <= b <= n and order[a] - order[b] + n > n - 1:
            subtour_ok = False
    checks["no_subtour"] = subtour_ok and unique

    prize = sum(inst.rewards[i] for i in set(route))
    return VerificationReport(checks=checks, prize=prize, path_length=length,
                              budget_length=budget_len, lower_bound=lower,
                              lower_bound_ok=length + tol >= lower, messages=msgs)


# ---------------------------------------------------------------------------
# Serialization: one JSON object per line, fixed key order, %.9g reals
# ---------------------------------------------------------------------------

def _fmt(v: float) -> str:
    return format(float(v), ".9g")


def quantize(v: float) -> float:
    """Round to the 9 significant digits the text format keeps."""
    return float(_fmt(v))


def dumps_instance(inst: NopInstance) -> str:
    nodes = ", ".join(f"[{_fmt(x)}, {_fmt(y)}]" for x, y in inst.nodes)
    rewards = ", ".join(_fmt(r) for r in inst.rewards)
    obstacles = ", ".join(f"[{_fmt(o.cx)}, {_fmt(o.cy)}, {_fmt(o.radius)}]" for o in inst.obstacles)
    return (f'{{"nodes": [{nodes}], "rewards": [{rewards}], "obstacles": [{obstacles}], '
            f'"budget_T": {_fmt(inst.budget_T)}, "step_len": {_fmt(inst.step_len)}}}')


def loads_instance(line: str) -> NopInstance:
    d = json.loads(line)
    missing = {"nodes", "rewards", "obstacles", "budget_T", "step_len"} - d.keys()
    if missing:
        raise InstanceError(f"instance record missing keys: {sorted(missing)}")
    return NopInstance(
        nodes=tuple((x, y) for x, y in d["nodes"]),
        rewards=tuple(d["rewards"]),
        obstacles=tuple(Obstacle(cx, cy, r) for cx, cy, r in d["obstacles"]),
        budget_T=d["budget_T"],
        step_len=d["step_len"],
    )


def write_instances(path, instances: Iterable[NopInstance]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for inst in instances:
            fh.write(dumps_instance(inst))
            fh.write("\n")
            count += 1
    return count


def read_instances(path) -> list[NopInstance]:
    with open(path, encoding="utf-8") as fh:
        return [loads_instance(line) for line in fh if line.strip()]
