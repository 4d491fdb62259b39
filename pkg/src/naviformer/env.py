"""Episode simulation for the navigation orienteering problem.

Two simulators share the same arithmetic: the scalar ``reset``/``step`` pair
over immutable :class:`AgentState` values, and :class:`BatchEnv`, which steps
many episodes at once on numpy arrays. Operation order is kept identical so
the two agree bit for bit; tests rely on it.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .core import DIRECTIONS, DIRECTION_ARRAY, NopInstance, segment_hits_obstacle, segments_hit_obstacles

IN_PROGRESS = "in-progress"
SUCCESS = "success"
COLLISION = "collision-fail"
TIMEOUT = "timeout-fail"
OUT_OF_BOUNDS = "out-of-bounds-fail"
OUTCOMES = (IN_PROGRESS, SUCCESS, COLLISION, TIMEOUT, OUT_OF_BOUNDS)

GAMMA = 10.0
BETA = 0.3
XI_SUCCESS = 20.0
XI_FAILURE = -10.0

MAP_SIZE = 32
MAP_WINDOW = 0.32

TRACE_SCHEMA = "naviformer.trace/1"


class EpisodeError(RuntimeError):
    """Contract violation: stepping a finished episode, scoring an unfinished one."""


@dataclass(frozen=True)
class AgentState:
    position: tuple[float, float]
    steps_left: int
    visited: tuple[bool, ...]
    last_goal: int = 0
    done: bool = False
    outcome: str = IN_PROGRESS
    visit_order: tuple[int, ...] = ()


def reset(inst: NopInstance) -> AgentState:
    visited = [False] * len(inst.nodes)
    visited[0] = True
    return AgentState(position=inst.nodes[0], steps_left=inst.max_steps, visited=tuple(visited))


def step(state: AgentState, inst: NopInstance, direction: int, goal: int | None = None,
         visit_radius: float | None = None) -> AgentState:
    """Move one step of length ``step_len`` along direction ``k * pi / 4``."""
    if state.done:
        raise EpisodeError("step() called on a finished episode")
    if not 0 <= direction < 8:
        raise ValueError(f"direction must be in 0..7, got {direction}")
    rho = inst.step_len if visit_radius is None else visit_radius
    s = inst.step_len
    x, y = state.position
    ux, uy = DIRECTIONS[direction]
    nx = x + s * ux
    ny = y + s * uy
    steps_left = state.steps_left - 1
    last_goal = state.last_goal if goal is None else int(goal)
    new = dict(position=(nx, ny), steps_left=steps_left, last_goal=last_goal)

    if any(segment_hits_obstacle((x, y), (nx, ny), o) for o in inst.obstacles):
        return replace(state, done=True, outcome=COLLISION, **new)
    if nx < 0.0 or nx > 1.0 or ny < 0.0 or ny > 1.0:
        return replace(state, done=True, outcome=OUT_OF_BOUNDS, **new)

    visited = list(state.visited)
    order = list(state.visit_order)
    r2 = rho * rho
    for i, (px, py) in enumerate(inst.nodes):
        if visited[i]:
            continue
        dx = px - nx
        dy = py - ny
        if dx * dx + dy * dy <= r2:
            visited[i] = True
            order.append(i)
    state = replace(state, visited=tuple(visited), visit_order=tuple(order), **new)
    if visited[inst.end]:
        return replace(state, done=True, outcome=SUCCESS)
    if steps_left <= 0:
        return replace(state, done=True, outcome=TIMEOUT)
    return state


# ---------------------------------------------------------------------------
# Local maps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LocalMaps:
    obstacle_map: np.ndarray
    goal_map: np.ndarray

    def _both(self) -> np.ndarray:
        return np.stack([self.obstacle_map, self.goal_map])

    @property
    def z_up(self) -> np.ndarray:
        h = self.obstacle_map.shape[0]
        return self._both()[:, : h // 2, :]

    @property
    def z_down(self) -> np.ndarray:
        h = self.obstacle_map.shape[0]
        return self._both()[:, h // 2:, :]

    @property
    def z_left(self) -> np.ndarray:
        w = self.obstacle_map.shape[1]
        return self._both()[:, :, : w // 2]

    @property
    def z_right(self) -> np.ndarray:
        w = self.obstacle_map.shape[1]
        return self._both()[:, :, w // 2:]

    def stacked(self) -> np.ndarray:
        """The two full grids as a ``(2, H, W)`` array."""
        return self._both()


def rasterize_batch(pos: np.ndarray, goal_xy: np.ndarray, obstacles: np.ndarray,
                    size: int = MAP_SIZE, window: float = MAP_WINDOW) -> np.ndarray:
    """Agent-centred obstacle/goal grids, shape ``(B, 2, size, size)``, bool.

    Row 0 is the northern edge of the window, column 0 the western edge.
    ``obstacles`` is ``(B, K, 3)``; rows with radius <= 0 are padding.
    """
    B = pos.shape[0]
    cs = window / size
    offs = (np.arange(size) + 0.5 - size / 2) * cs
    out = np.zeros((B, 2, size, size), dtype=bool)
    if obstacles.shape[1]:
        # obstacle centre relative to the agent, then compare with cell offsets
        rx = obstacles[..., 0] - pos[:, 0:1]
        ry = obstacles[..., 1] - pos[:, 1:2]
        r = obstacles[..., 2]
        dx = offs[None, None, None, :] - rx[..., None, None]
        dy = -offs[None, None, :, None] - ry[..., None, None]
        inside = (dx * dx + dy * dy <= (r * r)[..., None, None]) & (r > 0)[..., None, None]
        out[:, 0] = inside.any(axis=1)

    gdx = goal_xy[:, 0] - pos[:, 0]
    gdy = goal_xy[:, 1] - pos[:, 1]
    half = window / 2
    m = np.maximum(np.abs(gdx), np.abs(gdy))
    scale = np.where(m > half, half / np.where(m > 0, m, 1.0), 1.0)
    gdx = gdx * scale
    gdy = gdy * scale
    col = np.clip(np.floor(gdx / cs + size / 2).astype(np.int64), 0, size - 1)
    row = np.clip(np.floor(-gdy / cs + size / 2).astype(np.int64), 0, size - 1)
    out[np.arange(B), 1, row, col] = True
    return out


def rasterize_local_maps(state: AgentState, inst: NopInstance, goal: int,
                         size: int = MAP_SIZE, window: float = MAP_WINDOW) -> LocalMaps:
    pos = np.array([state.position], dtype=np.float64)
    g = np.array([inst.nodes[goal]], dtype=np.float64)
    obs = inst.obstacle_array[None]
    grids = rasterize_batch(pos, g, obs, size, window)[0]
    return LocalMaps(grids[0], grids[1])


# ---------------------------------------------------------------------------
# Traces and reward
# ---------------------------------------------------------------------------

@dataclass
class StepRecord:
    position: tuple[float, float]     # pre-move position c_t
    steps_left: int
    goal: int
    direction: int
    logp_goal: float = 0.0
    logp_direction: float = 0.0

    @property
    def logp(self) -> float:
        return self.logp_goal + self.logp_direction


@dataclass
class RewardBreakdown:
    prize: float
    distance_penalty: float
    terminal: float
    total: float


@dataclass
class EpisodeTrace:
    n: int
    steps: list[StepRecord] = field(default_factory=list)
    positions: list[tuple[float, float]] = field(default_factory=list)
    visited: list[int] = field(default_factory=list)
    outcome: str = IN_PROGRESS
    reward: RewardBreakdown | None = None
    algorithm: str = ""
    instance_index: int = -1
    num_obstacles: int = 0
    wall_time_s: float = 0.0

    @property
    def done(self) -> bool:
        return self.outcome != IN_PROGRESS

    @property
    def route(self) -> list[int]:
        return [0] + list(self.visited)

    def interior_visited(self) -> int:
        return sum(1 for i in self.visited if 1 <= i <= self.n)

    def to_dict(self) -> dict:
        d = {
            "schema": TRACE_SCHEMA,
            "algorithm": self.algorithm,
            "instance_index": self.instance_index,
            "n": self.n,
            "num_obstacles": self.num_obstacles,
            "outcome": self.outcome,
            "visited": list(self.visited),
            "positions": [list(p) for p in self.positions],
            "goals": [s.goal for s in self.steps],
            "directions": [s.direction for s in self.steps],
            "steps_left": [s.steps_left for s in self.steps],
            "logp_goal": [s.logp_goal for s in self.steps],
            "logp_direction": [s.logp_direction for s in self.steps],
            "reward": asdict(self.reward) if self.reward is not None else None,
            "wall_time_s": self.wall_time_s,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeTrace":
        if d.get("schema") != TRACE_SCHEMA:
            raise ValueError(f"unsupported trace schema {d.get('schema')!r}, expected {TRACE_SCHEMA!r}")
        positions = [tuple(p) for p in d["positions"]]
        steps = [
            StepRecord(positions[t], sl, g, k, lg, ld)
            for t, (g, k, sl, lg, ld) in enumerate(zip(
                d["goals"], d["directions"], d["steps_left"], d["logp_goal"], d["logp_direction"]))
        ]
        reward = RewardBreakdown(**d["reward"]) if d.get("reward") else None
        return cls(n=d["n"], steps=steps, positions=positions, visited=list(d["visited"]),
                   outcome=d["outcome"], reward=reward, algorithm=d.get("algorithm", ""),
                   instance_index=d.get("instance_index", -1),
                   num_obstacles=d.get("num_obstacles", 0), wall_time_s=d.get("wall_time_s", 0.0))


def write_traces(path, traces: Iterable[EpisodeTrace]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for tr in traces:
            fh.write(json.dumps(tr.to_dict()))
            fh.write("\n")


def read_traces(path) -> list[EpisodeTrace]:
    with open(path, encoding="utf-8") as fh:
        return [EpisodeTrace.from_dict(json.loads(line)) for line in fh if line.strip()]


def combine_reward(interior_count: int, n: int, distance_sum: float, success: bool,
               gamma: float = GAMMA, beta: float = BETA) -> RewardBreakdown:
    prize = gamma * interior_count / (n / 2) if n > 0 else 0.0
    penalty = beta * distance_sum
    xi = XI_SUCCESS if success else XI_FAILURE
    return RewardBreakdown(prize=prize, distance_penalty=penalty, terminal=xi,
                           total=prize - penalty + xi)


def episode_reward(trace: EpisodeTrace, inst: NopInstance,
                   gamma: float = GAMMA, beta: float = BETA) -> RewardBreakdown:
    """Recompute the episode reward from a finished trace.

    The distance term accumulates, per step, the distance from the pre-move
    position to the goal that was active during that step.
    """
    if not trace.done:
        raise EpisodeError("episode_reward() needs a finished trace")
    acc = 0.0
    for rec in trace.steps:
        gx, gy = inst.nodes[rec.goal]
        dx = rec.position[0] - gx
        dy = rec.position[1] - gy
        acc += math.sqrt(dx * dx + dy * dy)
    count = sum(1 for i in trace.visited if 1 <= i <= inst.n)
    return combine_reward(count, inst.n, acc, trace.outcome == SUCCESS, gamma, beta)


def run_episode(inst: NopInstance, policy, visit_radius: float | None = None) -> EpisodeTrace:
    """Drive the scalar simulator with ``policy(state, inst) -> (goal, direction)``."""
    state = reset(inst)
    trace = EpisodeTrace(n=inst.n, positions=[state.position], num_obstacles=len(inst.obstacles))
    while not state.done:
        goal, direction = policy(state, inst)
        trace.steps.append(StepRecord(state.position, state.steps_left, int(goal), int(direction)))
        state = step(state, inst, direction, goal, visit_radius)
        trace.positions.append(state.position)
    trace.visited = list(state.visit_order)
    trace.outcome = state.outcome
    trace.reward = episode_reward(trace, inst)
    return trace


# ---------------------------------------------------------------------------
# Vectorised simulator
# ---------------------------------------------------------------------------

class BatchEnv:
    """Steps a batch of episodes on padded arrays.

    Instances with fewer interior nodes than the largest one are padded with
    dummy nodes (zero reward, pre-marked visited) placed before the end depot,
    so the end depot always sits in the last column.
    """

    def __init__(self, instances: Sequence[NopInstance], visit_radius: float | None = None):
        self.instances = list(instances)
        B = len(self.instances)
        if B == 0:
            raise ValueError("BatchEnv needs at least one instance")
        self.B = B
        self.n_max = max(inst.n for inst in self.instances)
        N2 = self.n_max + 2
        self.N2 = N2
        self.K = max(len(inst.obstacles) for inst in self.instances)
        self.coords = np.zeros((B, N2, 2))
        self.rewards = np.zeros((B, N2))
        self.dummy = np.zeros((B, N2), dtype=bool)
        # padded column -> instance node index (-1 for dummies)
        self.col_to_node = np.full((B, N2), -1, dtype=np.int64)
        self.obstacles = np.zeros((B, self.K, 3))
        self.obstacles[..., 2] = -1.0
        self.obstacle_mask = np.zeros((B, self.K), dtype=bool)
        self.n = np.array([inst.n for inst in self.instances])
        self.step_len = np.array([inst.step_len for inst in self.instances])
        self.max_steps = np.array([inst.max_steps for inst in self.instances])
        if visit_radius is None:
            self.rho = self.step_len.copy()
        else:
            self.rho = np.full(B, float(visit_radius))
        for b, inst in enumerate(self.instances):
            pts = inst.node_array
            n = inst.n
            self.coords[b, : n + 1] = pts[: n + 1]
            self.coords[b, N2 - 1] = pts[n + 1]
            self.coords[b, n + 1: N2 - 1] = pts[0]
            self.rewards[b, : n + 1] = inst.rewards[: n + 1]
            self.dummy[b, n + 1: N2 - 1] = True
            self.col_to_node[b, : n + 1] = np.arange(n + 1)
            self.col_to_node[b, N2 - 1] = n + 1
            k = len(inst.obstacles)
            if k:
                self.obstacles[b, :k] = inst.obstacle_array
                self.obstacle_mask[b, :k] = True
        self.reset()

    def reset(self) -> None:
        B = self.B
        self.pos = self.coords[:, 0].copy()
        self.steps_left = self.max_steps.copy()
        self.visited = self.dummy.copy()
        self.visited[:, 0] = True
        self.last_goal = np.zeros(B, dtype=np.int64)
        self.done = np.zeros(B, dtype=bool)
        self.outcome = np.zeros(B, dtype=np.int64)   # index into OUTCOMES
        self.dist_acc = np.zeros(B)
        self.t = 0
        self.traces = [
            EpisodeTrace(n=inst.n, positions=[inst.nodes[0]], num_obstacles=len(inst.obstacles),
                         instance_index=b)
            for b, inst in enumerate(self.instances)
        ]

    @property
    def active(self) -> np.ndarray:
        return np.flatnonzero(~self.done)

    def goal_mask(self, idx: np.ndarray | None = None) -> np.ndarray:
        """Columns that may not be chosen as goals (visited or dummy)."""
        m = self.visited if idx is None else self.visited[idx]
        m = m.copy()
        m[:, -1] = False
        return m

    def node_columns(self, b: int, node: int) -> int:
        return self.N2 - 1 if node == self.instances[b].n + 1 else node

    def maps(self, idx: np.ndarray, goal_cols: np.ndarray, size: int = MAP_SIZE,
             window: float = MAP_WINDOW) -> np.ndarray:
        goal_xy = self.coords[idx, goal_cols]
        return rasterize_batch(self.pos[idx], goal_xy, self.obstacles[idx], size, window)

    def step(self, idx: np.ndarray, goal_cols: np.ndarray, directions: np.ndarray,
             logp_goal: np.ndarray | None = None, logp_dir: np.ndarray | None = None) -> None:
        idx = np.asarray(idx, dtype=np.int64)
        if self.done[idx].any():
            raise EpisodeError("step() on a finished episode")
        goal_cols = np.asarray(goal_cols, dtype=np.int64)
        directions = np.asarray(directions, dtype=np.int64)
        old = self.pos[idx]
        g = self.coords[idx, goal_cols]
        dx = old[:, 0] - g[:, 0]
        dy = old[:, 1] - g[:, 1]
        self.dist_acc[idx] += np.sqrt(dx * dx + dy * dy)

        s = self.step_len[idx]
        u = DIRECTION_ARRAY[directions]
        new = np.empty_like(old)
        new[:, 0] = old[:, 0] + s * u[:, 0]
        new[:, 1] = old[:, 1] + s * u[:, 1]
        self.steps_left[idx] -= 1

        for j, b in enumerate(idx):
            tr = self.traces[b]
            tr.steps.append(StepRecord(
                (float(old[j, 0]), float(old[j, 1])), int(self.steps_left[b] + 1),
                int(self.col_to_node[b, goal_cols[j]]), int(directions[j]),
                0.0 if logp_goal is None else float(logp_goal[j]),
                0.0 if logp_dir is None else float(logp_dir[j])))
            tr.positions.append((float(new[j, 0]), float(new[j, 1])))
        self.pos[idx] = new
        self.last_goal[idx] = goal_cols

        hit = segments_hit_obstacles(old, new, self.obstacles[idx])
        oob = (new[:, 0] < 0.0) | (new[:, 0] > 1.0) | (new[:, 1] < 0.0) | (new[:, 1] > 1.0)
        alive = ~hit & ~oob

        cdx = self.coords[idx, :, 0] - new[:, 0:1]
        cdy = self.coords[idx, :, 1] - new[:, 1:2]
        rho = self.rho[idx]
        near = cdx * cdx + cdy * cdy <= (rho * rho)[:, None]
        fresh = near & ~self.visited[idx] & alive[:, None]
        for j in np.flatnonzero(fresh.any(axis=1)):
            b = idx[j]
            cols = np.flatnonzero(fresh[j])
            self.traces[b].visited.extend(int(self.col_to_node[b, c]) for c in cols)
        self.visited[idx] |= fresh

        success = alive & self.visited[idx, -1]
        timeout = alive & ~success & (self.steps_left[idx] <= 0)
        out = np.zeros(len(idx), dtype=np.int64)
        out[hit] = OUTCOMES.index(COLLISION)
        out[~hit & oob] = OUTCOMES.index(OUT_OF_BOUNDS)
        out[success] = OUTCOMES.index(SUCCESS)
        out[timeout] = OUTCOMES.index(TIMEOUT)
        self.outcome[idx] = out
        self.done[idx] = out != 0
        self.t += 1
        for j in np.flatnonzero(out != 0):
            b = idx[j]
            self.traces[b].outcome = OUTCOMES[out[j]]

    def episode_rewards(self, gamma: float = GAMMA, beta: float = BETA) -> list[RewardBreakdown]:
        """Trainer-side reward from the running accumulators (not from traces)."""
        if not self.done.all():
            raise EpisodeError("rewards requested before every episode finished")
        out = []
        for b, inst in enumerate(self.instances):
            interior = self.visited[b, 1: -1] & ~self.dummy[b, 1: -1]
            count = int(interior.sum())
            out.append(combine_reward(count, inst.n, float(self.dist_acc[b]),
                                  self.outcome[b] == OUTCOMES.index(SUCCESS), gamma, beta))
        return out

    def finish(self) -> list[EpisodeTrace]:
        rewards = self.episode_rewards()
        for tr, r in zip(self.traces, rewards):
            tr.reward = r
        return self.traces

    def obstacle_distances(self, idx: np.ndarray, k: int) -> np.ndarray:
        """Surface distances to the ``k`` nearest obstacles, ascending, zero-padded."""
        obs = self.obstacles[idx]
        p = self.pos[idx]
        d = np.sqrt(((obs[..., :2] - p[:, None, :]) ** 2).sum(-1)) - obs[..., 2]
        d = np.where(self.obstacle_mask[idx], d, np.inf)
        d = np.sort(d, axis=1)[:, :k]
        out = np.zeros((len(idx), k))
        w = d.shape[1]
        out[:, :w] = np.where(np.isfinite(d), d, 0.0)
        return out
