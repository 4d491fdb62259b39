"""Simple scripted policies shared by several test modules."""

from __future__ import annotations

import math

import numpy as np

from naviformer.core import DIRECTIONS, segment_hits_obstacle


def heading(dx: float, dy: float) -> int:
    return int(round(math.atan2(dy, dx) / (math.pi / 4))) % 8


def greedy_heading_policy(rng: np.random.Generator | None = None, explore: float = 0.0):
    """Head for the nearest unvisited node (end depot once time runs short),
    sidestepping directions whose next step would collide or leave the square."""

    def policy(state, inst):
        x, y = state.position
        end = inst.end
        d_end = math.dist((x, y), inst.nodes[end])
        goal = end
        if state.steps_left * inst.step_len > d_end * 1.6 + 0.1:
            best = None
            for i in range(1, end):
                if not state.visited[i]:
                    d = math.dist((x, y), inst.nodes[i])
                    if d + math.dist(inst.nodes[i], inst.nodes[end]) < state.steps_left * inst.step_len * 0.6:
                        if best is None or d < best[0]:
                            best = (d, i)
            if best is not None:
                goal = best[1]
        gx, gy = inst.nodes[goal]
        k0 = heading(gx - x, gy - y)
        if rng is not None and rng.random() < explore:
            k0 = int(rng.integers(8))
        for off in (0, 1, -1, 2, -2, 3, -3, 4):
            k = (k0 + off) % 8
            ux, uy = DIRECTIONS[k]
            nx, ny = x + inst.step_len * ux, y + inst.step_len * uy
            if 0 <= nx <= 1 and 0 <= ny <= 1 and not any(
                    segment_hits_obstacle((x, y), (nx, ny), o) for o in inst.obstacles):
                return goal, k
        return goal, k0

    return policy


def random_policy(rng: np.random.Generator):
    def policy(state, inst):
        return int(rng.integers(0, inst.end + 1)), int(rng.integers(8))
    return policy
