"""Synthetic scenario generation.

Every instance draws from its own counter-based Philox stream keyed by
``(seed, index)``, so a dataset is reproducible whatever order (or process)
its instances are generated in.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import NopInstance, Obstacle, quantize, write_instances

# (n, T) pairs used for the synthetic benchmark sizes
STANDARD_BUDGETS = {20: 2.0, 50: 3.0, 100: 4.0}
MAX_RESAMPLE = 10_000


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class GenConfig:
    n_nodes: int = 20
    obstacle_count_range: tuple[int, int] = (5, 20)
    radius_range: tuple[float, float] = (0.02, 0.12)
    budget_T: float = 2.0
    step_len: float = 0.02
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.obstacle_count_range
        if self.n_nodes < 0 or lo < 0 or hi < lo:
            raise ValueError(f"bad node/obstacle counts in {self}")
        rlo, rhi = self.radius_range
        if not 0 < rlo <= rhi:
            raise ValueError(f"bad radius range {self.radius_range}")
        if self.budget_T <= 0 or self.step_len <= 0:
            raise ValueError("budget_T and step_len must be positive")

    @classmethod
    def standard(cls, n_nodes: int, seed: int = 0, **kw) -> "GenConfig":
        return cls(n_nodes=n_nodes, budget_T=STANDARD_BUDGETS.get(n_nodes, 2.0), seed=seed, **kw)


def instance_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, stream, index])
    return np.random.Generator(np.random.Philox(ss))


def _inside_any(x: float, y: float, obstacles: list[Obstacle]) -> bool:
    return any(o.contains(x, y, strict=True) for o in obstacles)


def generate_instance(cfg: GenConfig, index: int = 0, stream: int = 0) -> NopInstance:
    rng = instance_rng(cfg.seed, index, stream)
    lo, hi = cfg.obstacle_count_range
    b = int(rng.integers(lo, hi + 1))
    rlo, rhi = cfg.radius_range
    obstacles = []
    for _ in range(b):
        cx, cy = rng.random(2)
        r = rng.uniform(rlo, rhi)
        obstacles.append(Obstacle(quantize(cx), quantize(cy), quantize(r)))

    nodes = []
    for _ in range(cfg.n_nodes + 2):
        for _attempt in range(MAX_RESAMPLE):
            x, y = (quantize(v) for v in rng.random(2))
            if not _inside_any(x, y, obstacles):
                break
        else:
            raise GenerationError(
                f"could not place a node outside {b} obstacles after {MAX_RESAMPLE} draws")
        nodes.append((x, y))
    rewards = [0.0] + [1.0] * cfg.n_nodes + [0.0]
    return NopInstance(tuple(nodes), tuple(rewards), tuple(obstacles),
                       quantize(cfg.budget_T), quantize(cfg.step_len))


def generate_batch(cfg: GenConfig, count: int, start: int = 0, stream: int = 0) -> list[NopInstance]:
    return [generate_instance(cfg, start + i, stream) for i in range(count)]


@dataclass
class DatasetSummary:
    path: str
    count: int
    seed: int
    sha256: str


def generate_dataset(cfg: GenConfig, count: int, path: str | os.PathLike) -> DatasetSummary:
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    written = write_instances(path, (generate_instance(cfg, i) for i in range(count)))
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    return DatasetSummary(str(path), written, cfg.seed, digest)


def with_seed(cfg: GenConfig, seed: int) -> GenConfig:
    return replace(cfg, seed=seed)
