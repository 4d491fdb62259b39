from __future__ import annotations

import hashlib

import numpy as np
import pytest

from naviformer.core import dumps_instance, loads_instance, read_instances
from naviformer.generate import GenConfig, generate_batch, generate_dataset, generate_instance


def test_max_steps_standard():
    inst = generate_instance(GenConfig(n_nodes=20, budget_T=2.0, step_len=0.02))
    assert inst.max_steps == 100
    assert inst.n == 20


def test_same_seed_identical():
    cfg = GenConfig(n_nodes=20, seed=11)
    assert generate_instance(cfg, 5) == generate_instance(cfg, 5)
    assert generate_instance(cfg, 5) != generate_instance(cfg, 6)
    assert generate_instance(cfg, 5) != generate_instance(GenConfig(n_nodes=20, seed=12), 5)


def test_order_independent():
    cfg = GenConfig(n_nodes=10, seed=3)
    forward = generate_batch(cfg, 20)
    backward = [generate_instance(cfg, i) for i in reversed(range(20))][::-1]
    assert forward == backward


def test_streams_are_disjoint():
    cfg = GenConfig(n_nodes=10, seed=3)
    assert generate_instance(cfg, 0, stream=0) != generate_instance(cfg, 0, stream=1)


def test_empty_dataset(tmp_path):
    s = generate_dataset(GenConfig(), 0, tmp_path / "d.jsonl")
    assert s.count == 0
    assert (tmp_path / "d.jsonl").read_bytes() == b""


def test_dataset_digest_stable(tmp_path):
    cfg = GenConfig(n_nodes=20, seed=7)
    a = generate_dataset(cfg, 100, tmp_path / "a.jsonl")
    b = generate_dataset(cfg, 100, tmp_path / "b.jsonl")
    assert a.sha256 == b.sha256
    assert a.sha256 == hashlib.sha256((tmp_path / "a.jsonl").read_bytes()).hexdigest()


def test_large_dataset_round_trip(tmp_path):
    cfg = GenConfig(n_nodes=20, seed=1)
    path = tmp_path / "big.jsonl"
    generate_dataset(cfg, 10_000, path)
    loaded = read_instances(path)
    assert len(loaded) == 10_000
    for i in (0, 1, 4_999, 9_999):
        assert loaded[i] == generate_instance(cfg, i)
    for inst in loaded:
        # construction already validates; check the visible invariants too
        assert inst.rewards[0] == 0 and inst.rewards[-1] == 0
        assert inst.max_steps == 100
        assert 5 <= len(inst.obstacles) <= 20


@pytest.mark.parametrize("n", [10, 20, 50])
def test_invariants_over_many_seeds(n):
    for seed in range(1000 if n == 10 else 200):
        inst = generate_instance(GenConfig(n_nodes=n, seed=seed))
        assert loads_instance(dumps_instance(inst)) == inst
        nodes = inst.node_array
        assert nodes.min() >= 0 and nodes.max() <= 1
        for o in inst.obstacles:
            assert 0.02 <= o.radius <= 0.12
            d2 = ((nodes - (o.cx, o.cy)) ** 2).sum(1)
            assert (d2 >= o.radius ** 2).all()


def test_obstacle_count_statistics_n50():
    cfg = GenConfig.standard(50, seed=2)
    counts = [len(generate_instance(cfg, i).obstacles) for i in range(10_000)]
    assert abs(np.mean(counts) - 12.5) <= 0.2
    assert min(counts) == 5 and max(counts) == 20


def test_config_validation():
    with pytest.raises(ValueError):
        GenConfig(obstacle_count_range=(5, 2))
    with pytest.raises(ValueError):
        GenConfig(radius_range=(0.0, 0.1))
    with pytest.raises(ValueError):
        GenConfig(budget_T=0)
