"""Actor-critic training.

Rollouts run without autograd. Every step's inputs (state features, goal
mask, rasterised maps, chosen actions) are kept, and the log-probabilities
are recomputed in one batched pass with gradients for the update. This
keeps per-step Python overhead out of the backward graph.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import autodiff as ad
from .core import NopInstance
from .env import SUCCESS, BatchEnv, EpisodeTrace
from .generate import GenConfig, generate_batch, instance_rng
from .model import GraphEmbedding, InstanceTensors, ModelConfig, NaviFormer, save_checkpoint

log = logging.getLogger(__name__)

TRAIN_STREAM = 1
SAMPLE_STREAM = 2


@dataclass
class TrainConfig:
    gen: GenConfig = field(default_factory=lambda: GenConfig(
        n_nodes=10, obstacle_count_range=(3, 6), budget_T=1.5))
    model: ModelConfig = field(default_factory=ModelConfig)
    batch: int = 128
    iterations: int = 2000
    lr: float = 1e-4
    entropy_weight: float = 0.0
    critic_weight: float = 1.0
    grad_clip: float = 1.0
    # clip actor and critic gradients separately before summing them; the
    # critic's gradient is orders larger and would otherwise swamp the policy
    separate_clip: bool = True
    advantage_norm: bool = False
    logp_reduction: str = "sum"
    seed: int = 0
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.logp_reduction not in ("mean", "sum"):
            raise ValueError("logp_reduction must be 'mean' or 'sum'")


@dataclass
class IterationRecord:
    iteration: int
    mean_reward: float
    success_rate: float
    node_rate: float
    actor_loss: float
    critic_loss: float
    wall_time_s: float


@dataclass
class TrainReport:
    records: list[IterationRecord] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)

    def write_csv(self, path) -> None:
        names = [f.name for f in fields(IterationRecord)]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(names)
            for r in self.records:
                w.writerow([getattr(r, n) for n in names])


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class StepRecords:
    """Per-step policy inputs kept for the gradient pass (flat, one row per step)."""
    episode: np.ndarray
    step: np.ndarray
    position: np.ndarray
    time_left: np.ndarray
    obstacle_dist: np.ndarray
    last_goal: np.ndarray
    mask: np.ndarray
    goal: np.ndarray
    maps: np.ndarray
    direction: np.ndarray
    logp: np.ndarray


@dataclass
class Rollout:
    instances: list[NopInstance]
    env: BatchEnv
    traces: list[EpisodeTrace]
    records: StepRecords | None
    inputs: InstanceTensors

    def rewards(self) -> np.ndarray:
        """Trainer-side rewards, from the simulator's running accumulators."""
        return np.array([r.total for r in self.env.episode_rewards()])


def episode_uniforms(seed: int, episode_keys, horizon: int) -> np.ndarray:
    """Per-episode uniform streams, ``(B, horizon, 2)``."""
    return np.stack([instance_rng(seed, int(k), SAMPLE_STREAM).random((horizon, 2))
                     for k in episode_keys])


def rollout_batch(model: NaviFormer, instances, mode: str = "sample", seed: int = 0,
                  episode_keys=None, keep_records: bool = False,
                  visit_radius: float | None = None) -> Rollout:
    """Run every instance to completion; returns traces (and step records if asked)."""
    env = BatchEnv(instances, visit_radius)
    inputs = InstanceTensors.from_env(env)
    horizon = int(env.max_steps.max())
    if episode_keys is None:
        episode_keys = range(env.B)
    u_all = episode_uniforms(seed, episode_keys, horizon) if mode == "sample" else None
    rec: dict[str, list] = {k: [] for k in StepRecords.__dataclass_fields__}
    was_training = model.training
    model.eval()
    with torch.no_grad():
        g = model.encode(inputs)
        while not env.done.all():
            idx = env.active
            gi = g.select(idx)
            if keep_records:
                rec["episode"].append(idx.copy())
                rec["step"].append(np.full(len(idx), env.t))
                rec["position"].append(env.pos[idx].copy())
                rec["time_left"].append(env.steps_left[idx] / env.max_steps[idx])
                rec["obstacle_dist"].append(env.obstacle_distances(idx, model.cfg.obstacle_k))
                rec["last_goal"].append(env.last_goal[idx].copy())
                rec["mask"].append(env.goal_mask(idx))
            u = None if u_all is None else u_all[idx, env.t]
            sample, maps = model.act(env, gi, idx, mode, u)
            if keep_records:
                rec["goal"].append(sample.goal)
                rec["maps"].append(maps)
                rec["direction"].append(sample.direction)
                rec["logp"].append(sample.logp)
            env.step(idx, sample.goal, sample.direction, sample.logp_goal, sample.logp_direction)
    model.train(was_training)
    traces = env.finish()
    records = None
    if keep_records:
        records = StepRecords(**{k: np.concatenate(v) for k, v in rec.items()})
    return Rollout(list(instances), env, traces, records, inputs)


def replay_goal_log_probs(model: NaviFormer, rollout: Rollout) -> tuple[torch.Tensor, GraphEmbedding]:
    """Full goal log-distribution ``(M, n+2)`` for every recorded step.

    Goal decoding runs on an (episode, step) grid so each episode's graph
    embedding is attended by all of its steps at once.
    """
    r = rollout.records
    dt = torch.get_default_dtype()
    B = rollout.env.B
    T = int(r.step.max()) + 1
    N2 = rollout.env.N2
    e, t = r.episode, r.step

    def grid(values, fill, dtype=None):
        a = np.full((B, T) + values.shape[1:], fill, dtype=dtype or values.dtype)
        a[e, t] = values
        return a

    pad_mask = np.zeros((B, T, N2), dtype=bool)
    pad_mask[e, t] = r.mask
    g = model.encode(rollout.inputs)
    h = model.embed_state(g, torch.as_tensor(grid(r.position, 0.0), dtype=dt),
                          torch.as_tensor(grid(r.time_left, 0.0), dtype=dt),
                          torch.as_tensor(grid(r.obstacle_dist, 0.0), dtype=dt),
                          torch.as_tensor(grid(r.last_goal, 0)))
    lp_goal = model.decode_goal(h, g, torch.as_tensor(pad_mask))[torch.as_tensor(e), torch.as_tensor(t)]
    return lp_goal, g


def replay_log_probs(model: NaviFormer, rollout: Rollout) -> tuple[torch.Tensor, GraphEmbedding, torch.Tensor]:
    """Recompute per-step log pi(goal) + log pi(direction) with gradients.

    Returns flat ``(logp (M,), graph embedding, entropy (M,))`` aligned with
    the records.
    """
    r = rollout.records
    lp_goal, g = replay_goal_log_probs(model, rollout)
    lp_dir = model.decode_direction(torch.as_tensor(r.maps))
    rows = torch.arange(len(r.goal))
    logp = lp_goal[rows, torch.as_tensor(r.goal)] + lp_dir[rows, torch.as_tensor(r.direction)]
    pg = lp_goal.exp()
    ent_goal = -(pg * torch.where(pg > 0, lp_goal, torch.zeros_like(lp_goal))).sum(-1)
    ent_dir = -(lp_dir.exp() * lp_dir).sum(-1)
    return logp, g, ent_goal + ent_dir


@dataclass
class Losses:
    actor: float
    critic: float
    total: float
    grad_norm: float


def policy_gradient_update(model: NaviFormer, adam: ad.AdamState, rollout: Rollout,
                           cfg: TrainConfig, rewards: np.ndarray | None = None) -> Losses:
    """One actor-critic step on a finished rollout.

    actor  = -mean_b[(R_b - V_b) * agg_t log pi_bt]   (advantage held constant)
    critic =  mean_b[(V_b - R_b)^2]
    """
    if rollout.records is None or rollout.env.B == 0:
        raise ValueError("policy_gradient_update needs a non-empty rollout with step records")
    params = [p for p in model.parameters()]
    dt = torch.get_default_dtype()
    R = torch.as_tensor(rollout.rewards() if rewards is None else rewards, dtype=dt)
    logp, g, ent = replay_log_probs(model, rollout)
    B = rollout.env.B
    ep = torch.as_tensor(rollout.records.episode)
    per_ep = torch.zeros(B, dtype=dt).index_add(0, ep, logp)
    # entropy is aggregated like the log-probs so its weight is per step either way
    ent_ep = torch.zeros(B, dtype=dt).index_add(0, ep, ent)
    if cfg.logp_reduction == "mean":
        counts = torch.zeros(B, dtype=dt).index_add(0, ep, torch.ones_like(logp))
        per_ep = per_ep / counts
        ent_ep = ent_ep / counts
    entropy = ent_ep.mean()
    V = model.critic_value(g)
    adv = (R - V).detach()
    if cfg.advantage_norm:
        adv = normalize_advantages(adv)
    actor = -(adv * per_ep).mean()
    critic = ((V - R) ** 2).mean()
    loss = actor + cfg.critic_weight * critic
    if cfg.entropy_weight:
        loss = loss - cfg.entropy_weight * entropy
    if not torch.isfinite(loss):
        raise NonFiniteLossError(
            f"non-finite loss: actor={float(actor)} critic={float(critic)} "
            f"rewards[min,max]=({float(R.min())}, {float(R.max())})")
    ad.zero_grad(params)
    if cfg.grad_clip and cfg.separate_clip:
        ad.backward(actor - cfg.entropy_weight * entropy, retain_graph=True)
        norm = ad.clip_grad_norm(params, cfg.grad_clip)
        actor_grads = [None if p.grad is None else p.grad.clone() for p in params]
        ad.zero_grad(params)
        ad.backward(cfg.critic_weight * critic)
        ad.clip_grad_norm(params, cfg.grad_clip)
        for p, ga in zip(params, actor_grads):
            if ga is not None:
                p.grad = ga if p.grad is None else p.grad + ga
    else:
        ad.backward(loss)
        norm = ad.clip_grad_norm(params, cfg.grad_clip) if cfg.grad_clip else 0.0
    ad.adam_step(params, [p.grad for p in params], adam, lr=cfg.lr)
    return Losses(actor.item(), critic.item(), loss.item(), norm)


def normalize_advantages(adv: torch.Tensor) -> torch.Tensor:
    adv = adv - adv.mean()
    std = adv.std() if adv.numel() > 1 else torch.ones((), dtype=adv.dtype)
    return adv / (std + 1e-8)


def success_and_node_rate(traces) -> tuple[float, float]:
    succ = float(np.mean([t.outcome == SUCCESS for t in traces]))
    nodes = float(np.mean([t.interior_visited() / (t.n / 2) for t in traces]))
    return succ, nodes


def train(cfg: TrainConfig, out_dir=None, progress: bool = False,
          model: NaviFormer | None = None) -> tuple[NaviFormer, TrainReport]:
    torch.manual_seed(cfg.seed)
    model = model or NaviFormer(cfg.model)
    params = list(model.parameters())
    adam = ad.AdamState.zeros_like(params)
    report = TrainReport()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_config.json").write_text(json.dumps(asdict(cfg), indent=2, default=list))
        p = out / "checkpoint_0000.ckpt"
        save_checkpoint(model, p, {"iteration": 0, "seed": cfg.seed})
        report.checkpoints.append(str(p))

    gen = cfg.gen if cfg.gen.seed == cfg.seed else GenConfig(**{**asdict(cfg.gen), "seed": cfg.seed})
    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        start = it * cfg.batch
        instances = generate_batch(gen, cfg.batch, start=start, stream=TRAIN_STREAM)
        ro = rollout_batch(model, instances, "sample", cfg.seed,
                           episode_keys=range(start, start + cfg.batch), keep_records=True)
        rewards = ro.rewards()
        try:
            losses = policy_gradient_update(model, adam, ro, cfg, rewards)
        except NonFiniteLossError:
            if out is not None:
                save_checkpoint(model, out / "diagnostic.ckpt", {"iteration": it})
                np.save(out / "diagnostic_rewards.npy", rewards)
            raise
        succ, nodes = success_and_node_rate(ro.traces)
        report.records.append(IterationRecord(
            it + 1, float(rewards.mean()), succ, nodes, losses.actor, losses.critic,
            time.perf_counter() - t0))
        if progress and (it + 1) % 10 == 0:
            recent = report.records[-10:]
            log.info("iter %d reward %.3f success %.3f nodes %.3f actor %.4f critic %.3f (%.2fs/it)",
                     it + 1, np.mean([r.mean_reward for r in recent]),
                     np.mean([r.success_rate for r in recent]), np.mean([r.node_rate for r in recent]),
                     losses.actor, losses.critic, np.mean([r.wall_time_s for r in recent]))
        if out is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            p = out / f"checkpoint_{it + 1:04d}.ckpt"
            save_checkpoint(model, p, {"iteration": it + 1, "seed": cfg.seed})
            report.checkpoints.append(str(p))

    if out is not None:
        final = out / "model.ckpt"
        save_checkpoint(model, final, {"iteration": cfg.iterations, "seed": cfg.seed})
        report.checkpoints.append(str(final))
        report.write_csv(out / "train_report.csv")
    return model, report


def evaluate(model: NaviFormer, instances, mode: str = "greedy", seed: int = 0,
             per_instance_timing: bool = False) -> list[EpisodeTrace]:
    """Greedy (or sampled) rollouts; with ``per_instance_timing`` each instance
    is planned alone and its wall time recorded on the trace."""
    if not per_instance_timing:
        return rollout_batch(model, instances, mode, seed).traces
    traces = []
    for i, inst in enumerate(instances):
        t0 = time.perf_counter()
        tr = rollout_batch(model, [inst], mode, seed, episode_keys=[i]).traces[0]
        tr.wall_time_s = time.perf_counter() - t0
        tr.instance_index = i
        traces.append(tr)
    return traces
