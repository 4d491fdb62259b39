"""Encoder-decoder policy for the navigation orienteering problem.

Nodes ``(x, y, reward)`` and obstacles ``(cx, cy, radius)`` are projected to
``hidden`` dims and mixed by stacked combined-attention blocks. At each step a
masked pointer decoder picks the next goal node from the graph embedding and
the agent's state; a small CNN over agent-centred local maps picks one of
eight directions. A critic head reads the pooled graph embedding.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from . import autodiff as ad
from .core import NopInstance
from .env import MAP_SIZE, MAP_WINDOW, AgentState, BatchEnv, LocalMaps, rasterize_batch

NEG_INF = float("-inf")


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 128
    heads: int = 8
    blocks: int = 3
    tanh_clip: float = 10.0
    ff_hidden: int = 512
    conv_channels: tuple[int, int] = (8, 16)
    dense_hidden: int = 128
    map_size: int = MAP_SIZE
    map_window: float = MAP_WINDOW
    obstacle_k: int = 20
    norm: str = "set"

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if self.norm not in ("set", "layer"):
            raise ValueError("norm must be 'set' or 'layer'")
        if self.map_size % 4:
            raise ValueError("map_size must be a multiple of 4")

    @classmethod
    def micro(cls) -> "ModelConfig":
        return cls(hidden=8, heads=2, blocks=1, ff_hidden=16, conv_channels=(2, 4),
                   dense_hidden=8, map_size=8, map_window=0.08, obstacle_k=4)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        bound = 1.0 / math.sqrt(d_in)
        self.weight = nn.Parameter(torch.empty(d_in, d_out).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.empty(d_out).uniform_(-bound, bound)) if bias else None

    def forward(self, x):
        return ad.linear(x, self.weight, self.bias)


class Norm(nn.Module):
    """``set``: each feature normalised over the node (or obstacle) set of one
    instance. ``layer``: each vector normalised over its features. Both are
    independent of the batch."""

    def __init__(self, dim: int, kind: str = "set"):
        super().__init__()
        self.kind = kind
        self.gain = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x, pad_mask=None):
        if self.kind == "layer":
            return ad.layer_norm(x, self.gain, self.bias)
        return ad.set_norm(x, self.gain, self.bias, pad_mask)


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.d = dim // heads
        self.wq = Linear(dim, dim, bias=False)
        self.wk = Linear(dim, dim, bias=False)
        self.wv = Linear(dim, dim, bias=False)
        self.wo = Linear(dim, dim)

    def split(self, x):
        B, N, _ = x.shape
        return x.reshape(B, N, self.heads, self.d).transpose(1, 2)

    def project_kv(self, kv):
        return self.split(self.wk(kv)), self.split(self.wv(kv))

    def attend(self, q, k, v, key_mask=None):
        """``q`` is ``(B, Nq, dim)``; ``k``/``v`` are pre-split ``(B, h, Nk, d)``.

        ``key_mask`` is ``(B, Nk)`` shared by all queries or ``(B, Nq, Nk)``.
        """
        B, Nq, _ = q.shape
        qh = self.split(self.wq(q))
        scores = ad.scale(ad.matmul(qh, k.transpose(-1, -2)), 1.0 / math.sqrt(self.d))
        if key_mask is not None:
            km = key_mask[:, None, None, :] if key_mask.dim() == 2 else key_mask[:, None, :, :]
            m = km.expand(scores.shape)
            scores = ad.masked_fill(scores, m, NEG_INF)
        att = ad.softmax(scores)
        out = ad.matmul(att, v).transpose(1, 2).reshape(B, Nq, self.heads * self.d)
        return self.wo(out)

    def forward(self, q, kv, key_mask=None):
        k, v = self.project_kv(kv)
        return self.attend(q, k, v, key_mask)


class AttentionStage(nn.Module):
    """Attention with skip connection and normalisation.

    ``q_mask`` flags padded query rows, ``key_mask`` padded keys.
    """

    def __init__(self, dim, heads, norm="set"):
        super().__init__()
        self.att = MultiHeadAttention(dim, heads)
        self.norm = Norm(dim, norm)

    def forward(self, q, kv, key_mask=None, q_mask=None):
        return self.norm(ad.add(q, self.att(q, kv, key_mask)), q_mask)


class FeedForward(nn.Module):
    def __init__(self, dim, hidden, norm="set"):
        super().__init__()
        self.l1 = Linear(dim, hidden)
        self.l2 = Linear(hidden, dim)
        self.norm = Norm(dim, norm)

    def forward(self, x, pad_mask=None):
        return self.norm(ad.add(x, self.l2(ad.relu(self.l1(x)))), pad_mask)


class CombinedBlock(nn.Module):
    """One encoder block mixing node self-attention with node/obstacle cross-attention.

    h11 = A(nodes, nodes), h12 = A(nodes, obstacles), h1 = A(h11, h12);
    h21 = A(obstacles, nodes), h22 = A(obstacles, obstacles), h2 = A(h22, h21).
    The obstacle branch is skipped in the last block, whose output is h1 only.
    """

    def __init__(self, dim, heads, ff_hidden, last: bool, norm: str = "set"):
        super().__init__()
        self.last = last
        self.a11 = AttentionStage(dim, heads, norm)
        self.a12 = AttentionStage(dim, heads, norm)
        self.a1 = AttentionStage(dim, heads, norm)
        # the encoder output is normalised per vector so its node mean (read by
        # the critic and the state context) still varies between instances
        self.ff1 = FeedForward(dim, ff_hidden, "layer" if last else norm)
        if not last:
            self.a21 = AttentionStage(dim, heads, norm)
            self.a22 = AttentionStage(dim, heads, norm)
            self.a2 = AttentionStage(dim, heads, norm)
            self.ff2 = FeedForward(dim, ff_hidden, norm)

    def forward(self, h_nodes, h_obs, obs_mask):
        h11 = self.a11(h_nodes, h_nodes)
        h12 = self.a12(h_nodes, h_obs, obs_mask)
        h1 = self.ff1(self.a1(h11, h12))
        if self.last:
            return h1, None
        h21 = self.a21(h_obs, h_nodes, q_mask=obs_mask)
        h22 = self.a22(h_obs, h_obs, obs_mask, q_mask=obs_mask)
        h2 = self.ff2(self.a2(h22, h21, obs_mask, q_mask=obs_mask), obs_mask)
        return h1, h2


@dataclass
class GraphEmbedding:
    nodes: torch.Tensor          # (B, N2, hidden)
    mean: torch.Tensor           # (B, hidden)
    glimpse_k: torch.Tensor | None = None
    glimpse_v: torch.Tensor | None = None
    pointer_k: torch.Tensor | None = None

    def select(self, idx) -> "GraphEmbedding":
        return GraphEmbedding(self.nodes[idx], self.mean[idx],
                              None if self.glimpse_k is None else self.glimpse_k[idx],
                              None if self.glimpse_v is None else self.glimpse_v[idx],
                              None if self.pointer_k is None else self.pointer_k[idx])


@dataclass
class InstanceTensors:
    nodes: torch.Tensor          # (B, N2, 3): x, y, reward
    obstacles: torch.Tensor      # (B, K, 3)
    obstacle_mask: torch.Tensor  # (B, K) True where padded

    @classmethod
    def from_env(cls, env: BatchEnv) -> "InstanceTensors":
        dt = torch.get_default_dtype()
        nodes = np.concatenate([env.coords, env.rewards[..., None]], axis=-1)
        obs = np.where(env.obstacle_mask[..., None], env.obstacles, 0.0)
        return cls(torch.as_tensor(nodes, dtype=dt), torch.as_tensor(obs, dtype=dt),
                   torch.as_tensor(~env.obstacle_mask))


@dataclass
class PolicySample:
    goal: np.ndarray
    direction: np.ndarray
    logp_goal: np.ndarray
    logp_direction: np.ndarray
    goal_probs: np.ndarray
    direction_probs: np.ndarray

    @property
    def logp(self) -> np.ndarray:
        return self.logp_goal + self.logp_direction


def quadrant_masks(size: int) -> torch.Tensor:
    """North, east, south, west half-window masks, shape ``(4, size, size)``."""
    m = torch.zeros(4, size, size)
    h = size // 2
    m[0, :h, :] = 1
    m[1, :, h:] = 1
    m[2, h:, :] = 1
    m[3, :, :h] = 1
    return m


def direction_channels(maps) -> torch.Tensor:
    """Stack the two maps with their north/east/south/west halves: ``(B, 10, H, W)``.

    Half views are the full-size maps with the other half zeroed, in the
    order of ``quadrant_masks``. Built with slice copies, which is several
    times faster than multiplying by the masks.
    """
    m = maps.detach().cpu().numpy() if isinstance(maps, torch.Tensor) else np.asarray(maps)
    B, C, H, W = m.shape
    h, w = H // 2, W // 2
    dt = torch.empty(0).numpy().dtype
    x = np.zeros((B, 5 * C, H, W), dtype=dt)
    x[:, 0:C] = m
    x[:, C:2 * C, :h] = m[:, :, :h]
    x[:, 2 * C:3 * C, :, w:] = m[:, :, :, w:]
    x[:, 3 * C:4 * C, h:] = m[:, :, h:]
    x[:, 4 * C:5 * C, :, :w] = m[:, :, :, :w]
    return torch.from_numpy(x)


class NaviFormer(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        d = cfg.hidden
        self.node_proj = Linear(3, d)
        self.obs_proj = Linear(3, d)
        self.blocks = nn.ModuleList(
            CombinedBlock(d, cfg.heads, cfg.ff_hidden, last=(i == cfg.blocks - 1), norm=cfg.norm)
            for i in range(cfg.blocks))
        self.state_proj = Linear(3 + cfg.obstacle_k + d, d)
        self.context_proj = Linear(d, d)
        self.glimpse = MultiHeadAttention(d, cfg.heads)
        self.pointer_q = Linear(d, d, bias=False)
        self.pointer_k = Linear(d, d, bias=False)
        c1, c2 = cfg.conv_channels
        bound1 = 1.0 / math.sqrt(10 * 9)
        bound2 = 1.0 / math.sqrt(c1 * 9)
        self.conv1_w = nn.Parameter(torch.empty(c1, 10, 3, 3).uniform_(-bound1, bound1))
        self.conv1_b = nn.Parameter(torch.empty(c1).uniform_(-bound1, bound1))
        self.conv2_w = nn.Parameter(torch.empty(c2, c1, 3, 3).uniform_(-bound2, bound2))
        self.conv2_b = nn.Parameter(torch.empty(c2).uniform_(-bound2, bound2))
        flat = c2 * (cfg.map_size // 4) ** 2
        self.dir_fc1 = Linear(flat, cfg.dense_hidden)
        self.dir_fc2 = Linear(cfg.dense_hidden, 8)
        self.critic_fc1 = Linear(d, d)
        self.critic_fc2 = Linear(d, 1)

    # -- encoder -----------------------------------------------------------

    def encode(self, x: InstanceTensors | NopInstance) -> GraphEmbedding:
        if isinstance(x, NopInstance):
            x = InstanceTensors.from_env(BatchEnv([x]))
        if bool(x.obstacle_mask.all(dim=1).any()):
            raise ValueError("every instance needs at least one obstacle")
        h_nodes = self.node_proj(x.nodes)
        h_obs = self.obs_proj(x.obstacles)
        for block in self.blocks:
            h_nodes, h_obs = block(h_nodes, h_obs, x.obstacle_mask)
        g = GraphEmbedding(h_nodes, ad.mean(h_nodes, 1))
        g.glimpse_k, g.glimpse_v = self.glimpse.project_kv(h_nodes)
        g.pointer_k = self.pointer_k(h_nodes)
        return g

    # -- state embedding ---------------------------------------------------

    def embed_state(self, g: GraphEmbedding, position, time_left, obstacle_dist, last_goal) -> torch.Tensor:
        """``position`` (B, 2), ``time_left`` (B,) in [0, 1], ``obstacle_dist`` (B, K),
        ``last_goal`` (B,) column indices. Returns ``(B, hidden)``.

        An extra step axis is accepted: (B, T, ...) inputs give ``(B, T, hidden)``.
        """
        h_last = ad.embedding(g.nodes, last_goal)
        feats = ad.concat([position, time_left[..., None], obstacle_dist, h_last], dim=-1)
        ctx = self.context_proj(g.mean)
        if feats.dim() == 3:
            ctx = ctx[:, None, :].expand(feats.shape[0], feats.shape[1], ctx.shape[-1])
        return ad.add(self.state_proj(feats), ctx)

    def embed_env_state(self, env: BatchEnv, g: GraphEmbedding, idx: np.ndarray) -> torch.Tensor:
        dt = torch.get_default_dtype()
        pos = torch.as_tensor(env.pos[idx], dtype=dt)
        tl = torch.as_tensor(env.steps_left[idx] / env.max_steps[idx], dtype=dt)
        od = torch.as_tensor(env.obstacle_distances(idx, self.cfg.obstacle_k), dtype=dt)
        lg = torch.as_tensor(env.last_goal[idx])
        return self.embed_state(g, pos, tl, od, lg)

    # -- goal decoder ------------------------------------------------------

    def goal_logits(self, h_state: torch.Tensor, g: GraphEmbedding, mask: torch.Tensor) -> torch.Tensor:
        """Masked pointer logits ``(B, N2)``; ``mask`` is True at forbidden nodes.

        With ``h_state`` of shape (B, T, hidden) and ``mask`` (B, T, N2) every
        step of an episode is decoded at once, giving ``(B, T, N2)``.
        """
        if bool(mask.all(dim=-1).any()):
            raise ValueError("every goal is masked")
        single = h_state.dim() == 2
        q = h_state[:, None, :] if single else h_state
        glimpse = self.glimpse.attend(q, g.glimpse_k, g.glimpse_v, mask)
        pq = self.pointer_q(glimpse)                                   # (B, T, d)
        logits = ad.matmul(pq, g.pointer_k.transpose(1, 2))           # (B, T, N2)
        if single:
            logits = logits[:, 0, :]
        logits = ad.scale(ad.tanh(ad.scale(logits, 1.0 / math.sqrt(self.cfg.hidden))), self.cfg.tanh_clip)
        return ad.masked_fill(logits, mask, NEG_INF)

    def decode_goal(self, h_state, g, mask) -> torch.Tensor:
        """Log-probabilities over goal nodes."""
        return ad.log_softmax(self.goal_logits(h_state, g, mask))

    # -- direction head ----------------------------------------------------

    def decode_direction(self, maps) -> torch.Tensor:
        """``maps`` is ``(B, 2, H, W)`` (obstacles, goal). Returns log-probs ``(B, 8)``."""
        x = direction_channels(maps)
        B = x.shape[0]
        x = x.contiguous(memory_format=torch.channels_last)
        x = ad.relu(ad.conv2d(x, self.conv1_w, self.conv1_b, stride=2, padding=1))
        x = ad.relu(ad.conv2d(x, self.conv2_w, self.conv2_b, stride=2, padding=1))
        x = x.reshape(B, -1)
        x = ad.relu(self.dir_fc1(x))
        return ad.log_softmax(self.dir_fc2(x))

    # -- critic ------------------------------------------------------------

    def critic_value(self, g: GraphEmbedding) -> torch.Tensor:
        return self.critic_fc2(ad.relu(self.critic_fc1(g.mean)))[:, 0]

    # -- acting ------------------------------------------------------------

    @torch.no_grad()
    def act(self, env: BatchEnv, g: GraphEmbedding, idx: np.ndarray, mode: str = "greedy",
            uniforms: np.ndarray | None = None) -> tuple[PolicySample, np.ndarray]:
        """Choose (goal, direction) for the episodes ``idx`` of ``env``.

        ``g`` must already be restricted to ``idx``. In ``"sample"`` mode
        ``uniforms`` is ``(len(idx), 2)`` in [0, 1) and drives inverse-CDF
        sampling, so each episode's randomness is its own stream.
        Returns the sample and the rasterised maps used for the direction.
        """
        h = self.embed_env_state(env, g, idx)
        mask = torch.as_tensor(env.goal_mask(idx))
        lp_goal = self.decode_goal(h, g, mask)
        goal = _choose(lp_goal, mode, None if uniforms is None else uniforms[:, 0])
        maps = env.maps(idx, goal, self.cfg.map_size, self.cfg.map_window)
        lp_dir = self.decode_direction(torch.as_tensor(maps))
        direction = _choose(lp_dir, mode, None if uniforms is None else uniforms[:, 1])
        rows = np.arange(len(idx))
        lg = lp_goal.numpy()
        ldr = lp_dir.numpy()
        sample = PolicySample(goal, direction, lg[rows, goal].astype(np.float64),
                              ldr[rows, direction].astype(np.float64), np.exp(lg), np.exp(ldr))
        return sample, maps

    def act_single(self, state: AgentState, inst: NopInstance, mode: str = "greedy",
                   uniforms=None) -> PolicySample:
        """Scalar convenience wrapper: one state of one instance."""
        env = BatchEnv([inst])
        env.pos[0] = state.position
        env.steps_left[0] = state.steps_left
        env.visited[0] = state.visited
        env.last_goal[0] = state.last_goal
        g = self.encode(InstanceTensors.from_env(env))
        u = None if uniforms is None else np.asarray(uniforms, dtype=np.float64).reshape(1, 2)
        sample, _ = self.act(env, g, np.array([0]), mode, u)
        return sample


def _choose(logp: torch.Tensor, mode: str, u: np.ndarray | None) -> np.ndarray:
    if mode == "greedy":
        return logp.argmax(dim=-1).numpy()
    if mode != "sample":
        raise ValueError(f"mode must be 'sample' or 'greedy', got {mode!r}")
    p = logp.double().exp()
    cdf = torch.cumsum(p, dim=-1)
    uu = torch.as_tensor(u, dtype=torch.float64)[:, None] * cdf[:, -1:]
    idx = (cdf <= uu).sum(dim=-1)
    # never land on a zero-probability entry when rounding pushes u past the end
    last_pos = (p.shape[-1] - 1) - torch.argmax((p.flip(-1) > 0).to(torch.int8), dim=-1)
    idx = torch.minimum(idx, last_pos)
    return idx.numpy()


def model_state(model: NaviFormer) -> dict[str, torch.Tensor]:
    return {k: v for k, v in model.state_dict().items()}


def save_checkpoint(model: NaviFormer, path, extra: dict | None = None) -> str:
    meta = {"model_config": model.cfg.to_dict(), "kind": "naviformer"}
    if extra:
        meta.update(extra)
    return ad.save_tensors(path, model_state(model), meta)


def load_checkpoint(path) -> tuple[NaviFormer, dict]:
    tensors, meta = ad.load_tensors(path)
    cfg = ModelConfig(**meta["model_config"])
    model = NaviFormer(cfg)
    dt = next(iter(tensors.values())).dtype
    model.to(dt)
    model.load_state_dict(tensors)
    return model, meta
