"""Dense tensor ops with reverse-mode gradients, plus Adam and checkpoints.

Tensors and the gradient tape come from torch; this module pins down the
op surface the model is allowed to use and enforces its shape rules
(no broadcasting except over leading dimensions). Two precision modes are
available: ``"wide"`` (float64, used by gradient checks) and ``"standard"``
(float32, used for training).

Checkpoint container layout (all integers little-endian)::

    offset 0   8 bytes   magic  b"NAVCKPT\\x00"
    offset 8   u32       container version (currently 1)
    offset 12  u32       manifest length M in bytes
    offset 16  M bytes   manifest, UTF-8 JSON with sorted keys:
                         {"version": 1, "meta": {...},
                          "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
                         "offset" is relative to the start of the data block;
                         "dtype" is "float32" or "float64"
    16 + M     data      raw C-order little-endian tensor values, concatenated
    end - 32   32 bytes  SHA-256 over every preceding byte
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

Tensor = torch.Tensor

PRECISIONS = {"wide": torch.float64, "standard": torch.float32}

MAGIC = b"NAVCKPT\x00"
CONTAINER_VERSION = 1


class DimensionError(ValueError):
    pass


def set_precision(mode: str) -> None:
    torch.set_default_dtype(PRECISIONS[mode])


@contextlib.contextmanager
def precision(mode: str):
    prev = torch.get_default_dtype()
    torch.set_default_dtype(PRECISIONS[mode])
    try:
        yield
    finally:
        torch.set_default_dtype(prev)


def tensor(values, requires_grad: bool = False) -> Tensor:
    return torch.tensor(np.asarray(values), dtype=torch.get_default_dtype(),
                        requires_grad=requires_grad)


def _shape(t: Tensor) -> tuple[int, ...]:
    return tuple(t.shape)


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``(..., m, k) @ (k, n)`` or batched ``(..., m, k) @ (..., k, n)``."""
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {_shape(a)} and {_shape(b)}")
    if b.dim() > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: leading dimensions differ in {_shape(a)} and {_shape(b)}")
    return a @ b


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and a.shape[a.dim() - b.dim():] != b.shape:
        raise DimensionError(f"add: shapes {_shape(a)} and {_shape(b)} do not align")
    return a + b


def scale(a: Tensor, s: float) -> Tensor:
    return a * s


def concat(tensors: Sequence[Tensor], dim: int = -1) -> Tensor:
    ref = tensors[0]
    d = dim % ref.dim()
    for t in tensors[1:]:
        if t.dim() != ref.dim() or any(t.shape[i] != ref.shape[i] for i in range(ref.dim()) if i != d):
            raise DimensionError(f"concat: shapes {_shape(ref)} and {_shape(t)} differ off axis {dim}")
    return torch.cat(list(tensors), dim=dim)


def slice_(a: Tensor, dim: int, start: int, stop: int) -> Tensor:
    return a.narrow(dim, start, stop - start)


def softmax(a: Tensor) -> Tensor:
    return torch.softmax(a, dim=-1)


def log_softmax(a: Tensor) -> Tensor:
    return torch.log_softmax(a, dim=-1)


def tanh(a: Tensor) -> Tensor:
    return torch.tanh(a)


def relu(a: Tensor) -> Tensor:
    return torch.relu(a)


def mean(a: Tensor, dim: int) -> Tensor:
    return a.mean(dim=dim)


def total(a: Tensor) -> Tensor:
    return a.sum()


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """``x`` is ``(B, C, H, W)``, ``w`` is ``(O, C, kh, kw)``; zero padding."""
    if x.dim() != 4 or w.dim() != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input {_shape(x)} and kernel {_shape(w)} incompatible")
    if stride not in (1, 2):
        raise ValueError(f"conv2d supports stride 1 or 2, got {stride}")
    return F.conv2d(x, w, b, stride=stride, padding=padding)


def embedding(table: Tensor, idx: Tensor) -> Tensor:
    """Row lookup: ``(V, D)[idx]`` or per-batch ``(B, V, D)[b, idx[b, ...]]``."""
    if table.dim() == 2:
        return table[idx]
    if table.dim() == 3 and idx.dim() == 1 and idx.shape[0] == table.shape[0]:
        return table[torch.arange(table.shape[0]), idx]
    if table.dim() == 3 and idx.dim() == 2 and idx.shape[0] == table.shape[0]:
        return table[torch.arange(table.shape[0])[:, None], idx]
    raise DimensionError(f"embedding: table {_shape(table)} and index {_shape(idx)} incompatible")


def masked_fill(a: Tensor, mask: Tensor, value: float) -> Tensor:
    if mask.shape != a.shape:
        raise DimensionError(f"masked_fill: mask {_shape(mask)} vs values {_shape(a)}")
    return a.masked_fill(mask, value)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    return F.layer_norm(x, (x.shape[-1],), gain, bias, eps)


def set_norm(x: Tensor, gain: Tensor, bias: Tensor, pad_mask: Tensor | None = None,
             eps: float = 1e-5) -> Tensor:
    """Normalise each feature over the set axis of ``x`` (B, N, d), per instance.

    Rows flagged in ``pad_mask`` (B, N) are excluded from the statistics.
    """
    if x.dim() != 3:
        raise DimensionError(f"set_norm expects (B, N, d), got {_shape(x)}")
    if pad_mask is None:
        mu = x.mean(1, keepdim=True)
        var = ((x - mu) ** 2).mean(1, keepdim=True)
    else:
        w = (~pad_mask).to(x.dtype)[..., None]
        cnt = w.sum(1, keepdim=True).clamp_min(1.0)
        mu = (x * w).sum(1, keepdim=True) / cnt
        var = (((x - mu) ** 2) * w).sum(1, keepdim=True) / cnt
    return (x - mu) / torch.sqrt(var + eps) * gain + bias


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    if loss.numel() != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {_shape(loss)}")
    loss.backward(retain_graph=retain_graph)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    norm = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads))
    if norm > max_norm:
        coef = max_norm / (norm + 1e-12)
        for g in grads:
            g.mul_(coef)
    return norm


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[Tensor]
    v: list[Tensor]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[Tensor | None], state: AdamState,
              lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise DimensionError("adam_step: params, grads and moments are not aligned")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if g is None:
                continue
            if g.shape != p.shape or m.shape != p.shape:
                raise DimensionError(f"adam_step: grad {_shape(g)} vs param {_shape(p)}")
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            denom = (v / bc2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / bc1)
    return state


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

def save_tensors(path, tensors: dict[str, Tensor], meta: dict | None = None) -> str:
    """Write a checkpoint container; returns the hex digest."""
    entries = []
    chunks = []
    offset = 0
    for name in tensors:
        arr = tensors[name].detach().cpu().numpy()
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        raw = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"version": CONTAINER_VERSION, "meta": meta or {}, "tensors": entries},
                          sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<II", CONTAINER_VERSION, len(manifest)) + manifest + b"".join(chunks)
    digest = hashlib.sha256(body).digest()
    Path(path).write_bytes(body + digest)
    return digest.hex()


def load_tensors(path) -> tuple[dict[str, Tensor], dict]:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint container")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ValueError(f"{path}: digest mismatch, file is corrupt")
    version, mlen = struct.unpack("<II", body[8:16])
    if version != CONTAINER_VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    manifest = json.loads(body[16:16 + mlen].decode("utf-8"))
    data = body[16 + mlen:]
    out = {}
    for e in manifest["tensors"]:
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        arr = np.frombuffer(data, dtype=dt, count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=e["offset"]).reshape(e["shape"])
        out[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    return out, manifest["meta"]
