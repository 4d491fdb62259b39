from __future__ import annotations

import json
import struct

import numpy as np
import pytest
import torch

from naviformer import autodiff as ad

H = 1e-3
CASES = 50


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / den)


def fd_grad(loss_fn, x: torch.Tensor, h: float = H) -> np.ndarray:
    """Central finite differences of a scalar function of one tensor."""
    g = np.zeros(x.numel())
    flat = x.detach().clone().reshape(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        fp = loss_fn(flat.reshape(x.shape)).item()
        flat[i] = old - h
        fm = loss_fn(flat.reshape(x.shape)).item()
        flat[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g.reshape(x.shape)


def check_op(op, inputs: list[torch.Tensor], rng, tol: float = 1e-4) -> float:
    """Gradient of sum(op(*inputs) * W) for each input vs finite differences."""
    with torch.no_grad():
        out = op(*inputs)
    w = torch.as_tensor(rng.normal(size=tuple(out.shape)))
    worst = 0.0
    for k, x in enumerate(inputs):
        if not x.dtype.is_floating_point:
            continue
        xs = [t.detach().clone() for t in inputs]
        xs[k].requires_grad_(True)
        ad.backward(ad.total(op(*xs) * w))
        analytic = xs[k].grad.numpy()

        def f(v, k=k):
            ys = [t.detach() for t in inputs]
            ys[k] = v
            with torch.no_grad():
                return ad.total(op(*ys) * w)

        worst = max(worst, rel_err(analytic, fd_grad(f, x)))
    assert worst < tol, worst
    return worst


@pytest.fixture(autouse=True)
def wide():
    with ad.precision("wide"):
        yield


def rand(rng, *shape, away_from_zero=False):
    a = rng.normal(size=shape)
    if away_from_zero:
        a = np.where(np.abs(a) < 10 * H, a + np.sign(a + 1e-12) * 0.1, a)
    return torch.as_tensor(a)


def sizes(rng, k, lo=1, hi=4):
    return [int(v) for v in rng.integers(lo, hi + 1, k)]


class TestGradients:
    def test_matmul(self):
        rng = np.random.default_rng(0)
        for i in range(CASES):
            m, k, n, b = sizes(rng, 4)
            if i % 2:
                check_op(ad.matmul, [rand(rng, m, k), rand(rng, k, n)], rng)
            else:
                check_op(ad.matmul, [rand(rng, b, m, k), rand(rng, b, k, n)], rng)

    def test_add_broadcast(self):
        rng = np.random.default_rng(1)
        for _ in range(CASES):
            a, b, c = sizes(rng, 3)
            check_op(ad.add, [rand(rng, a, b, c), rand(rng, c)], rng)
            check_op(ad.add, [rand(rng, a, b, c), rand(rng, a, b, c)], rng)

    def test_scale(self):
        rng = np.random.default_rng(2)
        for _ in range(CASES):
            s = float(rng.normal())
            check_op(lambda x: ad.scale(x, s), [rand(rng, *sizes(rng, 2))], rng)

    def test_concat_and_slice(self):
        rng = np.random.default_rng(3)
        for _ in range(CASES):
            a, b, c = sizes(rng, 3)
            dim = int(rng.integers(0, 2))
            shape2 = [a, b]
            shape2[dim] = c
            check_op(lambda x, y: ad.concat([x, y], dim), [rand(rng, a, b), rand(rng, *shape2)], rng)
            n = a + c
            lo = int(rng.integers(0, n))
            hi = int(rng.integers(lo + 1, n + 1))
            check_op(lambda x: ad.slice_(x, 0, lo, hi), [rand(rng, n, b)], rng)

    def test_softmax_family(self):
        rng = np.random.default_rng(4)
        for _ in range(CASES):
            shape = sizes(rng, 2, 1, 5)
            check_op(ad.softmax, [rand(rng, *shape)], rng)
            check_op(ad.log_softmax, [rand(rng, *shape)], rng)

    def test_masked_softmax(self):
        rng = np.random.default_rng(5)
        for _ in range(CASES):
            a, n = sizes(rng, 2, 2, 6)
            mask = torch.as_tensor(rng.random((a, n)) < 0.4)
            mask[:, 0] = False
            check_op(lambda x: ad.softmax(ad.masked_fill(x, mask, float("-inf"))), [rand(rng, a, n)], rng)

    def test_elementwise(self):
        rng = np.random.default_rng(6)
        for _ in range(CASES):
            shape = sizes(rng, 3)
            check_op(ad.tanh, [rand(rng, *shape)], rng)
            check_op(ad.relu, [rand(rng, *shape, away_from_zero=True)], rng)

    def test_reductions(self):
        rng = np.random.default_rng(7)
        for _ in range(CASES):
            shape = sizes(rng, 3)
            dim = int(rng.integers(0, 3))
            check_op(lambda x: ad.mean(x, dim), [rand(rng, *shape)], rng)
            check_op(lambda x: ad.total(x).reshape(1), [rand(rng, *shape)], rng)

    def test_conv2d(self):
        rng = np.random.default_rng(8)
        for i in range(CASES):
            B, C, O = sizes(rng, 3, 1, 3)
            Hs, Ws = sizes(rng, 2, 3, 6)
            stride = 1 + i % 2
            pad = int(rng.integers(0, 2))
            check_op(lambda x, w, b: ad.conv2d(x, w, b, stride, pad),
                     [rand(rng, B, C, Hs, Ws), rand(rng, O, C, 3, 3), rand(rng, O)], rng)

    def test_embedding(self):
        rng = np.random.default_rng(9)
        for i in range(CASES):
            B, V, D, T = sizes(rng, 4, 1, 5)
            if i % 3 == 0:
                idx = torch.as_tensor(rng.integers(0, V, (T,)))
                check_op(lambda t: ad.embedding(t, idx), [rand(rng, V, D)], rng)
            elif i % 3 == 1:
                idx = torch.as_tensor(rng.integers(0, V, (B,)))
                check_op(lambda t: ad.embedding(t, idx), [rand(rng, B, V, D)], rng)
            else:
                idx = torch.as_tensor(rng.integers(0, V, (B, T)))
                check_op(lambda t: ad.embedding(t, idx), [rand(rng, B, V, D)], rng)

    def test_linear_and_layer_norm(self):
        rng = np.random.default_rng(10)
        for _ in range(CASES):
            a, i, o = sizes(rng, 3, 2, 5)
            check_op(ad.linear, [rand(rng, a, i), rand(rng, i, o), rand(rng, o)], rng)
            x = rand(rng, a, o)
            # central differences need h small against the spread being normalised
            while x.std(dim=-1, unbiased=False).min() < 100 * H:
                x = rand(rng, a, o)
            check_op(ad.layer_norm, [x, rand(rng, o), rand(rng, o)], rng)

    def test_set_norm(self):
        rng = np.random.default_rng(12)
        for i in range(CASES):
            B, N, D = sizes(rng, 3, 2, 5)
            pad = None
            if i % 2:
                pad = torch.as_tensor(rng.random((B, N)) < 0.3)
                pad[:, :2] = False
            x = rand(rng, B, N, D)
            keep = torch.ones(B, N, dtype=torch.bool) if pad is None else ~pad
            # same conditioning as layer norm, over the unpadded rows of each set
            while min(float(x[b][keep[b]].std(dim=0, unbiased=False).min()) for b in range(B)) < 100 * H:
                x = rand(rng, B, N, D)
            check_op(lambda x, g, b: ad.set_norm(x, g, b, pad), [x, rand(rng, D), rand(rng, D)], rng)

    def test_attention_composite(self):
        from naviformer.model import MultiHeadAttention
        rng = np.random.default_rng(11)
        torch.manual_seed(0)
        for _ in range(CASES):
            B, Nq, Nk = sizes(rng, 3, 1, 4)
            mha = MultiHeadAttention(8, 2).double()
            mask = torch.as_tensor(rng.random((B, Nk)) < 0.3)
            mask[:, 0] = False
            q = rand(rng, B, Nq, 8)
            kv = rand(rng, B, Nk, 8)
            check_op(lambda q, kv: mha(q, kv, key_mask=mask), [q, kv], rng)


class TestBasics:
    def test_uniform_softmax(self):
        p = ad.softmax(ad.tensor([0.0, 0.0, 0.0]))
        assert torch.allclose(p, torch.full((3,), 1 / 3))

    def test_masked_softmax_zero(self):
        x = ad.tensor([0.3, 2.0, -1.0])
        p = ad.softmax(ad.masked_fill(x, torch.tensor([False, True, False]), float("-inf")))
        assert p[1].item() == 0.0
        assert p.sum().item() == pytest.approx(1.0, abs=1e-15)

    def test_matmul_shape(self):
        assert tuple(ad.matmul(torch.zeros(2, 3), torch.zeros(3, 4)).shape) == (2, 4)

    def test_sum_gradient_ones(self):
        x = ad.tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
        ad.backward(ad.total(x))
        assert (x.grad == 1).all()

    def test_zero_loss_gradient(self):
        x = ad.tensor([1.0, -2.0], requires_grad=True)
        ad.backward(ad.total(ad.scale(x, 0.0)))
        assert (x.grad == 0).all()

    def test_non_scalar_backward_rejected(self):
        x = ad.tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ad.DimensionError):
            ad.backward(x * 2)

    def test_shape_errors(self):
        with pytest.raises(ad.DimensionError):
            ad.matmul(torch.zeros(2, 3), torch.zeros(4, 2))
        with pytest.raises(ad.DimensionError):
            ad.add(torch.zeros(2, 3), torch.zeros(2))
        with pytest.raises(ad.DimensionError):
            ad.concat([torch.zeros(2, 3), torch.zeros(3, 2)], 0)
        with pytest.raises(ad.DimensionError):
            ad.masked_fill(torch.zeros(2, 3), torch.zeros(3, dtype=torch.bool), 0.0)
        with pytest.raises(ad.DimensionError):
            ad.conv2d(torch.zeros(1, 2, 4, 4), torch.zeros(1, 3, 3, 3))
        with pytest.raises(ValueError):
            ad.conv2d(torch.zeros(1, 2, 4, 4), torch.zeros(1, 2, 3, 3), stride=3)

    def test_set_norm_statistics(self):
        x = torch.as_tensor(np.random.default_rng(0).normal(size=(3, 5, 4)))
        y = ad.set_norm(x, torch.ones(4), torch.zeros(4))
        assert torch.allclose(y.mean(1), torch.zeros(3, 4), atol=1e-12)
        assert torch.allclose(y.var(1, unbiased=False), torch.ones(3, 4), atol=1e-4)
        pad = torch.zeros(3, 5, dtype=torch.bool)
        pad[:, 3:] = True
        z = ad.set_norm(x, torch.ones(4), torch.zeros(4), pad)
        assert torch.allclose(z[:, :3], ad.set_norm(x[:, :3], torch.ones(4), torch.zeros(4)), atol=1e-12)

    def test_precision_modes(self):
        with ad.precision("standard"):
            assert ad.tensor([1.0]).dtype == torch.float32
        assert ad.tensor([1.0]).dtype == torch.float64

    def test_clip_grad_norm(self):
        p = ad.tensor([0.0, 0.0], requires_grad=True)
        p.grad = torch.tensor([3.0, 4.0], dtype=p.dtype)
        norm = ad.clip_grad_norm([p], 1.0)
        assert norm == pytest.approx(5.0)
        assert p.grad.norm().item() == pytest.approx(1.0, rel=1e-9)


class TestAdam:
    def test_zero_gradient_no_change(self):
        p = ad.tensor([1.0, -2.0])
        st = ad.AdamState.zeros_like([p])
        ad.adam_step([p], [torch.zeros_like(p)], st, lr=0.1)
        assert p.tolist() == [1.0, -2.0]

    def test_first_step_sign(self):
        p = ad.tensor([0.0, 0.0, 0.0])
        st = ad.AdamState.zeros_like([p])
        ad.adam_step([p], [ad.tensor([0.5, -3.0, 1e-3])], st, lr=1e-2)
        assert p.numpy() == pytest.approx([-1e-2, 1e-2, -1e-2], rel=1e-4)

    def test_constant_gradient_step_tends_to_lr(self):
        p = ad.tensor([0.0])
        st = ad.AdamState.zeros_like([p])
        prev = 0.0
        for _ in range(3000):
            ad.adam_step([p], [ad.tensor([0.7])], st, lr=1e-3)
            step, prev = prev - p.item(), p.item()
        assert step == pytest.approx(1e-3, rel=1e-4)

    def test_matches_torch_adam(self):
        rng = np.random.default_rng(0)
        a = ad.tensor(rng.normal(size=(4, 3)))
        b = a.clone().requires_grad_(True)
        st = ad.AdamState.zeros_like([a])
        opt = torch.optim.Adam([b], lr=3e-3, betas=(0.9, 0.999), eps=1e-8)
        for _ in range(25):
            g = ad.tensor(rng.normal(size=(4, 3)))
            ad.adam_step([a], [g], st, lr=3e-3)
            b.grad = g.clone()
            opt.step()
        assert torch.allclose(a, b.detach(), rtol=0, atol=1e-12)

    def test_misaligned(self):
        p = ad.tensor([1.0])
        with pytest.raises(ad.DimensionError):
            ad.adam_step([p], [ad.tensor([1.0, 2.0])], ad.AdamState.zeros_like([p]))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        t = {"w": torch.arange(6.0).reshape(2, 3), "b": torch.tensor([1.5], dtype=torch.float32)}
        digest = ad.save_tensors(tmp_path / "c.ckpt", t, {"note": "x"})
        back, meta = ad.load_tensors(tmp_path / "c.ckpt")
        assert meta == {"note": "x"}
        assert list(back) == ["w", "b"]
        assert torch.equal(back["w"], t["w"]) and back["b"].dtype == torch.float32
        assert len(digest) == 64

    def test_layout(self, tmp_path):
        ad.save_tensors(tmp_path / "c.ckpt", {"a": torch.tensor([1.0, 2.0])}, {})
        blob = (tmp_path / "c.ckpt").read_bytes()
        assert blob[:8] == b"NAVCKPT\x00"
        version, mlen = struct.unpack("<II", blob[8:16])
        assert version == 1
        manifest = json.loads(blob[16:16 + mlen])
        e = manifest["tensors"][0]
        assert e["name"] == "a" and e["shape"] == [2] and e["dtype"] == "float64"
        data = blob[16 + mlen: -32]
        assert np.frombuffer(data, "<f8").tolist() == [1.0, 2.0]

    def test_corruption_detected(self, tmp_path):
        ad.save_tensors(tmp_path / "c.ckpt", {"a": torch.tensor([1.0, 2.0])}, {})
        blob = bytearray((tmp_path / "c.ckpt").read_bytes())
        blob[-40] ^= 1
        (tmp_path / "c.ckpt").write_bytes(bytes(blob))
        with pytest.raises(ValueError):
            ad.load_tensors(tmp_path / "c.ckpt")
