"""Small layer library on top of :mod:`scenemotion.autodiff`.

Parameters are plain ``Tensor`` attributes with ``requires_grad=True``.
Because tensors are immutable, an optimizer step swaps in new tensors via
:meth:`Module.set_parameters`.
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    def named_children(self):
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out[prefix + name] = val
        for name, child in self.named_children():
            out.update(child.parameters(prefix + name + "."))
        return out

    def set_parameters(self, values: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, val in list(vars(self).items()):
            key = prefix + name
            if isinstance(val, Tensor) and val.requires_grad and key in values:
                new = np.asarray(values[key], dtype=np.float64)
                if new.shape != val.shape:
                    raise ad.ShapeError(f"parameter {key}: expected {val.shape}, got {new.shape}")
                setattr(self, name, Tensor(new, requires_grad=True))
        for name, child in self.named_children():
            child.set_parameters(values, prefix + name + ".")

    def bind_parameters(self, tensors: dict[str, Tensor], prefix: str = "") -> None:
        """Install the given tensors themselves (not copies), e.g. slices of one flat leaf."""
        for name, val in list(vars(self).items()):
            key = prefix + name
            if isinstance(val, Tensor) and key in tensors:
                if tensors[key].shape != val.shape:
                    raise ad.ShapeError(f"parameter {key}: expected {val.shape}, got {tensors[key].shape}")
                setattr(self, name, tensors[key])
        for name, child in self.named_children():
            child.bind_parameters(tensors, prefix + name + ".")

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())


def _param(arr) -> Tensor:
    return Tensor(arr, requires_grad=True)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, bias: bool = True,
                 init: str = "uniform"):
        bound = 1.0 / math.sqrt(n_in)
        if init == "identity":
            if n_in != n_out:
                raise ValueError("identity init needs a square layer")
            w = np.eye(n_in)
        elif init == "zeros":
            w = np.zeros((n_in, n_out))
        else:
            w = rng.uniform(-bound, bound, size=(n_in, n_out))
        self.weight = _param(w)
        self.bias = _param(np.zeros(n_out) if init != "uniform" else rng.uniform(-bound, bound, size=n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        return y if self.bias is None else ad.add(y, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = _param(np.ones(dim))
        self.shift = _param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = ad.mean(x, axis=-1, keepdims=True)
        xc = ad.sub(x, mu)
        var = ad.mean(ad.mul(xc, xc), axis=-1, keepdims=True)
        return ad.add(ad.mul(ad.mul(xc, ad.power(ad.add(var, self.eps), -0.5)), self.gain), self.shift)


class MLP(Module):
    def __init__(self, rng, sizes: list[int]):
        self.layers = [Linear(rng, a, b) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.relu(x)
        return x


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return ad.transpose(ad.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


class MultiHeadAttention(Module):
    """Scaled dot-product attention, batch-first (B, N, D)."""

    def __init__(self, rng, dim: int, heads: int):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.o = Linear(rng, dim, dim)

    def __call__(self, x: Tensor, memory: Tensor | None = None) -> Tensor:
        src = x if memory is None else memory
        q = split_heads(self.q(x), self.heads)
        k = split_heads(self.k(src), self.heads)
        v = split_heads(self.v(src), self.heads)
        dh = q.shape[-1]
        att = ad.softmax(ad.scale(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh)), axis=-1)
        return self.o(merge_heads(ad.matmul(att, v)))


class GRU(Module):
    """Single-direction GRU over (B, T, D); frames with mask False keep the previous state."""

    def __init__(self, rng, n_in: int, hidden: int):
        self.hidden = hidden
        self.x2h = Linear(rng, n_in, 3 * hidden)
        self.h2h = Linear(rng, hidden, 3 * hidden)

    def __call__(self, x: Tensor, mask: np.ndarray, reverse: bool = False) -> Tensor:
        b, t, _ = x.shape
        hd = self.hidden
        gx_all = self.x2h(x)
        h = Tensor(np.zeros((b, hd)))
        steps = range(t - 1, -1, -1) if reverse else range(t)
        for i in steps:
            gx = gx_all[:, i, :]
            gh = self.h2h(h)
            r = ad.sigmoid(ad.add(gx[:, :hd], gh[:, :hd]))
            z = ad.sigmoid(ad.add(gx[:, hd:2 * hd], gh[:, hd:2 * hd]))
            n = ad.tanh(ad.add(gx[:, 2 * hd:], ad.mul(r, gh[:, 2 * hd:])))
            h_new = ad.add(n, ad.mul(z, ad.sub(h, n)))
            h = ad.where(mask[:, i:i + 1], h_new, h)
        return h


def sinusoidal_embedding(n: int, dim: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    freq = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2) / dim))
    pe = np.zeros((n, dim))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq[: dim // 2])
    return pe
