"""Small parameterized building blocks on top of the tensor engine.

Parameters are plain tensors with requires_grad=True, initialized
uniformly in [-1/sqrt(fan_in), 1/sqrt(fan_in)]; discovery walks module
attributes, so insertion order makes parameter naming deterministic.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .rng import Rng
from .tensor import Tensor, concat

__all__ = [
    "Module",
    "Linear",
    "LayerNorm",
    "MultiheadAttention",
    "FeedForward",
    "MaskEmbedMLP",
    "Conv2d",
    "conv2d",
]


class Module:
    """Base class providing recursive named-parameter discovery."""

    def named_parameters(self, prefix: str = "") -> dict:
        out = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(f"{key}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{key}.{i}"] = item
        return out

    def load_state(self, tensors: dict, prefix: str = "") -> None:
        """Replace parameter values in place from name -> ndarray."""
        params = self.named_parameters(prefix)
        for name, param in params.items():
            arr = tensors[name]
            if tuple(arr.shape) != param.data.shape:
                raise ShapeError(f"parameter {name!r} shape mismatch")
            param.data = np.array(arr, dtype=np.float64)
            param.grad = None

    def state(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}


def _init(rng: Rng, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(shape, -bound, bound), requires_grad=True)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: Rng, bias: bool = True):
        self.weight = _init(rng, (in_dim, out_dim), in_dim)
        self.bias = _init(rng, (out_dim,), in_dim) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        return centered / (var + self.eps).sqrt() * self.gamma + self.beta


class MultiheadAttention(Module):
    """Scaled dot-product attention, optional binary key mask per query.

    A query row whose mask admits no key falls back to unmasked attention
    for that row. With heads=1 this is exactly softmax(QK^T/sqrt(C))V
    followed by the output projection.
    """

    def __init__(self, dim: int, heads: int, rng: Rng):
        if dim % heads != 0:
            raise ShapeError("channels must be divisible by heads")
        self.dim = dim
        self.heads = heads
        self.proj_q = Linear(dim, dim, rng)
        self.proj_k = Linear(dim, dim, rng)
        self.proj_v = Linear(dim, dim, rng)
        self.proj_out = Linear(dim, dim, rng)

    def __call__(self, query: Tensor, key: Tensor, value: Tensor,
                 mask: np.ndarray | None = None) -> Tensor:
        q = self.proj_q(query)
        k = self.proj_k(key)
        v = self.proj_v(value)
        if mask is not None:
            mask = np.asarray(mask)
            if mask.shape != (q.shape[0], k.shape[0]):
                raise ShapeError("attention mask shape mismatch")
            dead = mask.sum(axis=1) == 0
            if dead.any():
                mask = mask.copy()
                mask[dead, :] = 1  # fully-masked query attends everywhere
        head_dim = self.dim // self.heads
        scale = 1.0 / np.sqrt(head_dim)
        outs = []
        for h in range(self.heads):
            qh = q.narrow(1, h * head_dim, head_dim)
            kh = k.narrow(1, h * head_dim, head_dim)
            vh = v.narrow(1, h * head_dim, head_dim)
            scores = (qh @ kh.T) * scale
            if mask is not None:
                scores = scores.masked_fill(mask, -np.inf)
            attn = scores.softmax(axis=1)
            outs.append(attn @ vh)
        merged = outs[0] if self.heads == 1 else concat(outs, axis=1)
        return self.proj_out(merged)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: Rng):
        self.lin1 = Linear(dim, hidden, rng)
        self.lin2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(self.lin1(x).relu())


class MaskEmbedMLP(Module):
    """Two-layer MLP producing per-query mask embeddings."""

    def __init__(self, dim: int, rng: Rng):
        self.lin1 = Linear(dim, dim, rng)
        self.lin2 = Linear(dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(self.lin1(x).relu())


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution on [T, H, W, Cin] input with [kh, kw, Cin, Cout] kernel."""
    t, h, w, cin = x.shape
    kh, kw, cin_w, cout = weight.shape
    if cin != cin_w:
        raise ShapeError("conv2d channel mismatch")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    cols = np.empty((t, ho, wo, kh * kw * cin))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i:i + ho * stride:stride, j:j + wo * stride:stride, :]
            cols[..., (i * kw + j) * cin:(i * kw + j + 1) * cin] = patch
    wmat = weight.data.reshape(kh * kw * cin, cout)
    out = cols.reshape(-1, kh * kw * cin) @ wmat
    if bias is not None:
        out = out + bias.data
    out = out.reshape(t, ho, wo, cout)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        g2 = g.reshape(-1, cout)
        if weight.requires_grad:
            dw = cols.reshape(-1, kh * kw * cin).T @ g2
            weight._accumulate(dw.reshape(weight.data.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(t, ho, wo, kh * kw * cin)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    sl = dcols[..., (i * kw + j) * cin:(i * kw + j + 1) * cin]
                    dxp[:, i:i + ho * stride:stride, j:j + wo * stride:stride, :] += sl
            if padding:
                dxp = dxp[:, padding:-padding, padding:-padding, :]
            x._accumulate(dxp)

    return Tensor._make(out, parents, grad_fn)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int,
                 rng: Rng, padding: int | None = None):
        fan_in = kernel * kernel * in_ch
        self.weight = _init(rng, (kernel, kernel, in_ch, out_ch), fan_in)
        self.bias = _init(rng, (out_ch,), fan_in)
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)
