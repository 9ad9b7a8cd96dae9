"""Layers: affine, conv, attention, layer norm, pooling, embeddings.

Modules register parameters and submodules by attribute name, so checkpoints
address every array by a dotted path.  Padding is handled with explicit
masks: attention masks scores additively, convolutions see zeroed padded
positions, and pooling/losses divide by valid counts only.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import NEG_INF, Tensor

__all__ = [
    "Module",
    "Parameter",
    "Linear",
    "Conv1d",
    "LayerNorm",
    "Embedding",
    "MultiHeadSelfAttention",
    "CrossAttention",
    "mean_pool",
    "sinusoidal_position_encoding",
    "valid_mask",
    "ShapeError",
]


class ShapeError(ValueError):
    pass


class Parameter(Tensor):
    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Minimal parameter container with dotted-name traversal."""

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Parameter]]:
        out = []
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                out.append((full, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(f"{full}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{full}.{i}."))
                    elif isinstance(item, Parameter):
                        out.append((f"{full}.{i}", item))
        return out

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def _init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)


class Linear(Module):
    def __init__(self, dim_in: int, dim_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(_init(rng, (dim_in, dim_out), dim_in))
        self.bias = Parameter(np.zeros(dim_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError(f"linear expects last dim {self.weight.shape[0]}, got {x.shape}")
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class Conv1d(Module):
    """Same-padded kernel-3 convolution; stride 2 halves the length (ceil)."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, kernel: int = 3, stride: int = 1):
        if stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        self.stride = stride
        self.weight = Parameter(_init(rng, (kernel, cin, cout), kernel * cin))
        self.bias = Parameter(np.zeros(cout))

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[-1] != self.weight.shape[1]:
            raise ShapeError(f"conv1d expects (B, L, {self.weight.shape[1]}), got {x.shape}")
        return x.conv1d(self.weight, self.bias, stride=self.stride)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return x.layer_norm(self.gamma, self.beta)


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: np.random.Generator):
        self.weight = Parameter(rng.normal(0.0, 0.02, size=(num, dim)))

    def __call__(self, indices: np.ndarray) -> Tensor:
        idx = np.asarray(indices)
        if idx.min() < 0 or idx.max() >= self.weight.shape[0]:
            raise ShapeError(
                f"embedding index out of range [0, {self.weight.shape[0]}): "
                f"[{idx.min()}, {idx.max()}]"
            )
        return self.weight.take_rows(idx)


def valid_mask(valid_len: np.ndarray, capacity: int) -> np.ndarray:
    """(B, capacity, 1) float mask, 1 on valid positions."""
    pos = np.arange(capacity)[None, :]
    return (pos < np.asarray(valid_len)[:, None]).astype(np.float64)[:, :, None]


def _attention(q: Tensor, k: Tensor, v: Tensor, heads: int, score_bias: np.ndarray | None) -> Tensor:
    """Scaled dot-product attention over (B, L, D) tensors split into heads."""
    B, Lq, D = q.shape
    Lk = k.shape[1]
    dh = D // heads
    qh = q.reshape(B, Lq, heads, dh).swapaxes(1, 2)
    kh = k.reshape(B, Lk, heads, dh).swapaxes(1, 2)
    vh = v.reshape(B, Lk, heads, dh).swapaxes(1, 2)
    scores = (qh @ kh.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
    if score_bias is not None:
        scores = scores + Tensor(score_bias)
    attn = scores.softmax(axis=-1)
    out = attn @ vh
    return out.swapaxes(1, 2).reshape(B, Lq, D)


def _key_bias(valid_len: np.ndarray | None, B: int, Lq: int, Lk: int, causal: bool) -> np.ndarray | None:
    """Additive (B, 1, Lq, Lk) score bias: NEG_INF on masked keys."""
    bias = None
    if valid_len is not None:
        keys = np.arange(Lk)[None, :]
        masked = keys >= np.asarray(valid_len)[:, None]  # (B, Lk)
        bias = np.where(masked[:, None, None, :], NEG_INF, 0.0)
        bias = np.broadcast_to(bias, (B, 1, Lq, Lk)).copy()
    if causal:
        tri = np.triu(np.full((Lq, Lk), NEG_INF), k=1)
        bias = tri[None, None] if bias is None else bias + tri[None, None]
    return bias


class MultiHeadSelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, causal: bool = False):
        if dim % heads:
            raise ShapeError(f"heads {heads} must divide model dim {dim}")
        self.heads = heads
        self.causal = causal
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)

    def __call__(self, x: Tensor, valid_len: np.ndarray | None = None) -> Tensor:
        B, L, _ = x.shape
        bias = _key_bias(valid_len, B, L, L, self.causal)
        out = _attention(self.wq(x), self.wk(x), self.wv(x), self.heads, bias)
        return self.wo(out)


class CrossAttention(Module):
    """Queries attend over a separate context sequence (projected to dim)."""

    def __init__(self, dim: int, context_dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ShapeError(f"heads {heads} must divide model dim {dim}")
        self.heads = heads
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(context_dim, dim, rng)
        self.wv = Linear(context_dim, dim, rng)
        self.wo = Linear(dim, dim, rng)

    def __call__(self, x: Tensor, context: Tensor, context_valid_len: np.ndarray | None = None) -> Tensor:
        B, Lq, _ = x.shape
        Lk = context.shape[1]
        bias = _key_bias(context_valid_len, B, Lq, Lk, causal=False)
        out = _attention(self.wq(x), self.wk(context), self.wv(context), self.heads, bias)
        return self.wo(out)


def mean_pool(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Mean over axis 1 of (B, L, D); ``mask`` is (B, L, 1) validity."""
    if mask is None:
        return x.mean(axis=1)
    masked = x * Tensor(mask)
    counts = mask.sum(axis=1)  # (B, 1)
    return masked.sum(axis=1) * Tensor(1.0 / np.maximum(counts, 1.0))


def sinusoidal_position_encoding(length: int, dim: int) -> np.ndarray:
    """Fixed (length, dim) sine/cosine positional table."""
    pos = np.arange(length)[:, None]
    i = np.arange(dim // 2)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / dim)
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe
