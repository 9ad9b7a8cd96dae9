"""Reverse-mode autodiff over float64 numpy arrays.

Covers exactly the primitive set needed by the models in this package
(affine maps, 1-d convolution, attention, layer norm, masked pooling,
embeddings, softmax losses) rather than a general graph compiler.  Every
primitive has an analytic backward, validated against central finite
differences in the test suite.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

NEG_INF = -1e30  # additive attention mask value; large enough to zero softmax

__all__ = ["Tensor", "NEG_INF"]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    """A numpy array plus an optional gradient and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents: tuple[Tensor, ...] = ()

    # -- graph plumbing ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            if isinstance(g, np.ndarray) and g.shape == self.data.shape:
                self.grad = g.copy()
            else:
                self.grad = np.zeros_like(self.data)
                self.grad += g
        else:
            self.grad += g

    @staticmethod
    def _make(data, parents: tuple["Tensor", ...], backward) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(p for p in parents if p.requires_grad)
            out._backward = backward
        return out

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without grad requires a scalar output")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.asarray(grad, dtype=np.float64))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    # -- arithmetic ----------------------------------------------------------

    @staticmethod
    def _coerce(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def __add__(self, other):
        other = self._coerce(other)

        def bw(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g, other.shape))

        return Tensor._make(self.data + other.data, (self, other), bw)

    __radd__ = __add__

    def __neg__(self):
        def bw(g):
            self._accum(-g)

        return Tensor._make(-self.data, (self,), bw)

    def __sub__(self, other):
        other = self._coerce(other)

        def bw(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(-g, other.shape))

        return Tensor._make(self.data - other.data, (self, other), bw)

    def __rsub__(self, other):
        return Tensor._coerce(other) - self

    def __mul__(self, other):
        other = self._coerce(other)

        def bw(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g * self.data, other.shape))

        return Tensor._make(self.data * other.data, (self, other), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)

        def bw(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g / other.data, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(-g * self.data / other.data**2, other.shape))

        return Tensor._make(self.data / other.data, (self, other), bw)

    def __pow__(self, p: float):
        def bw(g):
            self._accum(g * p * self.data ** (p - 1))

        return Tensor._make(self.data**p, (self,), bw)

    def __matmul__(self, other):
        other = self._coerce(other)

        def bw(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g @ np.swapaxes(other.data, -1, -2), self.shape))
            if other.requires_grad:
                if other.data.ndim == 2 and self.data.ndim > 2:
                    # batched input times a shared matrix: one flattened GEMM
                    cols = self.data.shape[-1]
                    other._accum(
                        self.data.reshape(-1, cols).T @ g.reshape(-1, g.shape[-1])
                    )
                else:
                    other._accum(_unbroadcast(np.swapaxes(self.data, -1, -2) @ g, other.shape))

        return Tensor._make(self.data @ other.data, (self, other), bw)

    # -- elementwise nonlinearities -----------------------------------------

    def exp(self):
        out_data = np.exp(self.data)

        def bw(g):
            self._accum(g * out_data)

        return Tensor._make(out_data, (self,), bw)

    def log(self):
        def bw(g):
            self._accum(g / self.data)

        return Tensor._make(np.log(self.data), (self,), bw)

    def sqrt(self):
        out_data = np.sqrt(self.data)

        def bw(g):
            self._accum(g * 0.5 / out_data)

        return Tensor._make(out_data, (self,), bw)

    def sigmoid(self):
        out_data = 1.0 / (1.0 + np.exp(-self.data))

        def bw(g):
            self._accum(g * out_data * (1.0 - out_data))

        return Tensor._make(out_data, (self,), bw)

    def tanh(self):
        out_data = np.tanh(self.data)

        def bw(g):
            self._accum(g * (1.0 - out_data**2))

        return Tensor._make(out_data, (self,), bw)

    def gelu(self):
        """Exact GELU: x * Phi(x)."""
        phi = 0.5 * (1.0 + erf(self.data / math.sqrt(2.0)))
        pdf = np.exp(-0.5 * self.data**2) / math.sqrt(2.0 * math.pi)

        def bw(g):
            self._accum(g * (phi + self.data * pdf))

        return Tensor._make(self.data * phi, (self,), bw)

    # -- reductions / shape --------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        def bw(g):
            if axis is None:
                self._accum(np.broadcast_to(g, self.shape).copy())
                return
            gg = g
            if not keepdims:
                gg = np.expand_dims(gg, axis)
            self._accum(np.broadcast_to(gg, self.shape).copy())

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), bw)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    def reshape(self, *shape):
        def bw(g):
            self._accum(g.reshape(self.shape))

        return Tensor._make(self.data.reshape(*shape), (self,), bw)

    def swapaxes(self, a: int, b: int):
        def bw(g):
            self._accum(np.swapaxes(g, a, b))

        return Tensor._make(np.swapaxes(self.data, a, b), (self,), bw)

    def __getitem__(self, idx):
        def bw(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            self._accum(full)

        return Tensor._make(self.data[idx], (self,), bw)

    # -- fused primitives ----------------------------------------------------

    def softmax(self, axis: int = -1):
        x = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(x)
        out_data = e / e.sum(axis=axis, keepdims=True)

        def bw(g):
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            self._accum(out_data * (g - dot))

        return Tensor._make(out_data, (self,), bw)

    def log_softmax(self, axis: int = -1):
        x = self.data - self.data.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(x).sum(axis=axis, keepdims=True))
        out_data = x - lse
        sm = np.exp(out_data)

        def bw(g):
            self._accum(g - sm * g.sum(axis=axis, keepdims=True))

        return Tensor._make(out_data, (self,), bw)

    def layer_norm(self, gamma: "Tensor", beta: "Tensor", eps: float = 1e-6):
        """Normalize over the last axis, then scale and shift."""
        mu = self.data.mean(axis=-1, keepdims=True)
        xc = self.data - mu
        var = (xc**2).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        out_data = xhat * gamma.data + beta.data
        d = self.shape[-1]

        def bw(g):
            if gamma.requires_grad:
                gamma._accum((g * xhat).reshape(-1, d).sum(axis=0))
            if beta.requires_grad:
                beta._accum(g.reshape(-1, d).sum(axis=0))
            if self.requires_grad:
                dxhat = g * gamma.data
                m1 = dxhat.mean(axis=-1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
                self._accum(inv * (dxhat - m1 - xhat * m2))

        return Tensor._make(out_data, (self, gamma, beta), bw)

    def conv1d(self, weight: "Tensor", bias: "Tensor | None", stride: int = 1):
        """Same-padded 1-d convolution over axis 1 of a (B, L, Cin) input.

        weight is (K, Cin, Cout) with odd K; output length is L for stride 1
        and ceil(L / 2) for stride 2.
        """
        K, cin, cout = weight.shape
        pad = (K - 1) // 2
        x = self.data
        B, L, _ = x.shape
        xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
        out_len = (L + 2 * pad - K) // stride + 1
        s0, s1, s2 = xp.strides
        win = np.lib.stride_tricks.as_strided(
            xp, shape=(B, out_len, K, cin), strides=(s0, stride * s1, s1, s2)
        )
        out_data = np.tensordot(win, weight.data, axes=([2, 3], [0, 1]))
        if bias is not None:
            out_data = out_data + bias.data

        def bw(g):
            if weight.requires_grad:
                weight._accum(np.tensordot(win, g, axes=([0, 1], [0, 1])))
            if bias is not None and bias.requires_grad:
                bias._accum(g.reshape(-1, cout).sum(axis=0))
            if self.requires_grad:
                dxp = np.zeros_like(xp)
                for k in range(K):
                    dxp[:, k : k + stride * out_len : stride, :] += g @ weight.data[k].T
                self._accum(dxp[:, pad : pad + L, :])

        parents = (self, weight) if bias is None else (self, weight, bias)
        return Tensor._make(out_data, parents, bw)

    def repeat2(self):
        """Nearest-neighbour 2x upsample along axis 1 of (B, L, D)."""
        out_data = np.repeat(self.data, 2, axis=1)

        def bw(g):
            self._accum(g[:, 0::2, :] + g[:, 1::2, :])

        return Tensor._make(out_data, (self,), bw)

    def take_rows(self, indices: np.ndarray):
        """Embedding lookup: rows of a (N, D) table by integer index array."""
        idx = np.asarray(indices)

        def bw(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx.reshape(-1), g.reshape(-1, self.shape[-1]))
            self._accum(full)

        return Tensor._make(self.data[idx], (self,), bw)

    def straight_through(self, quantized: "Tensor") -> "Tensor":
        """Forward the quantized values, route gradients to self."""
        return self + (quantized - self).detach() if isinstance(quantized, Tensor) else self
