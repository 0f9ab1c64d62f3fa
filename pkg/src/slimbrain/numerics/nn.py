"""Parameter containers and transformer blocks built on :mod:`.tensor`."""

from __future__ import annotations

import hashlib
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Base class: any ``Tensor``/``Module``/list-of-``Module`` attribute is walked.

    Parameters are leaf tensors stored as attributes; names follow attribute
    paths (``blocks.0.attn.q.weight``).
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            path = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{path}.{i}", item

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.grad = None

    def requires_grad_(self, flag: bool = True):
        for _, p in self.named_parameters():
            p.requires_grad = flag
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = self.parameters()
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise T.ShapeError(f"load_state_dict[{k}]", p.shape, arr.shape)
            p.data = np.ascontiguousarray(arr, dtype=p.data.dtype)
        return self

    def n_parameters(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype=np.float32).tobytes())
        return h.hexdigest()


def _param(values) -> Tensor:
    return Tensor(values, requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        limit = np.sqrt(6.0 / (n_in + n_out))
        self.weight = _param(rng.uniform(-limit, limit, size=(n_in, n_out)))
        self.bias = _param(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = _param(np.ones(dim))
        self.beta = _param(np.zeros(dim))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self._eps)


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, out: int | None = None):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, out or dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Scaled dot-product attention within each group.

    ``q``, ``k``, ``v`` are (G, N, C); tokens attend only inside their group.
    """
    g, n, c = q.shape
    if k.shape != (g, k.shape[1], c) or v.shape != k.shape:
        raise T.ShapeError("attention", q.shape, k.shape, v.shape)
    if c % heads:
        raise ValueError(f"attention: width {c} not divisible by {heads} heads")
    d = c // heads
    m = k.shape[1]

    def split(x, length):
        return T.transpose(T.reshape(x, (g, length, heads, d)), (0, 2, 1, 3)).reshape(g * heads, length, d)

    out = T.scaled_attention(split(q, n), split(k, m), split(v, m))
    out = T.transpose(T.reshape(out, (g, heads, n, d)), (0, 2, 1, 3))
    return T.reshape(out, (g, n, c))


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.proj = Linear(dim, dim, rng)
        self._heads = heads

    def __call__(self, x: Tensor) -> Tensor:
        return self.proj(attention(self.q(x), self.k(x), self.v(x), self._heads))


class Block(Module):
    """Pre-norm transformer block operating on (G, N, C) token groups."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, dim * mlp_ratio, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def sinusoid(positions: np.ndarray, dim: int, base: float = 10000.0) -> np.ndarray:
    """Fixed sin/cos encoding of integer or real positions, shape (len, dim)."""
    if dim % 2:
        raise ValueError("sinusoid width must be even")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    freq = base ** (-np.arange(dim // 2, dtype=np.float64) * 2.0 / dim)
    ang = pos * freq
    out = np.empty((pos.shape[0], dim))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out
