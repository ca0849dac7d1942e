"""Transformer building blocks on top of :mod:`latentmem.tensor`."""

from __future__ import annotations

import contextlib
import math

import numpy as np

from . import tensor as T
from .tensor import Tensor

_ACTIVE_ADAPTERS: frozenset[str] = frozenset()
_DROPOUT_RNG: np.random.Generator | None = None


@contextlib.contextmanager
def adapters(*names: str, dropout_rng: np.random.Generator | None = None):
    """Enable the named low-rank adapters for forward passes in this block."""
    global _ACTIVE_ADAPTERS, _DROPOUT_RNG
    prev, prev_rng = _ACTIVE_ADAPTERS, _DROPOUT_RNG
    _ACTIVE_ADAPTERS = frozenset(names)
    _DROPOUT_RNG = dropout_rng
    try:
        yield
    finally:
        _ACTIVE_ADAPTERS, _DROPOUT_RNG = prev, prev_rng


def active_adapters() -> frozenset[str]:
    return _ACTIVE_ADAPTERS


class Module:
    """Minimal parameter container: walks attributes for tensors and submodules."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, Tensor) and val.requires_grad:
                out[prefix + key] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(f"{prefix}{key}."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{prefix}{key}.{i}."))
        return out

    def named_adapters(self, adapter: str, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            if key == "_adapters" and adapter in val:
                lora = val[adapter]
                out[prefix + "A"] = lora.A
                out[prefix + "B"] = lora.B
            elif key.startswith("_"):
                continue
            elif isinstance(val, Module):
                out.update(val.named_adapters(adapter, f"{prefix}{key}."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_adapters(adapter, f"{prefix}{key}.{i}."))
        return out


class LoRA:
    """Low-rank update ``(alpha / rank) * A @ B`` with input dropout."""

    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float, dropout: float,
                 rng: np.random.Generator):
        self.rank = rank
        self.alpha = alpha
        self.scale = alpha / rank
        self.dropout = dropout
        self.A = T.parameter(rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_in, rank)))
        self.B = T.parameter(np.zeros((rank, d_out)))

    def __call__(self, x: Tensor) -> Tensor:
        if self.dropout > 0 and _DROPOUT_RNG is not None:
            keep = (_DROPOUT_RNG.random(x.shape) >= self.dropout) / (1.0 - self.dropout)
            x = x * keep
        return ((x @ self.A) @ self.B) * self.scale


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = False,
                 std: float | None = None):
        std = 1.0 / math.sqrt(d_in) if std is None else std
        self.W = T.parameter(rng.normal(0.0, std, size=(d_in, d_out)))
        self.b = T.parameter(np.zeros(d_out)) if bias else None
        self._adapters: dict[str, LoRA] = {}

    @property
    def d_in(self) -> int:
        return self.W.shape[0]

    def add_adapter(self, name: str, rank: int, alpha: float, dropout: float,
                    rng: np.random.Generator) -> LoRA:
        lora = LoRA(self.W.shape[0], self.W.shape[1], rank, alpha, dropout, rng)
        self._adapters[name] = lora
        return lora

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.W.shape[0]:
            raise T.ShapeError(f"linear: input width {x.shape[-1]} != {self.W.shape[0]}")
        y = x @ self.W
        if self.b is not None:
            y = y + self.b
        for name, lora in self._adapters.items():
            if name in _ACTIVE_ADAPTERS:
                y = y + lora(x)
        return y


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = T.parameter(np.ones(d))
        self.beta = T.parameter(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


def causal_mask(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), -np.inf), k=1)


class SelfAttention(Module):
    """Multi-head self-attention over (B, T, d) inputs with an additive mask."""

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator):
        if d % n_heads:
            raise ValueError(f"width {d} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng, std=1.0 / math.sqrt(2 * d))

    def __call__(self, x: Tensor, mask: np.ndarray | None = None,
                 record: list | None = None) -> Tensor:
        B, n, d = x.shape
        h = self.n_heads
        dh = d // h

        def heads(t: Tensor) -> Tensor:
            return t.reshape(B, n, h, dh).transpose(0, 2, 1, 3)

        q, k, v = heads(self.q(x)), heads(self.k(x)), heads(self.v(x))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        if mask is not None:
            m = mask if mask.ndim == 2 else mask[:, None, :, :]
            probs = T.softmax_masked(scores, m)
        else:
            probs = T.softmax_masked(scores)
        if record is not None:
            record.append(probs.data)
        out = (probs @ v).transpose(0, 2, 1, 3).reshape(B, n, d)
        return self.o(out)


class MLP(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        self.fc = Linear(d, hidden, rng, bias=True)
        self.proj = Linear(hidden, d, rng, bias=True, std=1.0 / math.sqrt(2 * hidden))

    def __call__(self, x: Tensor) -> Tensor:
        return self.proj(T.gelu(self.fc(x)))


class Block(Module):
    """Pre-norm residual block: ``x + SA(LN x)`` then ``x + FF(LN x)``."""

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, mlp_ratio: int = 4):
        self.ln1 = LayerNorm(d)
        self.attn = SelfAttention(d, n_heads, rng)
        self.ln2 = LayerNorm(d)
        self.mlp = MLP(d, mlp_ratio * d, rng)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None, record: list | None = None) -> Tensor:
        x = x + self.attn(self.ln1(x), mask, record)
        return x + self.mlp(self.ln2(x))


def as_batch(x: Tensor) -> tuple[Tensor, bool]:
    """Lift a (T, d) tensor to (1, T, d); the flag says whether to squeeze back."""
    if x.ndim == 2:
        return x.reshape(1, *x.shape), True
    return x, False
