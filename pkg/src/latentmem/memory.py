"""Query builder and short/long latent memory formers.

The builder encodes ``[H, Q_init]`` under a mask that lets query rows read
every hidden-state row while hidden-state rows never see the queries; the last
``K`` outputs are the memory query.  A former appends ``[Q, M_init]`` to its
host stack's input sequence, runs the stack with its own low-rank adapter
enabled and keeps the last ``N`` rows.  The short former lives on the vision
encoder and its output goes through the projector; the long former lives on
the language decoder.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .layers import MLP, LayerNorm, Module, SelfAttention, adapters, as_batch, causal_mask
from .tensor import Tensor
from .vlm import KINDS, LONG, SHORT, ModelConfig, ToyVLM

LOG_2PI = math.log(2.0 * math.pi)


def build_mask(h_len: int, K: int) -> np.ndarray:
    """Additive mask over ``[H, Q]``: hidden rows get -inf toward query columns."""
    n = h_len + K
    mask = np.zeros((n, n))
    mask[:h_len, h_len:] = -np.inf
    return mask


class BuilderLayer(Module):
    """``x + FF(LN(x + SA(LN x)))`` -- the residual layout used by the builder."""

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(d)
        self.attn = SelfAttention(d, n_heads, rng)
        self.ln2 = LayerNorm(d)
        self.ff = MLP(d, 4 * d, rng)

    def __call__(self, x: Tensor, mask: np.ndarray, record: list | None = None) -> Tensor:
        return self.ff(self.ln2(x + self.attn(self.ln1(x), mask, record))) + x


class QueryBuilder(Module):
    def __init__(self, d: int, K: int, n_layers: int, n_heads: int, rng: np.random.Generator):
        self.d = d
        self.K = K
        self.Q_init = T.parameter(rng.normal(0.0, 1.0, size=(K, d)))
        self.layers = [BuilderLayer(d, n_heads, rng) for _ in range(n_layers)]

    def encode(self, rows: Tensor, h_len: int, record: list | None = None) -> Tensor:
        """Run every layer over ``rows`` whose first ``h_len`` entries are hidden states."""
        x, squeeze = as_batch(rows)
        mask = build_mask(h_len, x.shape[1] - h_len)
        for layer in self.layers:
            x = layer(x, mask, record)
        return x.reshape(x.shape[1:]) if squeeze else x

    def __call__(self, H, record: list | None = None) -> Tensor:
        H = T.as_tensor(H)
        if H.ndim != 2 or H.shape[0] == 0:
            raise ValueError(f"builder needs a nonempty (n, d) matrix, got {H.shape}")
        if H.shape[1] != self.d:
            raise ValueError(f"builder expects width {self.d}, got {H.shape[1]}")
        out = self.encode(T.concat([H, self.Q_init], axis=0), H.shape[0], record)
        return out[-self.K:]


class MemorySystem(Module):
    """Builder, learnable memory initialisers and the two former adapters."""

    def __init__(self, vlm: ToyVLM, seed: int = 0):
        cfg: ModelConfig = vlm.config
        self.config = cfg
        self._vlm = vlm
        rng = np.random.default_rng([seed, 7])
        self.builder = QueryBuilder(cfg.d, cfg.K, cfg.builder_layers, cfg.n_heads, rng)
        self.M_init_short = T.parameter(rng.normal(0.0, 1.0, size=(cfg.N_s, cfg.d_vision)))
        self.M_init_long = T.parameter(rng.normal(0.0, 1.0, size=(cfg.N_l, cfg.d)))
        for name, stack in (("former_s", "encoder"), ("former_l", "decoder")):
            for lin in vlm.adapter_targets(stack):
                lin.add_adapter(name, cfg.rank, cfg.alpha, cfg.drop_out_rate, rng)

    @property
    def vlm(self) -> ToyVLM:
        return self._vlm

    def parameters(self) -> dict[str, Tensor]:
        out = self.named_parameters("mem.")
        for i, blk in enumerate(self._vlm.enc_blocks):
            out.update(blk.named_adapters("former_s", f"mem.adapter.former_s.enc_blocks.{i}."))
        for i, blk in enumerate(self._vlm.dec_blocks):
            out.update(blk.named_adapters("former_l", f"mem.adapter.former_l.dec_blocks.{i}."))
        return out

    def span_length(self, kind: str) -> int:
        return {SHORT: self.config.N_s, LONG: self.config.N_l}[kind]

    def build_query(self, H, record: list | None = None) -> Tensor:
        return self.builder(H, record)

    def form_memory(self, kind: str, X, Q: Tensor, dropout_rng=None) -> Tensor:
        """Latent span ``F_kind([X, Q, M_init])[-N:]`` in decoder input space."""
        if kind not in KINDS:
            raise ValueError(f"unknown memory kind {kind!r}")
        vlm = self._vlm
        X = T.as_tensor(X)
        if X.ndim != 2:
            raise ValueError(f"X must be (n, width), got {X.shape}")
        if kind == SHORT:
            if X.shape[1] != self.config.d_vision:
                raise ValueError(f"short former expects width {self.config.d_vision}, got {X.shape[1]}")
            rows = T.concat([X, Q, self.M_init_short], axis=0)
            with adapters("former_s", dropout_rng=dropout_rng):
                x = rows.reshape(1, *rows.shape)
                for blk in vlm.enc_blocks:
                    x = blk(x, None)
                out = vlm.enc_ln(x[0, -self.config.N_s:])
            return vlm.project_visual(out)
        if X.shape[1] != self.config.d:
            raise ValueError(f"long former expects width {self.config.d}, got {X.shape[1]}")
        rows = T.concat([X, Q, self.M_init_long], axis=0)
        with adapters("former_l", dropout_rng=dropout_rng):
            x = rows.reshape(1, *rows.shape)
            mask = causal_mask(rows.shape[0])
            for blk in vlm.dec_blocks:
                x = blk(x, mask)
            return vlm.dec_ln(x[0, -self.config.N_l:])

    def memory_mean(self, kind: str, H, X, dropout_rng=None) -> Tensor:
        return self.form_memory(kind, X, self.build_query(H), dropout_rng)


def sample_memory(span, sigma: float, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Add isotropic Gaussian noise; return the sample and its exact log-density.

    ``sigma == 0`` is the deterministic limit: span unchanged, log-density 0.
    """
    if sigma < 0:
        raise ValueError(f"memory noise sigma must be >= 0, got {sigma}")
    mean = span.data if isinstance(span, Tensor) else np.asarray(span, dtype=np.float64)
    if sigma == 0:
        return mean.copy(), 0.0
    eps = rng.standard_normal(mean.shape)
    sample = mean + sigma * eps
    logp = float(np.sum(-0.5 * eps * eps - math.log(sigma) - 0.5 * LOG_2PI))
    return sample, logp


def gaussian_row_logdensity(sample: np.ndarray, mean: Tensor, sigma: float) -> Tensor:
    """Per-row log N(sample; mean, sigma^2 I), differentiable in ``mean``."""
    if sigma <= 0:
        raise ValueError("row log-density needs sigma > 0")
    z = (T.as_tensor(sample) - mean) * (1.0 / sigma)
    width = sample.shape[-1]
    return (z * z).sum(axis=-1) * -0.5 - width * (math.log(sigma) + 0.5 * LOG_2PI)
